#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ctrack/oracles.hpp"
#include "ctrack/training.hpp"

namespace ctrack {

/// Deliberate defects for checking that the oracle suite catches them.
enum class Injection { kNone, kSamplerHalfP, kScheduleJump };

struct CliOptions {
  std::string config_path;  // empty: all defaults
  std::optional<std::uint64_t> seed;
  std::string out;
  bool f64 = false;
  Injection inject = Injection::kNone;
};

/// Config file (or defaults) with the --seed override applied.
RunConfig load_run_config(const CliOptions& opts);

/// Metrics of a run written to `<out>` are stored at `<out>.metrics.jsonl`.
std::string metrics_path(const std::string& checkpoint_path);

/// Each command returns a process exit code and reports failures on `err`.
int cmd_train_teacher(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_compress(const CliOptions& opts, const std::string& teacher_path, std::ostream& out,
                 std::ostream& err);
/// `teacher_path` may be empty for naive training from a random initialization.
int cmd_baseline(const CliOptions& opts, Regime mode, const std::string& teacher_path,
                 std::ostream& out, std::ostream& err);
/// `opts.out` is a directory receiving p<value>.ckpt, p<value>.ckpt.metrics.jsonl
/// and summary.tsv.
int cmd_sweep_p(const CliOptions& opts, const std::string& teacher_path,
                const std::vector<double>& ps, std::ostream& out, std::ostream& err);
/// Evaluates "student" if the checkpoint has one, else "teacher", unless
/// `model` names the prefix.
int cmd_eval(const CliOptions& opts, const std::string& checkpoint_path, bool hanning,
             const std::string& model, std::ostream& out, std::ostream& err);
int cmd_oracle(const CliOptions& opts, std::ostream& out, std::ostream& err);

/// Oracle options carrying the requested defect.
OracleOptions injected_options(Injection inject, bool f64, std::uint64_t seed);

/// Full command line: subcommands, global flags, usage errors (exit 2).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ctrack
