#include "ctrack/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ctrack/checkpoint.hpp"
#include "ctrack/config.hpp"
#include "ctrack/metrics.hpp"

namespace ctrack {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string p_label(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", p);
  return buf;
}

MetricsSink progress_sink(std::ostream& out, MetricsWriter& writer) {
  return [&out, &writer](const MetricsRecord& r) {
    writer.write(r);
    out << "epoch " << r.epoch << "  p " << fixed(r.p, 3) << "  loss " << fixed(r.l_total, 4)
        << "  acc " << fixed(r.eval_accuracy, 4) << "  offset " << fixed(r.eval_offset_error, 4)
        << "  " << fixed(r.wall_seconds, 1) << "s\n";
    out.flush();
  };
}

TrackerModel<float> load_teacher(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(path);
  } catch (const CheckpointError& e) {
    if (e.kind() == CheckpointError::Kind::kNotFound) {
      throw std::runtime_error("teacher checkpoint not found: " + path);
    }
    throw;
  }
  if (!ck.has_model("teacher")) {
    throw std::runtime_error("no teacher model in checkpoint " + path);
  }
  if (!(ck.config.teacher_config() == cfg.teacher_config())) {
    throw std::runtime_error("teacher checkpoint " + path +
                             " has a different architecture than the config");
  }
  return extract_model<float>(ck, "teacher", cfg.teacher_config());
}

void save_run(const std::string& path, Regime regime, const RunConfig& cfg,
              const TrackerModel<float>* teacher, const TrackerModel<float>* student) {
  Checkpoint ck;
  ck.regime = regime;
  ck.config = cfg;
  if (student) add_model(ck, "student", *student);
  if (teacher) add_model(ck, "teacher", *teacher);
  save_checkpoint(ck, path);
}

std::string or_default(const std::string& s, const std::string& fallback) {
  return s.empty() ? fallback : s;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

void report(std::ostream& out, const std::string& what, const EvalMetrics& m) {
  out << what << ": accuracy " << fixed(m.accuracy, 4) << "  offset error "
      << fixed(m.offset_error, 4) << "  mean IoU " << fixed(m.mean_iou, 4) << "\n";
}

}  // namespace

RunConfig load_run_config(const CliOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? parse_config_string("") : parse_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  return cfg;
}

std::string metrics_path(const std::string& checkpoint_path) {
  return checkpoint_path + ".metrics.jsonl";
}

int cmd_train_teacher(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(opts);
    cfg.regime = Regime::kTeacher;
    const std::string path = or_default(opts.out, "teacher.ckpt");
    MetricsWriter writer(metrics_path(path));
    RunResult r = train_teacher(cfg, {progress_sink(out, writer), {}, {}});
    save_run(path, Regime::kTeacher, cfg, &r.model, nullptr);
    report(out, "teacher", r.final_eval);
    out << "wrote " << path << "\n";
    return 0;
  });
}

int cmd_compress(const CliOptions& opts, const std::string& teacher_path, std::ostream& out,
                 std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(opts);
    cfg.regime = Regime::kCompress;
    const TrackerModel<float> teacher = load_teacher(teacher_path, cfg);
    const std::string path = or_default(opts.out, "compress.ckpt");
    MetricsWriter writer(metrics_path(path));
    RunResult r = compress(teacher, cfg, {progress_sink(out, writer), {}, {}});
    save_run(path, Regime::kCompress, cfg, &teacher, &r.model);
    report(out, "student", r.final_eval);
    out << "wrote " << path << "\n";
    return 0;
  });
}

int cmd_baseline(const CliOptions& opts, Regime mode, const std::string& teacher_path,
                 std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(opts);
    cfg.regime = mode;
    std::optional<TrackerModel<float>> teacher;
    if (!teacher_path.empty()) {
      teacher = load_teacher(teacher_path, cfg);
    } else if (mode != Regime::kNaive) {
      throw std::runtime_error(regime_name(mode) + " needs --teacher");
    }
    const std::string path = or_default(opts.out, regime_name(mode) + ".ckpt");
    MetricsWriter writer(metrics_path(path));
    const TrackerModel<float>* tp = teacher ? &*teacher : nullptr;
    RunResult r = train_baseline(tp, cfg, mode, {progress_sink(out, writer), {}, {}});
    save_run(path, mode, cfg, tp, &r.model);
    report(out, "student", r.final_eval);
    out << "wrote " << path << "\n";
    return 0;
  });
}

int cmd_sweep_p(const CliOptions& opts, const std::string& teacher_path,
                const std::vector<double>& ps, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(opts);
    cfg.regime = Regime::kCompress;
    for (double p : ps) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::runtime_error("sweep p must lie in [0, 1], got " + p_label(p));
    }
    const TrackerModel<float> teacher = load_teacher(teacher_path, cfg);
    const std::filesystem::path dir = or_default(opts.out, "sweep");
    std::filesystem::create_directories(dir);
    std::vector<std::pair<double, EvalMetrics>> rows;
    for (double p : ps) {
      out << "p = " << p_label(p) << "\n";
      const std::string path = (dir / ("p" + p_label(p) + ".ckpt")).string();
      MetricsWriter writer(metrics_path(path));
      RunResult r = sweep_run(teacher, cfg, p, {progress_sink(out, writer), {}, {}});
      save_run(path, Regime::kCompress, cfg, &teacher, &r.model);
      rows.emplace_back(p, r.final_eval);
    }
    std::ofstream summary(dir / "summary.tsv", std::ios::trunc);
    if (!summary) throw std::runtime_error("cannot write " + (dir / "summary.tsv").string());
    summary << "p\taccuracy\toffset_error\tmean_iou\n";
    out << "p\taccuracy\toffset_error\tmean_iou\n";
    for (const auto& [p, m] : rows) {
      const std::string line = p_label(p) + "\t" + fixed(m.accuracy, 6) + "\t" +
                               fixed(m.offset_error, 6) + "\t" + fixed(m.mean_iou, 6) + "\n";
      summary << line;
      out << line;
    }
    return 0;
  });
}

int cmd_eval(const CliOptions& opts, const std::string& checkpoint_path, bool hanning,
             const std::string& model, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const std::string prefix = !model.empty() ? model : ck.has_model("student") ? "student" : "teacher";
    if (prefix != "student" && prefix != "teacher") {
      throw std::runtime_error("model must be student or teacher, got '" + prefix + "'");
    }
    if (!ck.has_model(prefix)) throw std::runtime_error("checkpoint has no " + prefix + " model");
    RunConfig cfg = ck.config;
    if (opts.seed) cfg.seed = *opts.seed;
    const TrackerConfig arch = prefix == "student" ? cfg.student_config() : cfg.teacher_config();
    TrackerModel<float> m = extract_model<float>(ck, prefix, arch);
    const auto samples = make_eval_set(kEvalSeed, cfg.task(), cfg.eval_samples);
    report(out, prefix + (hanning ? " (hanning on)" : " (hanning off)"),
           evaluate(m, samples, cfg.task(), hanning));
    return 0;
  });
}

OracleOptions injected_options(Injection inject, bool f64, std::uint64_t seed) {
  OracleOptions o;
  o.f64 = f64;
  o.seed = seed;
  switch (inject) {
    case Injection::kNone:
      break;
    case Injection::kSamplerHalfP:
      o.sampler = [](std::size_t n, double p, Rng& rng) { return sample_path(n, p / 2.0, rng); };
      break;
    case Injection::kScheduleJump:
      o.schedule = [](const ReplacementSchedule& s, double t) {
        const double v = schedule_p(s, t);
        return t > 0.5 * s.m ? std::min(1.0, v + 0.05) : v;
      };
      break;
  }
  return o;
}

int cmd_oracle(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const OracleReport r =
        run_oracle_suite(injected_options(opts.inject, opts.f64, opts.seed.value_or(0)));
    out << r.text();
    if (!opts.out.empty()) {
      std::ofstream f(opts.out, std::ios::trunc);
      if (!f) throw std::runtime_error("cannot write " + opts.out);
      f << r.json() << "\n";
    }
    const bool ok = r.all_pass();
    out << (ok ? "all oracles passed\n" : "oracle failures\n");
    return ok ? 0 : 1;
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Toy tracker compression by progressive module replacement", "ctrack"};
  app.require_subcommand(1);
  app.fallthrough();

  CliOptions opts;
  std::uint64_t seed = 0;
  std::string inject = "none";
  app.add_option("--config", opts.config_path, "key=value config file (defaults if omitted)");
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", opts.out, "output checkpoint (sweep-p: output directory)");
  app.add_flag("--f64", opts.f64, "run the oracle suite in 64-bit precision");
  app.add_option("--inject", inject, "deliberate oracle defect")
      ->check(CLI::IsMember({"none", "sampler-half-p", "schedule-jump"}))
      ->group("");

  std::string teacher;
  auto* train = app.add_subcommand("train-teacher", "train the teacher tracker");
  auto* comp = app.add_subcommand("compress", "progressive replacement training of the student");
  comp->add_option("--teacher", teacher, "teacher checkpoint")->required();

  std::string mode;
  auto* base = app.add_subcommand("baseline", "train a baseline student");
  base->add_option("--mode", mode, "naive | distill | decoupled")
      ->required()
      ->check(CLI::IsMember({"naive", "distill", "decoupled"}));
  base->add_option("--teacher", teacher, "teacher checkpoint (optional for naive)");

  std::vector<double> ps{0.1, 0.3, 0.5, 0.7, 0.9};
  auto* sweep = app.add_subcommand("sweep-p", "fixed-probability training for each p");
  sweep->add_option("--teacher", teacher, "teacher checkpoint")->required();
  sweep->add_option("--p", ps, "probabilities")->delimiter(',')->capture_default_str();

  std::string checkpoint, hanning = "on", which;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out set");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--hanning", hanning, "on | off")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  eval->add_option("--model", which, "student | teacher (default: student if present)");

  auto* oracle = app.add_subcommand("oracle", "run the oracle suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  if (seed_opt->count()) opts.seed = seed;
  if (inject == "sampler-half-p") opts.inject = Injection::kSamplerHalfP;
  else if (inject == "schedule-jump") opts.inject = Injection::kScheduleJump;

  if (train->parsed()) return cmd_train_teacher(opts, out, err);
  if (comp->parsed()) return cmd_compress(opts, teacher, out, err);
  if (base->parsed()) {
    const Regime r = mode == "naive" ? Regime::kNaive
                     : mode == "distill" ? Regime::kDistill
                                         : Regime::kDecoupled;
    return cmd_baseline(opts, r, teacher, out, err);
  }
  if (sweep->parsed()) return cmd_sweep_p(opts, teacher, ps, out, err);
  if (eval->parsed()) return cmd_eval(opts, checkpoint, hanning == "on", which, out, err);
  if (oracle->parsed()) return cmd_oracle(opts, out, err);
  return 2;
}

}  // namespace ctrack
