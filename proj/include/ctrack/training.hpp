#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctrack/compression.hpp"
#include "ctrack/data.hpp"
#include "ctrack/model.hpp"

namespace ctrack {

enum class Regime { kTeacher, kCompress, kNaive, kDistill, kDecoupled };
enum class InitPolicy { kSkip, kFirstK, kRandom };
enum class DecoderInit { kTeacher, kRandom };

std::string regime_name(Regime r);
std::string init_policy_name(InitPolicy p);
std::string decoder_init_name(DecoderInit d);

/// Everything that determines a run. Defaults are the desk-scale recipe.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 60;
  std::size_t iters_per_epoch = 200;
  std::size_t batch = 32;
  double lr = 4e-4;
  std::size_t lr_decay_epoch = 48;
  double weight_decay = 1e-4;
  LossWeights weights;
  double p_init = 0.5;
  double alpha1 = 0.1;
  double alpha2 = 0.1;
  std::size_t teacher_layers = 8;
  std::size_t student_layers = 4;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch = 4;
  std::size_t template_side = 16;
  std::size_t search_side = 32;
  StageMode stage_mode = StageMode::kEven;
  std::vector<std::size_t> uneven_sizes;
  InitPolicy init_policy = InitPolicy::kSkip;
  DecoderInit decoder_init = DecoderInit::kTeacher;
  bool decoder_trainable = true;
  double noise = 0.1;
  std::size_t distractors = 2;
  /// Size of the held-out evaluation set.
  std::size_t eval_samples = 512;
  /// Trailing all-student epochs of the decoupled baseline and of
  /// fixed-probability sweep runs, counted within `epochs`.
  std::size_t finetune_epochs = 6;
  Regime regime = Regime::kCompress;

  TrackerConfig teacher_config() const;
  TrackerConfig student_config() const;
  TaskConfig task() const;
  ReplacementSchedule schedule() const;
  StagePlan plan() const;
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Seed of the shared held-out evaluation set.
inline constexpr std::uint64_t kEvalSeed = 0x5eed0e7a1ULL;

struct EvalMetrics {
  double accuracy = 0.0;
  double offset_error = 0.0;  // cell units
  double mean_iou = 0.0;      // boxes one cell wide
  bool operator==(const EvalMetrics&) const = default;
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double p = 0.0;
  double l_track = 0.0;
  double l_pred = 0.0;
  double l_feat = 0.0;
  double l_total = 0.0;
  double eval_accuracy = 0.0;
  double eval_offset_error = 0.0;
  double wall_seconds = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Separable Hanning window over the grid; symmetric by construction.
std::vector<double> hanning_window(std::size_t grid_side);

/// Deterministic metrics on a sample set. With use_hanning the softmax of
/// the score map is multiplied by a Hanning window centred on the grid
/// before the argmax.
template <typename T>
EvalMetrics evaluate(TrackerModel<T>& model, std::span<const SyntheticSample> samples,
                     const TaskConfig& task, bool use_hanning);

/// Metrics from raw predictions; exposed for testing.
EvalMetrics score_predictions(std::span<const std::size_t> cells,
                              std::span<const std::array<double, 2>> offsets,
                              std::span<const SyntheticSample> samples, std::size_t grid_side);

struct RunResult {
  TrackerModel<float> model;
  std::vector<MetricsRecord> metrics;
  EvalMetrics final_eval;
};

/// Hook for tests that need to observe the run between epochs.
using EpochHook = std::function<void(std::size_t epoch, const TrackerModel<float>& model)>;

struct RunOptions {
  MetricsSink sink;
  EpochHook on_epoch_end;
  /// Fixed replacement probability instead of the progressive schedule.
  std::optional<double> fixed_p;
};

RunResult train_teacher(const RunConfig& cfg, const RunOptions& options = {});

/// Progressive replacement training with all three losses.
RunResult compress(const TrackerModel<float>& teacher, const RunConfig& cfg,
                   const RunOptions& options = {});

/// Baselines. `teacher` may be null only for naive training with a random
/// initialization.
RunResult train_baseline(const TrackerModel<float>* teacher, const RunConfig& cfg, Regime mode,
                         const RunOptions& options = {});

/// epochs - finetune_epochs at fixed p, then finetune_epochs at p = 1.
RunResult sweep_run(const TrackerModel<float>& teacher, const RunConfig& cfg, double p,
                    const RunOptions& options = {});

/// Student built from a teacher according to the init policies.
TrackerModel<float> init_student(const TrackerModel<float>* teacher, const RunConfig& cfg);

}  // namespace ctrack
