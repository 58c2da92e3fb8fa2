#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ctrack/graph.hpp"
#include "ctrack/model.hpp"
#include "ctrack/rng.hpp"

namespace ctrack {

enum class StageMode { kEven, kUneven };

/// Correspondence between N contiguous teacher stages and N student stages.
struct StagePlan {
  std::size_t num_stages = 0;
  std::vector<LayerRange> teacher_ranges;
  std::vector<LayerRange> student_ranges;
  StageMode mode = StageMode::kEven;

  std::size_t teacher_layers() const {
    return teacher_ranges.empty() ? 0 : teacher_ranges.back().end;
  }
  std::size_t student_layers() const {
    return student_ranges.empty() ? 0 : student_ranges.back().end;
  }
};

/// Splits a teacher of `teacher_layers` layers into `student_layers` stages,
/// one student layer per stage. Uneven mode takes explicit teacher stage sizes.
StagePlan divide_stages(std::size_t teacher_layers, std::size_t student_layers, StageMode mode,
                        std::span<const std::size_t> uneven_sizes = {});

/// Progressive replacement probability: constant p_init during the first
/// alpha1 fraction of the run, a linear ramp to 1, then 1 for the last
/// alpha2 fraction.
struct ReplacementSchedule {
  double p_init = 0.5;
  double alpha1 = 0.1;
  double alpha2 = 0.1;
  double m = 1.0;  // total epochs

  /// Throws std::invalid_argument naming the violated field.
  void validate() const;
};

/// Replacement probability at epoch t in [0, m].
double schedule_p(const ReplacementSchedule& s, double t);

/// Closed-form (1/m) * integral of schedule_p over [0, m].
double expected_p(const ReplacementSchedule& s);

/// Bit i is 1 when stage i runs the student, 0 when it runs the teacher.
struct PathMask {
  std::vector<std::uint8_t> bits;

  static PathMask all(std::size_t n, bool student);
  static PathMask single(std::size_t n, std::size_t student_stage);
  std::size_t size() const { return bits.size(); }
  std::size_t count() const;
  bool operator==(const PathMask&) const = default;
};

/// N independent Bernoulli(p) draws.
PathMask sample_path(std::size_t n, double p, Rng& rng);

/// Adapters that let a student stage run inside the teacher token space.
/// They exist only while training; the deployed student never applies them.
template <typename T>
struct ProjectionPair {
  Linear<T> in_proj;   // teacher_dim -> student_dim
  Linear<T> out_proj;  // student_dim -> teacher_dim
  /// Identity pair between equal widths; skipped in the forward pass and
  /// never trained, so dropping it at inference is exact.
  bool identity = false;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    in_proj.visit(prefix + ".in_proj", f);
    out_proj.visit(prefix + ".out_proj", f);
  }
};

/// One pair per stage: identity when the widths agree, otherwise small
/// random maps with standard deviation 1/sqrt(fan_in).
template <typename T>
std::vector<ProjectionPair<T>> make_projections(std::size_t num_stages, std::size_t teacher_dim,
                                                std::size_t student_dim, Rng& rng);

template <typename T>
struct CompositeResult {
  std::vector<Var> snapshots;  // teacher-space tokens after each stage
  Var tokens;
  Prediction<T> prediction;
};

/// Hybrid forward pass. The token stream starts from the teacher embedding
/// and stays in teacher space; stage i runs the teacher layers of the stage
/// when mask bit i is 0, otherwise in_proj -> student layer(s) -> out_proj.
/// `decoder` must accept teacher-width tokens.
///
/// If `teacher_trace` is a forward_full of the same teacher on the same
/// inputs recorded in `g` with the plan's teacher ranges, the leading run
/// of teacher stages reuses its snapshots instead of recomputing them.
template <typename T>
CompositeResult<T> composite_forward(Graph<T>& g, TrackerModel<T>& teacher,
                                     TrackerModel<T>& student, Decoder<T>& decoder,
                                     const StagePlan& plan,
                                     std::vector<ProjectionPair<T>>& projections,
                                     const PathMask& mask, const Tensor<T>& z, const Tensor<T>& x,
                                     const ForwardResult<T>* teacher_trace = nullptr);

struct LossWeights {
  double track = 1.0;
  double pred = 1.0;
  double feat = 0.2;

  void validate() const;
};

/// Cross entropy of the score map against the ground-truth cell plus the
/// L1 distance between the offset predicted at that cell and the truth.
template <typename T>
Var track_loss(Graph<T>& g, const Prediction<T>& pred, std::span<const std::size_t> gt_cells,
               const Tensor<T>& gt_offsets);

/// Tracking loss with the teacher as soft target: cross entropy against the
/// teacher's softmax plus L1 to the teacher offset at the teacher's argmax.
template <typename T>
Var prediction_guidance_loss(Graph<T>& g, const Prediction<T>& student,
                             const Prediction<T>& teacher);

/// Mean over stages of the mean squared elementwise distance.
template <typename T>
Var feature_mimic_loss(Graph<T>& g, std::span<const Var> student_snaps,
                       std::span<const Var> teacher_snaps);

/// Weighted sum of the three terms; absent terms contribute nothing.
template <typename T>
Var total_loss(Graph<T>& g, const LossWeights& w, Var l_track, std::optional<Var> l_pred,
               std::optional<Var> l_feat);

double total_loss(const LossWeights& w, double l_track, double l_pred, double l_feat);

}  // namespace ctrack
