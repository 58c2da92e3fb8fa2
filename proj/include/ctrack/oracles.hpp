#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ctrack/compression.hpp"
#include "ctrack/data.hpp"
#include "ctrack/model.hpp"

namespace ctrack {

/// Every mask of length N with its exact probability under independent
/// Bernoulli(p) bits. Mask k has bit i = (k >> i) & 1.
struct PathDistribution {
  std::vector<PathMask> masks;
  std::vector<double> probs;
};

inline constexpr std::size_t kMaxEnumeratedStages = 16;

PathDistribution enumerate_paths(std::size_t n, double p);

using PathSampler = std::function<PathMask(std::size_t n, double p, Rng& rng)>;
using ScheduleFn = std::function<double(const ReplacementSchedule& s, double t)>;

/// Max |empirical - analytic| mask frequency over K draws.
double sampler_consistency(std::size_t n, double p, std::size_t k, Rng& rng,
                           const PathSampler& sampler = sample_path);

/// 4 * sqrt(q (1 - q) / K) with q the largest analytic mask probability.
double sampler_bound(std::size_t n, double p, std::size_t k);

/// Trapezoid estimate of (1/m) * integral of the schedule over [0, m].
double integrate_schedule(const ReplacementSchedule& s, std::size_t steps,
                          const ScheduleFn& schedule = schedule_p);

struct OracleCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct OracleReport {
  std::vector<OracleCheck> checks;
  bool all_pass() const;
  void add(std::string name, bool pass, std::string detail = {});
  void append(const OracleReport& other);
  /// One "PASS name: detail" / "FAIL ..." line per check.
  std::string text() const;
  /// Machine-readable list of {name, pass, detail}.
  std::string json() const;
};

/// (a) all-zeros mask with the teacher decoder equals the teacher forward,
/// (b) all-ones mask with the student decoder equals the student forward
/// (identity projections, shared embedding), (c) chaining the teacher's
/// stage snapshots reproduces every boundary and the monolithic output.
/// All comparisons are bitwise.
template <typename T>
OracleReport path_equivalence_suite(TrackerModel<T>& teacher, TrackerModel<T>& student,
                                    const StagePlan& plan,
                                    std::vector<ProjectionPair<T>>& projections,
                                    const Tensor<T>& z, const Tensor<T>& x);

struct GroupError {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradAudit {
  std::vector<GroupError> groups;  // trainable groups, finite differences vs backward
  double max_rel_error = 0.0;
  /// Frozen or unused groups whose analytic gradient must be exactly zero.
  std::vector<std::string> nonzero_frozen;
  std::size_t frozen_checked = 0;
};

/// Audits every parameter of a model trained alone on L_track.
GradAudit grad_audit_model(TrackerModel<double>& model, const Batch<double>& batch,
                           double step = 1e-5);

/// Audits the student, projections and `decoder` (teacher width) through composite_forward
/// under `mask` with all three losses; the teacher and every parameter not
/// on the masked path must get exactly zero gradient.
GradAudit grad_audit_composite(TrackerModel<double>& teacher, TrackerModel<double>& student,
                               Decoder<double>& decoder, const StagePlan& plan,
                               std::vector<ProjectionPair<double>>& projections,
                               const PathMask& mask, const Batch<double>& batch,
                               const LossWeights& weights, double step = 1e-5);

struct OracleOptions {
  PathSampler sampler = sample_path;
  ScheduleFn schedule = schedule_p;
  bool f64 = true;
  std::uint64_t seed = 0;
};

/// Schedule and sampler checks only (fast).
OracleReport schedule_oracles(const OracleOptions& options);
OracleReport sampler_oracles(const OracleOptions& options);
/// Path equivalence on small fresh models in the chosen precision.
OracleReport equivalence_oracles(const OracleOptions& options);
/// Gradient audits on tiny 64-bit models.
OracleReport gradient_oracles(const OracleOptions& options);
/// Everything above.
OracleReport run_oracle_suite(const OracleOptions& options);

}  // namespace ctrack
