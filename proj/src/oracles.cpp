#include "ctrack/oracles.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "ctrack/finite_difference.hpp"

namespace ctrack {

namespace {

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

std::size_t mask_index(const PathMask& m) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < m.size(); ++i) k |= static_cast<std::size_t>(m.bits[i] != 0) << i;
  return k;
}

}  // namespace

PathDistribution enumerate_paths(std::size_t n, double p) {
  if (n == 0 || n > kMaxEnumeratedStages) {
    throw std::invalid_argument("enumerate_paths: N must lie in [1, " +
                                std::to_string(kMaxEnumeratedStages) + "]");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("enumerate_paths: p outside [0, 1]");
  PathDistribution d;
  const std::size_t count = std::size_t{1} << n;
  d.masks.reserve(count);
  d.probs.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    PathMask m;
    m.bits.resize(n);
    double prob = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      m.bits[i] = static_cast<std::uint8_t>((k >> i) & 1);
      prob *= m.bits[i] ? p : 1.0 - p;
    }
    d.masks.push_back(std::move(m));
    d.probs.push_back(prob);
  }
  return d;
}

double sampler_consistency(std::size_t n, double p, std::size_t k, Rng& rng,
                           const PathSampler& sampler) {
  if (k < 10000) throw std::invalid_argument("sampler_consistency: K must be >= 10^4");
  const PathDistribution d = enumerate_paths(n, p);
  std::vector<std::size_t> counts(d.masks.size(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const PathMask m = sampler(n, p, rng);
    if (m.size() != n) throw std::invalid_argument("sampler_consistency: sampler returned wrong length");
    ++counts[mask_index(m)];
  }
  double worst = 0.0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    const double freq = static_cast<double>(counts[j]) / static_cast<double>(k);
    worst = std::max(worst, std::abs(freq - d.probs[j]));
  }
  return worst;
}

double sampler_bound(std::size_t n, double p, std::size_t k) {
  const PathDistribution d = enumerate_paths(n, p);
  const double q = *std::max_element(d.probs.begin(), d.probs.end());
  return 4.0 * std::sqrt(q * (1.0 - q) / static_cast<double>(k));
}

double integrate_schedule(const ReplacementSchedule& s, std::size_t steps,
                          const ScheduleFn& schedule) {
  if (steps < 1000) throw std::invalid_argument("integrate_schedule: steps must be >= 10^3");
  s.validate();
  const double h = s.m / static_cast<double>(steps);
  double acc = 0.5 * (schedule(s, 0.0) + schedule(s, s.m));
  for (std::size_t i = 1; i < steps; ++i) acc += schedule(s, h * static_cast<double>(i));
  return acc * h / s.m;
}

bool OracleReport::all_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const OracleCheck& c) { return c.pass; });
}

void OracleReport::add(std::string name, bool pass, std::string detail) {
  checks.push_back(OracleCheck{std::move(name), pass, std::move(detail)});
}

void OracleReport::append(const OracleReport& other) {
  checks.insert(checks.end(), other.checks.begin(), other.checks.end());
}

std::string OracleReport::text() const {
  std::string out;
  for (const OracleCheck& c : checks) {
    out += (c.pass ? "PASS " : "FAIL ") + c.name;
    if (!c.detail.empty()) out += ": " + c.detail;
    out += "\n";
  }
  return out;
}

std::string OracleReport::json() const {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const OracleCheck& c : checks) {
    arr.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  }
  nlohmann::ordered_json j;
  j["pass"] = all_pass();
  j["checks"] = arr;
  return j.dump(2);
}

template <typename T>
OracleReport path_equivalence_suite(TrackerModel<T>& teacher, TrackerModel<T>& student,
                                    const StagePlan& plan,
                                    std::vector<ProjectionPair<T>>& projections,
                                    const Tensor<T>& z, const Tensor<T>& x) {
  OracleReport r;
  const std::size_t n = plan.num_stages;
  {
    Graph<T> g(false);
    const ForwardResult<T> ref = forward_full(g, teacher, z, x);
    const CompositeResult<T> c = composite_forward(g, teacher, student, teacher.decoder, plan,
                                                   projections, PathMask::all(n, false), z, x);
    const bool eq = bitwise_equal(g.value(ref.tokens), g.value(c.tokens)) &&
                    bitwise_equal(g.value(ref.prediction.score), g.value(c.prediction.score)) &&
                    bitwise_equal(g.value(ref.prediction.offset_map),
                                  g.value(c.prediction.offset_map));
    r.add("all-zeros mask equals teacher forward", eq);
  }
  {
    bool identity = std::all_of(projections.begin(), projections.end(),
                                [](const ProjectionPair<T>& p) { return p.identity; });
    bool shared_embed = bitwise_equal(teacher.embed.patch.weight, student.embed.patch.weight) &&
                        bitwise_equal(teacher.embed.patch.bias, student.embed.patch.bias) &&
                        bitwise_equal(teacher.embed.pos_z, student.embed.pos_z) &&
                        bitwise_equal(teacher.embed.pos_x, student.embed.pos_x);
    if (!identity || !shared_embed) {
      r.add("all-ones mask equals student forward", false,
            "needs identity projections and the teacher embedding in the student");
    } else {
      Graph<T> g(false);
      const ForwardResult<T> ref = forward_full(g, student, z, x);
      const CompositeResult<T> c = composite_forward(g, teacher, student, student.decoder, plan,
                                                     projections, PathMask::all(n, true), z, x);
      const bool eq = bitwise_equal(g.value(ref.tokens), g.value(c.tokens)) &&
                      bitwise_equal(g.value(ref.prediction.score), g.value(c.prediction.score)) &&
                      bitwise_equal(g.value(ref.prediction.offset_map),
                                    g.value(c.prediction.offset_map));
      r.add("all-ones mask equals student forward", eq);
    }
  }
  auto recomposition = [&](TrackerModel<T>& model, const std::vector<LayerRange>& ranges,
                           const std::string& who) {
    Graph<T> g(false);
    const ForwardResult<T> plain = forward_full(g, model, z, x);
    const ForwardResult<T> staged =
        forward_full(g, model, z, x, std::span<const LayerRange>(ranges));
    bool ok = staged.snapshots.size() == ranges.size();
    Var h = staged.embedded;
    for (std::size_t i = 0; ok && i < ranges.size(); ++i) {
      const Var next = stage_forward(g, model, ranges[i], h);
      ok = bitwise_equal(g.value(next), g.value(staged.snapshots[i]));
      h = staged.snapshots[i];
    }
    ok = ok && bitwise_equal(g.value(h), g.value(staged.tokens)) &&
         bitwise_equal(g.value(plain.tokens), g.value(staged.tokens));
    r.add(who + " stage recomposition", ok);
    const bool neutral =
        bitwise_equal(g.value(plain.prediction.score), g.value(staged.prediction.score)) &&
        bitwise_equal(g.value(plain.prediction.offset_map), g.value(staged.prediction.offset_map)) &&
        plain.prediction.cells == staged.prediction.cells;
    r.add(who + " snapshots leave the prediction unchanged", neutral);
  };
  recomposition(teacher, plan.teacher_ranges, "teacher");
  recomposition(student, plan.student_ranges, "student");
  return r;
}

template OracleReport path_equivalence_suite(TrackerModel<float>&, TrackerModel<float>&,
                                             const StagePlan&,
                                             std::vector<ProjectionPair<float>>&,
                                             const Tensor<float>&, const Tensor<float>&);
template OracleReport path_equivalence_suite(TrackerModel<double>&, TrackerModel<double>&,
                                             const StagePlan&,
                                             std::vector<ProjectionPair<double>>&,
                                             const Tensor<double>&, const Tensor<double>&);

namespace {

enum class Role { kTrainable, kUnused, kFrozen };

struct AuditGroup {
  std::string name;
  Tensor<double>* tensor;
  Role role;
};

GradAudit run_audit(std::vector<AuditGroup>& groups,
                    const std::function<Var(Graph<double>&)>& build, double step) {
  for (AuditGroup& g : groups) {
    g.tensor->enable_grad();
    g.tensor->zero_grad();
    g.tensor->requires_grad = g.role != Role::kFrozen;
  }
  {
    Graph<double> g;
    const Var loss = build(g);
    g.backward(loss);
  }
  GradAudit audit;
  auto eval = [&]() {
    Graph<double> g(false);
    const Var loss = build(g);
    return g.value(loss).data[0];
  };
  for (AuditGroup& grp : groups) {
    Tensor<double>& t = *grp.tensor;
    if (grp.role != Role::kTrainable) {
      ++audit.frozen_checked;
      const bool zero = std::all_of(t.grad.begin(), t.grad.end(), [](double v) { return v == 0.0; });
      if (!zero) audit.nonzero_frozen.push_back(grp.name);
      if (grp.role == Role::kFrozen) continue;
    }
    const std::vector<double> analytic = t.grad;
    const Tensor<double> numeric = finite_difference_grad(eval, t, step);
    GroupError e{grp.name, t.numel(), 0.0, 0.0};
    for (std::size_t i = 0; i < t.numel(); ++i) {
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[i], numeric.data[i]));
      e.max_abs_grad = std::max(e.max_abs_grad, std::abs(analytic[i]));
    }
    audit.max_rel_error = std::max(audit.max_rel_error, e.max_rel_error);
    audit.groups.push_back(e);
  }
  for (AuditGroup& g : groups) g.tensor->requires_grad = false;
  return audit;
}

template <typename Visit>
void collect(std::vector<AuditGroup>& out, const std::string& prefix, Role role, Visit&& visit) {
  visit([&](const std::string& name, Tensor<double>& t) {
    out.push_back(AuditGroup{prefix + name, &t, role});
  });
}

}  // namespace

GradAudit grad_audit_model(TrackerModel<double>& model, const Batch<double>& batch, double step) {
  std::vector<AuditGroup> groups;
  collect(groups, "", Role::kTrainable, [&](auto&& f) { model.visit_parameters(f); });
  return run_audit(
      groups,
      [&](Graph<double>& g) {
        const Prediction<double> p = forward_full(g, model, batch.z, batch.x).prediction;
        return track_loss(g, p, batch.cells, batch.offsets);
      },
      step);
}

GradAudit grad_audit_composite(TrackerModel<double>& teacher, TrackerModel<double>& student,
                               Decoder<double>& decoder, const StagePlan& plan,
                               std::vector<ProjectionPair<double>>& projections,
                               const PathMask& mask, const Batch<double>& batch,
                               const LossWeights& weights, double step) {
  if (mask.size() != plan.num_stages) {
    throw std::invalid_argument("grad_audit_composite: mask/plan mismatch");
  }
  std::vector<AuditGroup> groups;
  collect(groups, "teacher.", Role::kFrozen, [&](auto&& f) { teacher.visit_parameters(f); });
  collect(groups, "student.", Role::kFrozen, [&](auto&& f) { student.embed.visit("embed", f); });
  collect(groups, "student.", Role::kFrozen, [&](auto&& f) { student.decoder.visit("decoder", f); });
  for (std::size_t i = 0; i < plan.num_stages; ++i) {
    const Role role = mask.bits[i] ? Role::kTrainable : Role::kUnused;
    for (std::size_t l = plan.student_ranges[i].begin; l < plan.student_ranges[i].end; ++l) {
      collect(groups, "student.", role, [&](auto&& f) {
        student.blocks[l].visit("blocks." + std::to_string(l), f);
      });
    }
    if (!projections[i].identity) {
      collect(groups, "", role, [&](auto&& f) {
        projections[i].visit("projections." + std::to_string(i), f);
      });
    }
  }
  collect(groups, "", Role::kTrainable, [&](auto&& f) { decoder.visit("decoder", f); });
  return run_audit(
      groups,
      [&](Graph<double>& g) {
        const ForwardResult<double> trace = forward_full(
            g, teacher, batch.z, batch.x, std::span<const LayerRange>(plan.teacher_ranges));
        const CompositeResult<double> c = composite_forward(
            g, teacher, student, decoder, plan, projections, mask, batch.z, batch.x, &trace);
        const Var lt = track_loss(g, c.prediction, batch.cells, batch.offsets);
        const Var lp = prediction_guidance_loss(g, c.prediction, trace.prediction);
        const Var lf = feature_mimic_loss(g, std::span<const Var>(c.snapshots),
                                          std::span<const Var>(trace.snapshots));
        return total_loss(g, weights, lt, lp, lf);
      },
      step);
}

namespace {

/// Literal closed form of the expectation for p_init = 0.5 inputs.
double closed_form_expectation(const ReplacementSchedule& s) {
  return (1.0 + s.p_init) / 2.0 + (1.0 - s.p_init) / 2.0 * (s.alpha2 - s.alpha1);
}

}  // namespace

OracleReport schedule_oracles(const OracleOptions& options) {
  OracleReport r;
  Rng rng(derive_seed(options.seed, {0x7363686564}));
  std::size_t boundary_fail = 0, monotone_fail = 0, continuity_fail = 0, integral_fail = 0;
  double worst_integral = 0.0;
  constexpr std::size_t kSchedules = 100;
  constexpr std::size_t kGrid = 2000;
  for (std::size_t i = 0; i < kSchedules; ++i) {
    ReplacementSchedule s;
    s.p_init = 0.01 + 0.99 * uniform01(rng);
    s.alpha1 = 0.45 * uniform01(rng);
    s.alpha2 = 0.45 * uniform01(rng);
    s.m = 1.0 + std::floor(999.0 * uniform01(rng));
    if (options.schedule(s, 0.0) != s.p_init || options.schedule(s, s.m) != 1.0) ++boundary_fail;
    const double slope = (1.0 - s.p_init) / ((1.0 - s.alpha1 - s.alpha2) * s.m);
    const double dt = s.m / kGrid;
    double prev = options.schedule(s, 0.0);
    bool mono = true, cont = true;
    for (std::size_t k = 1; k <= kGrid; ++k) {
      const double t = k == kGrid ? s.m : dt * static_cast<double>(k);
      const double v = options.schedule(s, t);
      if (v < prev) mono = false;
      if (std::abs(v - prev) > slope * dt * (1.0 + 1e-9) + 1e-12) cont = false;
      prev = v;
    }
    for (double b : {s.alpha1 * s.m, (1.0 - s.alpha2) * s.m}) {
      const double eps = 1e-9 * s.m;
      const double lo = options.schedule(s, std::max(0.0, b - eps));
      const double hi = options.schedule(s, std::min(s.m, b + eps));
      if (std::abs(hi - lo) > slope * 2.0 * eps + 1e-9) cont = false;
    }
    monotone_fail += mono ? 0 : 1;
    continuity_fail += cont ? 0 : 1;
    const double err = std::abs(integrate_schedule(s, 1000000, options.schedule) - expected_p(s));
    worst_integral = std::max(worst_integral, err);
    if (err >= 1e-6) ++integral_fail;
  }
  const std::string of = " of " + std::to_string(kSchedules) + " random schedules";
  r.add("schedule boundary values", boundary_fail == 0, std::to_string(boundary_fail) + " failures" + of);
  r.add("schedule monotone", monotone_fail == 0, std::to_string(monotone_fail) + " failures" + of);
  r.add("schedule continuous", continuity_fail == 0, std::to_string(continuity_fail) + " failures" + of);
  r.add("schedule integral matches expected_p", integral_fail == 0,
        "max error " + fmt(worst_integral) + " (bound 1e-6)");

  double worst_closed = 0.0;
  for (double a1 : {0.0, 0.1, 0.2, 0.3}) {
    for (double a2 : {0.0, 0.1, 0.25, 0.5}) {
      const ReplacementSchedule s{0.5, a1, a2, 500.0};
      const double c = closed_form_expectation(s);
      worst_closed = std::max({worst_closed, std::abs(expected_p(s) - c),
                               std::abs(integrate_schedule(s, 1000000, options.schedule) - c)});
    }
  }
  r.add("closed-form expectation at p_init 0.5", worst_closed < 1e-9,
        "max error " + fmt(worst_closed) + " (bound 1e-9)");

  const ReplacementSchedule ex{0.5, 0.1, 0.1, 500.0};
  const bool points = options.schedule(ex, 25.0) == 0.5 && options.schedule(ex, 475.0) == 1.0 &&
                      std::abs(options.schedule(ex, 250.0) - 0.75) < 1e-12;
  r.add("schedule reference points", points, "t = 25, 250, 475 of m = 500");
  return r;
}

OracleReport sampler_oracles(const OracleOptions& options) {
  OracleReport r;
  double worst_sum = 0.0;
  for (std::size_t n = 1; n <= kMaxEnumeratedStages; ++n) {
    for (double p : {0.1, 0.5, 0.9}) {
      const PathDistribution d = enumerate_paths(n, p);
      double sum = 0.0, comp = 0.0;  // Neumaier
      for (double q : d.probs) {
        const double t = sum + q;
        comp += std::abs(sum) >= std::abs(q) ? (sum - t) + q : (q - t) + sum;
        sum = t;
      }
      sum += comp;
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  r.add("enumerated probabilities sum to one", worst_sum < 1e-12, "max error " + fmt(worst_sum));

  constexpr std::size_t kDraws = 100000;
  for (double p : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    Rng rng(derive_seed(options.seed, {0x73616d70, static_cast<std::uint64_t>(p * 1000)}));
    const double dev = sampler_consistency(4, p, kDraws, rng, options.sampler);
    const double bound = (p == 0.0 || p == 1.0) ? 0.0 : sampler_bound(4, p, kDraws);
    const bool ok = (p == 0.0 || p == 1.0) ? dev == 0.0 : dev < bound;
    std::ostringstream name;
    name << "sampler frequencies N=4 p=" << p;
    r.add(name.str(), ok, "deviation " + fmt(dev) + " (bound " + fmt(bound) + ")");
  }

  for (double p : {0.1, 0.5, 0.9}) {
    Rng rng(derive_seed(options.seed, {0x62697473, static_cast<std::uint64_t>(p * 1000)}));
    constexpr std::size_t n = 4;
    std::vector<double> mean(n, 0.0);
    std::vector<double> co(n * n, 0.0);
    for (std::size_t k = 0; k < kDraws; ++k) {
      const PathMask m = options.sampler(n, p, rng);
      for (std::size_t i = 0; i < n; ++i) {
        mean[i] += m.bits[i];
        for (std::size_t j = 0; j < n; ++j) co[i * n + j] += m.bits[i] * m.bits[j];
      }
    }
    const double K = static_cast<double>(kDraws);
    const double tol = 4.0 * std::sqrt(p * (1.0 - p) / K);
    double worst_mean = 0.0, worst_corr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean[i] /= K;
      worst_mean = std::max(worst_mean, std::abs(mean[i] - p));
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double cov = co[i * n + j] / K - mean[i] * mean[j];
        const double vi = mean[i] * (1.0 - mean[i]), vj = mean[j] * (1.0 - mean[j]);
        const double corr = (vi > 0 && vj > 0) ? cov / std::sqrt(vi * vj) : 0.0;
        worst_corr = std::max(worst_corr, std::abs(corr));
      }
    }
    std::ostringstream name;
    name << "sampler bit means and correlations p=" << p;
    r.add(name.str(), worst_mean < tol && worst_corr < 0.02,
          "mean error " + fmt(worst_mean) + " (bound " + fmt(tol) + "), |corr| " + fmt(worst_corr) +
              " (bound 2e-2)");
  }
  return r;
}

namespace {

template <typename T>
OracleReport equivalence_in(const OracleOptions& options) {
  TrackerConfig tc;
  tc.embed_dim = 8;
  tc.num_layers = 4;
  tc.num_heads = 2;
  tc.mlp_ratio = 2;
  tc.patch_size = 2;
  tc.template_side = 4;
  tc.search_side = 8;
  Rng rng(derive_seed(options.seed, {0x657175}));
  TrackerModel<T> teacher = TrackerModel<T>::init(tc, rng);
  TrackerConfig sc = tc;
  sc.num_layers = 2;
  TrackerModel<T> student = TrackerModel<T>::init(sc, rng);
  student.embed = teacher.embed;
  const StagePlan plan = divide_stages(4, 2, StageMode::kEven);
  auto proj = make_projections<T>(2, 8, 8, rng);

  TaskConfig task = TaskConfig::from(tc, 0.1, 2);
  const auto samples = gen_batch(rng, task, 3);
  const Batch<T> b = collate<T>(samples, task);

  OracleReport r = path_equivalence_suite(teacher, student, plan, proj, b.z, b.x);

  {
    Graph<T> g(false);
    const auto zeros = composite_forward(g, teacher, student, student.decoder, plan, proj,
                                         PathMask::all(2, false), b.z, b.x);
    const auto ones = composite_forward(g, teacher, student, student.decoder, plan, proj,
                                        PathMask::all(2, true), b.z, b.x);
    r.add("random student output differs from teacher path",
          !bitwise_equal(g.value(zeros.prediction.score), g.value(ones.prediction.score)));
  }
  {
    // a student made of teacher copies gives the same output under every mask
    TrackerModel<T> copy = teacher;
    const StagePlan full = divide_stages(4, 4, StageMode::kEven);
    auto id = make_projections<T>(4, 8, 8, rng);
    Graph<T> g(false);
    const auto ref = composite_forward(g, teacher, copy, teacher.decoder, full, id,
                                       PathMask::all(4, false), b.z, b.x);
    bool same = true;
    const PathDistribution d = enumerate_paths(4, 0.5);
    for (const PathMask& m : d.masks) {
      const auto c = composite_forward(g, teacher, copy, teacher.decoder, full, id, m, b.z, b.x);
      same = same && bitwise_equal(g.value(ref.prediction.score), g.value(c.prediction.score));
    }
    r.add("teacher-copy student identical under all 16 masks", same);
  }
  return r;
}

}  // namespace

OracleReport equivalence_oracles(const OracleOptions& options) {
  return options.f64 ? equivalence_in<double>(options) : equivalence_in<float>(options);
}

OracleReport gradient_oracles(const OracleOptions& options) {
  OracleReport r;
  Rng rng(derive_seed(options.seed, {0x67726164}));
  TrackerConfig tc;
  tc.embed_dim = 8;
  tc.num_layers = 2;
  tc.num_heads = 2;
  tc.mlp_ratio = 2;
  tc.patch_size = 2;
  tc.template_side = 4;
  tc.search_side = 8;
  TaskConfig task = TaskConfig::from(tc, 0.1, 2);
  const auto samples = gen_batch(rng, task, 2);
  const Batch<double> b = collate<double>(samples, task);

  {
    TrackerModel<double> m = TrackerModel<double>::init(tc, rng);
    const GradAudit a = grad_audit_model(m, b);
    r.add("gradient audit, 2-layer model", a.max_rel_error < 1e-4,
          "max relative error " + fmt(a.max_rel_error) + " over " +
              std::to_string(a.groups.size()) + " groups (bound 1e-4)");
  }

  TrackerConfig teacher_cfg = tc;
  teacher_cfg.num_layers = 4;
  TrackerModel<double> teacher = TrackerModel<double>::init(teacher_cfg, rng);
  TrackerConfig student_cfg = tc;
  student_cfg.embed_dim = 6;
  student_cfg.num_layers = 2;
  TrackerModel<double> student = TrackerModel<double>::init(student_cfg, rng);
  // A decoder identical to the teacher's puts the offset guidance term exactly on
  // its L1 kink under the all-teacher mask, where central differences are meaningless.
  Decoder<double> decoder = teacher.decoder;
  decoder.visit("decoder", [&](const std::string&, Tensor<double>& t) {
    for (double& v : t.data) v += 0.05 * (2.0 * uniform01(rng) - 1.0);
  });
  const StagePlan plan = divide_stages(4, 2, StageMode::kEven);
  auto proj = make_projections<double>(2, 8, 6, rng);
  for (const PathMask& mask : {PathMask{{1, 0}}, PathMask{{0, 1}}, PathMask{{0, 0}},
                               PathMask{{1, 1}}}) {
    const GradAudit a =
        grad_audit_composite(teacher, student, decoder, plan, proj, mask, b, LossWeights{});
    std::string name = "gradient audit, composite mask [";
    for (std::size_t i = 0; i < mask.size(); ++i) name += (i ? "," : "") + std::to_string(mask.bits[i]);
    name += "]";
    std::string detail = "max relative error " + fmt(a.max_rel_error) + " (bound 1e-4), " +
                         std::to_string(a.frozen_checked) + " frozen or unused groups, " +
                         std::to_string(a.nonzero_frozen.size()) + " with nonzero gradient";
    if (!a.nonzero_frozen.empty()) detail += " (first: " + a.nonzero_frozen.front() + ")";
    r.add(name, a.max_rel_error < 1e-4 && a.nonzero_frozen.empty(), detail);
  }
  return r;
}

OracleReport run_oracle_suite(const OracleOptions& options) {
  OracleReport r;
  r.append(schedule_oracles(options));
  r.append(sampler_oracles(options));
  r.append(equivalence_oracles(options));
  r.append(gradient_oracles(options));
  return r;
}

}  // namespace ctrack
