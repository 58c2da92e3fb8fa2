#include "ctrack/compression.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ctrack {

StagePlan divide_stages(std::size_t teacher_layers, std::size_t student_layers, StageMode mode,
                        std::span<const std::size_t> uneven_sizes) {
  if (teacher_layers == 0 || student_layers == 0) {
    throw std::invalid_argument("divide_stages: layer counts must be positive");
  }
  if (student_layers > teacher_layers) {
    throw std::invalid_argument("divide_stages: student has more layers (" +
                                std::to_string(student_layers) + ") than teacher (" +
                                std::to_string(teacher_layers) + ")");
  }
  std::vector<std::size_t> sizes;
  if (mode == StageMode::kEven) {
    if (teacher_layers % student_layers != 0) {
      throw std::invalid_argument("divide_stages: " + std::to_string(teacher_layers) +
                                  " teacher layers cannot be split evenly into " +
                                  std::to_string(student_layers) + " stages");
    }
    sizes.assign(student_layers, teacher_layers / student_layers);
  } else {
    if (uneven_sizes.size() != student_layers) {
      throw std::invalid_argument("divide_stages: " + std::to_string(uneven_sizes.size()) +
                                  " stage sizes given for " + std::to_string(student_layers) +
                                  " stages");
    }
    const std::size_t total =
        std::accumulate(uneven_sizes.begin(), uneven_sizes.end(), std::size_t{0});
    if (total != teacher_layers) {
      throw std::invalid_argument("divide_stages: stage sizes sum to " + std::to_string(total) +
                                  ", teacher has " + std::to_string(teacher_layers) + " layers");
    }
    for (std::size_t s : uneven_sizes) {
      if (s == 0) throw std::invalid_argument("divide_stages: empty teacher stage");
    }
    sizes.assign(uneven_sizes.begin(), uneven_sizes.end());
  }
  StagePlan plan;
  plan.num_stages = student_layers;
  plan.mode = mode;
  std::size_t next = 0;
  for (std::size_t i = 0; i < student_layers; ++i) {
    plan.teacher_ranges.push_back({next, next + sizes[i]});
    plan.student_ranges.push_back({i, i + 1});
    next += sizes[i];
  }
  return plan;
}

void ReplacementSchedule::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("schedule: " + what); };
  if (!(p_init > 0.0 && p_init <= 1.0)) fail("p_init must lie in (0, 1]");
  if (!(alpha1 >= 0.0)) fail("alpha1 must be >= 0");
  if (!(alpha2 >= 0.0)) fail("alpha2 must be >= 0");
  if (!(alpha1 + alpha2 < 1.0)) fail("alpha1 + alpha2 must be < 1");
  if (!(m >= 1.0) || !std::isfinite(m)) fail("m must be >= 1");
}

double schedule_p(const ReplacementSchedule& s, double t) {
  if (!(t >= 0.0 && t <= s.m)) {
    throw std::out_of_range("schedule_p: epoch " + std::to_string(t) + " outside [0, " +
                            std::to_string(s.m) + "]");
  }
  const double ramp_begin = s.alpha1 * s.m;
  const double ramp_end = (1.0 - s.alpha2) * s.m;
  if (t < ramp_begin) return s.p_init;
  if (t <= ramp_end) {
    return s.p_init + (1.0 - s.p_init) * (t - ramp_begin) / (ramp_end - ramp_begin);
  }
  return 1.0;
}

double expected_p(const ReplacementSchedule& s) {
  return (1.0 + s.p_init) / 2.0 + (1.0 - s.p_init) / 2.0 * (s.alpha2 - s.alpha1);
}

PathMask PathMask::all(std::size_t n, bool student) {
  return PathMask{std::vector<std::uint8_t>(n, student ? 1 : 0)};
}

PathMask PathMask::single(std::size_t n, std::size_t student_stage) {
  PathMask m = all(n, false);
  m.bits.at(student_stage) = 1;
  return m;
}

std::size_t PathMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

PathMask sample_path(std::size_t n, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument("sample_path: probability " + std::to_string(p) +
                                " outside [0, 1]");
  }
  PathMask m;
  m.bits.resize(n);
  for (auto& b : m.bits) b = uniform01(rng) < p ? 1 : 0;
  return m;
}

template <typename T>
std::vector<ProjectionPair<T>> make_projections(std::size_t num_stages, std::size_t teacher_dim,
                                                std::size_t student_dim, Rng& rng) {
  std::vector<ProjectionPair<T>> out(num_stages);
  for (auto& pair : out) {
    if (teacher_dim == student_dim) {
      pair.in_proj = Linear<T>::identity(teacher_dim);
      pair.out_proj = Linear<T>::identity(teacher_dim);
      pair.identity = true;
      continue;
    }
    auto random_map = [&rng](std::size_t in, std::size_t out_dim) {
      Linear<T> l = Linear<T>::zeros(in, out_dim);
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      for (auto& w : l.weight.data) w = static_cast<T>(dist(rng));
      return l;
    };
    pair.in_proj = random_map(teacher_dim, student_dim);
    pair.out_proj = random_map(student_dim, teacher_dim);
  }
  return out;
}

template <typename T>
CompositeResult<T> composite_forward(Graph<T>& g, TrackerModel<T>& teacher,
                                     TrackerModel<T>& student, Decoder<T>& decoder,
                                     const StagePlan& plan,
                                     std::vector<ProjectionPair<T>>& projections,
                                     const PathMask& mask, const Tensor<T>& z, const Tensor<T>& x,
                                     const ForwardResult<T>* teacher_trace) {
  const std::size_t n = plan.num_stages;
  if (mask.size() != n) {
    throw std::invalid_argument("composite_forward: mask of length " + std::to_string(mask.size()) +
                                " for a plan of " + std::to_string(n) + " stages");
  }
  if (plan.teacher_layers() != teacher.blocks.size() ||
      plan.student_layers() != student.blocks.size()) {
    throw std::invalid_argument("composite_forward: plan covers " +
                                std::to_string(plan.teacher_layers()) + "/" +
                                std::to_string(plan.student_layers()) +
                                " layers, models have " + std::to_string(teacher.blocks.size()) +
                                "/" + std::to_string(student.blocks.size()));
  }
  if (projections.size() != n) {
    throw std::invalid_argument("composite_forward: expected one projection pair per stage");
  }
  std::size_t first_student = 0;
  while (first_student < n && !mask.bits[first_student]) ++first_student;

  CompositeResult<T> r;
  Var h;
  if (teacher_trace) {
    if (teacher_trace->snapshots.size() != n) {
      throw std::invalid_argument("composite_forward: teacher trace has " +
                                  std::to_string(teacher_trace->snapshots.size()) +
                                  " snapshots for " + std::to_string(n) + " stages");
    }
    h = first_student == 0 ? teacher_trace->embedded : teacher_trace->snapshots[first_student - 1];
    r.snapshots.assign(teacher_trace->snapshots.begin(),
                       teacher_trace->snapshots.begin() + static_cast<std::ptrdiff_t>(first_student));
  } else {
    h = embed_pair(g, teacher, z, x);
    first_student = 0;
  }
  const std::size_t teacher_dim = teacher.config.embed_dim;
  const std::size_t student_dim = student.config.embed_dim;
  for (std::size_t i = first_student; i < n; ++i) {
    if (mask.bits[i]) {
      ProjectionPair<T>& pp = projections[i];
      if (pp.identity) {
        if (teacher_dim != student_dim) {
          throw ShapeError("composite_forward", Shape{teacher_dim}, Shape{student_dim});
        }
        h = stage_forward(g, student, plan.student_ranges[i], h);
      } else {
        h = linear(g, h, pp.in_proj);
        h = stage_forward(g, student, plan.student_ranges[i], h);
        h = linear(g, h, pp.out_proj);
      }
    } else {
      h = stage_forward(g, teacher, plan.teacher_ranges[i], h);
    }
    r.snapshots.push_back(h);
  }
  r.tokens = h;
  r.prediction = decode(g, decoder, teacher.config, h);
  return r;
}

void LossWeights::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::invalid_argument(std::string("loss weights: ") + name +
                                  " must be finite and >= 0");
    }
  };
  check(track, "lambda_track");
  check(pred, "lambda_pred");
  check(feat, "lambda_feat");
}

template <typename T>
Var track_loss(Graph<T>& g, const Prediction<T>& pred, std::span<const std::size_t> gt_cells,
               const Tensor<T>& gt_offsets) {
  const Shape& s = g.shape(pred.score);
  const std::size_t batch = s[0], cells = s[1];
  if (gt_cells.size() != batch || gt_offsets.shape != Shape{batch, 2}) {
    throw ShapeError("track_loss", s, gt_offsets.shape);
  }
  for (std::size_t c : gt_cells) {
    if (c >= cells) {
      throw std::invalid_argument("track_loss: ground-truth cell " + std::to_string(c) +
                                  " outside grid of " + std::to_string(cells));
    }
  }
  Var ce = cross_entropy_with_logits(g, pred.score, gt_cells);
  Var off = gather_cells(g, pred.offset_map, gt_cells);
  return add(g, ce, l1(g, off, g.constant(gt_offsets)));
}

template <typename T>
Var prediction_guidance_loss(Graph<T>& g, const Prediction<T>& student,
                             const Prediction<T>& teacher) {
  const Tensor<T>& ts = g.value(teacher.score);
  if (g.shape(student.score) != ts.shape) {
    throw ShapeError("prediction_guidance_loss", g.shape(student.score), ts.shape);
  }
  Var ce = cross_entropy_with_logits(g, student.score, softmax_rows(ts));
  Var off = gather_cells(g, student.offset_map, std::span<const std::size_t>(teacher.cells));
  return add(g, ce, l1(g, off, g.constant(teacher.offset)));
}

template <typename T>
Var feature_mimic_loss(Graph<T>& g, std::span<const Var> student_snaps,
                       std::span<const Var> teacher_snaps) {
  if (student_snaps.size() != teacher_snaps.size() || student_snaps.empty()) {
    throw std::invalid_argument("feature_mimic_loss: " + std::to_string(student_snaps.size()) +
                                " student vs " + std::to_string(teacher_snaps.size()) +
                                " teacher snapshots");
  }
  Var acc;
  for (std::size_t i = 0; i < student_snaps.size(); ++i) {
    Var d = sub(g, student_snaps[i], teacher_snaps[i]);
    const double inv = 1.0 / static_cast<double>(g.value(d).numel());
    Var term = scale(g, sum_squares(g, d), inv);
    acc = acc.valid() ? add(g, acc, term) : term;
  }
  return scale(g, acc, 1.0 / static_cast<double>(student_snaps.size()));
}

template <typename T>
Var total_loss(Graph<T>& g, const LossWeights& w, Var l_track, std::optional<Var> l_pred,
               std::optional<Var> l_feat) {
  auto finite = [&](Var v, const char* name) {
    const T value = g.value(v).data.at(0);
    if (!std::isfinite(value)) {
      throw NumericError(std::string("total_loss: non-finite ") + name + " component");
    }
  };
  finite(l_track, "L_track");
  Var total = scale(g, l_track, w.track);
  if (l_pred) {
    finite(*l_pred, "L_pred");
    total = add(g, total, scale(g, *l_pred, w.pred));
  }
  if (l_feat) {
    finite(*l_feat, "L_feat");
    total = add(g, total, scale(g, *l_feat, w.feat));
  }
  return total;
}

double total_loss(const LossWeights& w, double l_track, double l_pred, double l_feat) {
  if (std::isnan(l_track) || std::isnan(l_pred) || std::isnan(l_feat)) {
    throw NumericError("total_loss: NaN component");
  }
  return w.track * l_track + w.pred * l_pred + w.feat * l_feat;
}

#define CTRACK_INSTANTIATE(T)                                                                    \
  template std::vector<ProjectionPair<T>> make_projections<T>(std::size_t, std::size_t,          \
                                                              std::size_t, Rng&);                \
  template CompositeResult<T> composite_forward(                                                 \
      Graph<T>&, TrackerModel<T>&, TrackerModel<T>&, Decoder<T>&, const StagePlan&,              \
      std::vector<ProjectionPair<T>>&, const PathMask&, const Tensor<T>&, const Tensor<T>&,      \
      const ForwardResult<T>*);                                                                  \
  template Var track_loss(Graph<T>&, const Prediction<T>&, std::span<const std::size_t>,         \
                          const Tensor<T>&);                                                     \
  template Var prediction_guidance_loss(Graph<T>&, const Prediction<T>&, const Prediction<T>&);  \
  template Var feature_mimic_loss(Graph<T>&, std::span<const Var>, std::span<const Var>);        \
  template Var total_loss(Graph<T>&, const LossWeights&, Var, std::optional<Var>,                \
                          std::optional<Var>);

CTRACK_INSTANTIATE(float)
CTRACK_INSTANTIATE(double)

#undef CTRACK_INSTANTIATE

}  // namespace ctrack
