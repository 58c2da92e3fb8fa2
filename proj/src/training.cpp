#include "ctrack/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "ctrack/optim.hpp"

namespace ctrack {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kMaskStream = 0x6d61736b;
constexpr std::uint64_t kProjStream = 0x70726f6a;
constexpr std::size_t kEvalBatch = 64;

struct StepLosses {
  double track = 0.0;
  double pred = 0.0;
  double feat = 0.0;
  double total = 0.0;
};

double scalar(const Graph<float>& g, Var v) { return static_cast<double>(g.value(v).data[0]); }

/// Shared state of every student regime.
struct StudentSession {
  const RunConfig& cfg;
  std::optional<TrackerModel<float>> teacher;  // private frozen copy
  TrackerModel<float> student;
  StagePlan plan;
  std::vector<ProjectionPair<float>> projections;
  TaskConfig task;
  std::vector<SyntheticSample> eval_set;

  StudentSession(const TrackerModel<float>* t, const RunConfig& c)
      : cfg(c), student(init_student(t, c)), plan(c.plan()), task(c.task()) {
    if (t) {
      teacher = *t;
      teacher->set_requires_grad(false);
    }
    Rng rng(derive_seed(cfg.seed, {kProjStream}));
    projections = make_projections<float>(plan.num_stages, cfg.embed_dim, cfg.embed_dim, rng);
    eval_set = make_eval_set(kEvalSeed, task, cfg.eval_samples);
  }

  /// Marks exactly the listed student parts as trainable.
  void set_trainable(const std::vector<bool>& stages, bool decoder) {
    auto enable = [](const std::string&, Tensor<float>& p) { p.enable_grad(); };
    student.set_requires_grad(false);
    for (std::size_t i = 0; i < plan.num_stages; ++i) {
      if (!stages[i]) continue;
      for (std::size_t l = plan.student_ranges[i].begin; l < plan.student_ranges[i].end; ++l) {
        student.blocks[l].visit("", enable);
      }
      if (!projections[i].identity) {
        projections[i].visit("", enable);
      }
    }
    if (decoder) {
      student.decoder.visit("", enable);
    }
    if (!teacher) {
      // no teacher to borrow the embedding from
      student.embed.visit("", enable);
    }
  }

  void register_trainable(AdamW<float>& opt) {
    auto add = [&](const std::string&, Tensor<float>& p) {
      if (p.requires_grad) opt.add(p);
    };
    student.visit_parameters(add);
    for (std::size_t i = 0; i < projections.size(); ++i) {
      projections[i].visit("", add);
    }
  }

  StepLosses step(const Batch<float>& b, const PathMask& mask, const LossWeights& w) {
    Graph<float> g;
    const bool need_trace = teacher && (w.pred > 0.0 || w.feat > 0.0);
    std::optional<ForwardResult<float>> trace;
    if (need_trace) {
      trace = forward_full(g, *teacher, b.z, b.x,
                           std::span<const LayerRange>(plan.teacher_ranges));
    }
    Prediction<float> pred;
    std::vector<Var> snaps;
    if (teacher) {
      CompositeResult<float> c = composite_forward(g, *teacher, student, student.decoder, plan,
                                                   projections, mask, b.z, b.x,
                                                   trace ? &*trace : nullptr);
      pred = std::move(c.prediction);
      snaps = std::move(c.snapshots);
    } else {
      pred = forward_full(g, student, b.z, b.x).prediction;
    }
    StepLosses out;
    Var l_track = track_loss(g, pred, b.cells, b.offsets);
    std::optional<Var> l_pred, l_feat;
    if (need_trace && w.pred > 0.0) l_pred = prediction_guidance_loss(g, pred, trace->prediction);
    if (need_trace && w.feat > 0.0) {
      l_feat = feature_mimic_loss(g, std::span<const Var>(snaps),
                                  std::span<const Var>(trace->snapshots));
    }
    Var total = total_loss(g, w, l_track, l_pred, l_feat);
    out.track = scalar(g, l_track);
    if (l_pred) out.pred = scalar(g, *l_pred);
    if (l_feat) out.feat = scalar(g, *l_feat);
    out.total = scalar(g, total);
    g.backward(total);
    return out;
  }
};

double lr_at(const RunConfig& cfg, std::size_t epoch) {
  return epoch >= cfg.lr_decay_epoch ? cfg.lr * 0.1 : cfg.lr;
}

AdamWOptions adam_options(const RunConfig& cfg) {
  AdamWOptions o;
  o.lr = cfg.lr;
  o.weight_decay = cfg.weight_decay;
  return o;
}

using StepFn = std::function<StepLosses(const Batch<float>&, std::size_t epoch, std::size_t iter)>;

/// Runs epochs [first, first + count), appending one metrics row per epoch.
void train_epochs(const RunConfig& cfg, std::size_t first, std::size_t count,
                  TrackerModel<float>& eval_model, const std::vector<SyntheticSample>& eval_set,
                  AdamW<float>& opt, const std::function<double(std::size_t)>& p_of_epoch,
                  const StepFn& step, const RunOptions& options, RunResult& result,
                  std::chrono::steady_clock::time_point start) {
  const TaskConfig task = cfg.task();
  for (std::size_t epoch = first; epoch < first + count; ++epoch) {
    opt.set_lr(lr_at(cfg, epoch));
    StepLosses sum;
    for (std::size_t it = 0; it < cfg.iters_per_epoch; ++it) {
      const auto samples = gen_batch(cfg.seed, epoch, it, task, cfg.batch);
      const Batch<float> b = collate<float>(samples, task);
      opt.zero_grad();
      StepLosses l;
      try {
        l = step(b, epoch, it);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(it) + ": " + e.what());
      }
      opt.step();
      sum.track += l.track;
      sum.pred += l.pred;
      sum.feat += l.feat;
      sum.total += l.total;
    }
    const double n = static_cast<double>(cfg.iters_per_epoch);
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.p = p_of_epoch(epoch);
    rec.l_track = sum.track / n;
    rec.l_pred = sum.pred / n;
    rec.l_feat = sum.feat / n;
    rec.l_total = sum.total / n;
    const EvalMetrics em = evaluate(eval_model, eval_set, task, false);
    rec.eval_accuracy = em.accuracy;
    rec.eval_offset_error = em.offset_error;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(rec);
    if (options.sink) options.sink(rec);
    if (options.on_epoch_end) options.on_epoch_end(epoch, eval_model);
  }
}

PathMask draw_mask(const RunConfig& cfg, std::size_t n, double p, std::size_t epoch,
                   std::size_t iter) {
  Rng rng(derive_seed(cfg.seed, {kMaskStream, epoch, iter}));
  return sample_path(n, p, rng);
}

RunResult finish(RunResult r, const std::vector<SyntheticSample>& eval_set, const RunConfig& cfg) {
  r.final_eval = evaluate(r.model, eval_set, cfg.task(), false);
  return r;
}

}  // namespace

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::kTeacher: return "teacher";
    case Regime::kCompress: return "compress";
    case Regime::kNaive: return "naive";
    case Regime::kDistill: return "distill";
    case Regime::kDecoupled: return "decoupled";
  }
  return "?";
}

std::string init_policy_name(InitPolicy p) {
  switch (p) {
    case InitPolicy::kSkip: return "skip";
    case InitPolicy::kFirstK: return "first-k";
    case InitPolicy::kRandom: return "random";
  }
  return "?";
}

std::string decoder_init_name(DecoderInit d) {
  return d == DecoderInit::kTeacher ? "teacher" : "random";
}

TrackerConfig RunConfig::teacher_config() const {
  TrackerConfig c;
  c.embed_dim = embed_dim;
  c.num_layers = teacher_layers;
  c.num_heads = heads;
  c.mlp_ratio = mlp_ratio;
  c.patch_size = patch;
  c.template_side = template_side;
  c.search_side = search_side;
  return c;
}

TrackerConfig RunConfig::student_config() const {
  TrackerConfig c = teacher_config();
  c.num_layers = student_layers;
  return c;
}

TaskConfig RunConfig::task() const { return TaskConfig::from(teacher_config(), noise, distractors); }

ReplacementSchedule RunConfig::schedule() const {
  return ReplacementSchedule{p_init, alpha1, alpha2, static_cast<double>(epochs)};
}

StagePlan RunConfig::plan() const {
  return divide_stages(teacher_layers, student_layers, stage_mode, uneven_sizes);
}

void RunConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string(name) + ": must be >= 1");
  };
  positive(iters_per_epoch, "iters_per_epoch");
  positive(batch, "batch");
  positive(teacher_layers, "teacher_layers");
  positive(student_layers, "student_layers");
  positive(embed_dim, "embed_dim");
  positive(heads, "heads");
  positive(mlp_ratio, "mlp_ratio");
  positive(patch, "patch");
  positive(eval_samples, "eval_samples");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr: must be > 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("weight_decay: must be >= 0");
  }
  if (finetune_epochs > epochs) {
    throw std::invalid_argument("finetune_epochs: must not exceed epochs");
  }
  weights.validate();
  ReplacementSchedule s = schedule();
  s.m = std::max<double>(1.0, s.m);
  s.validate();
  teacher_config().validate();
  if (student_layers > teacher_layers) {
    throw std::invalid_argument("student_layers: must not exceed teacher_layers");
  }
  try {
    (void)plan();
  } catch (const std::invalid_argument& e) {
    const char* field = stage_mode == StageMode::kUneven ? "uneven_sizes: " : "student_layers: ";
    throw std::invalid_argument(field + std::string(e.what()));
  }
  task().validate();
}

std::vector<double> hanning_window(std::size_t grid_side) {
  // Periodic-free Hann of length G + 2 with the zero endpoints dropped.
  std::vector<double> w1(grid_side);
  const double denom = static_cast<double>(grid_side + 1);
  for (std::size_t i = 0; i < (grid_side + 1) / 2; ++i) {
    const double v = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i + 1) / denom);
    w1[i] = v;
    w1[grid_side - 1 - i] = v;
  }
  std::vector<double> w(grid_side * grid_side);
  for (std::size_t r = 0; r < grid_side; ++r) {
    for (std::size_t c = 0; c < grid_side; ++c) w[r * grid_side + c] = w1[r] * w1[c];
  }
  return w;
}

EvalMetrics score_predictions(std::span<const std::size_t> cells,
                              std::span<const std::array<double, 2>> offsets,
                              std::span<const SyntheticSample> samples, std::size_t grid_side) {
  if (cells.size() != samples.size() || offsets.size() != samples.size()) {
    throw std::invalid_argument("score_predictions: size mismatch");
  }
  EvalMetrics m;
  if (samples.empty()) return m;
  double hits = 0.0, err = 0.0, iou = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SyntheticSample& s = samples[i];
    const double px = static_cast<double>(cells[i] % grid_side) + offsets[i][0];
    const double py = static_cast<double>(cells[i] / grid_side) + offsets[i][1];
    const double gx = static_cast<double>(s.gt_cell % grid_side) + s.gt_offset[0];
    const double gy = static_cast<double>(s.gt_cell / grid_side) + s.gt_offset[1];
    hits += cells[i] == s.gt_cell ? 1.0 : 0.0;
    err += std::hypot(px - gx, py - gy);
    const double ox = std::max(0.0, 1.0 - std::abs(px - gx));
    const double oy = std::max(0.0, 1.0 - std::abs(py - gy));
    const double inter = ox * oy;
    iou += inter / (2.0 - inter);
  }
  const double n = static_cast<double>(samples.size());
  m.accuracy = hits / n;
  m.offset_error = err / n;
  m.mean_iou = iou / n;
  return m;
}

template <typename T>
EvalMetrics evaluate(TrackerModel<T>& model, std::span<const SyntheticSample> samples,
                     const TaskConfig& task, bool use_hanning) {
  const std::size_t G = task.grid_side();
  const std::size_t cells_n = task.num_cells();
  const std::vector<double> window = use_hanning ? hanning_window(G) : std::vector<double>{};
  std::vector<std::size_t> cells;
  std::vector<std::array<double, 2>> offsets;
  cells.reserve(samples.size());
  offsets.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, samples.size() - start);
    const Batch<T> b = collate<T>(samples.subspan(start, count), task);
    Graph<T> g(false);
    const Prediction<T> p = forward_full(g, model, b.z, b.x).prediction;
    if (!use_hanning) {
      for (std::size_t i = 0; i < count; ++i) {
        cells.push_back(p.cells[i]);
        offsets.push_back({static_cast<double>(p.offset.data[2 * i]),
                           static_cast<double>(p.offset.data[2 * i + 1])});
      }
      continue;
    }
    const Tensor<T> prob = softmax_rows(g.value(p.score));
    const Tensor<T>& omap = g.value(p.offset_map);
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t best = 0;
      double best_v = -1.0;
      for (std::size_t c = 0; c < cells_n; ++c) {
        const double v = static_cast<double>(prob.data[i * cells_n + c]) * window[c];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      cells.push_back(best);
      offsets.push_back({static_cast<double>(omap.data[(i * cells_n + best) * 2]),
                         static_cast<double>(omap.data[(i * cells_n + best) * 2 + 1])});
    }
  }
  return score_predictions(cells, offsets, samples, G);
}

template EvalMetrics evaluate(TrackerModel<float>&, std::span<const SyntheticSample>,
                              const TaskConfig&, bool);
template EvalMetrics evaluate(TrackerModel<double>&, std::span<const SyntheticSample>,
                              const TaskConfig&, bool);

TrackerModel<float> init_student(const TrackerModel<float>* teacher, const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, {kInitStream}));
  TrackerModel<float> s = TrackerModel<float>::init(cfg.student_config(), rng);
  if (!teacher) {
    if (cfg.init_policy != InitPolicy::kRandom || cfg.decoder_init != DecoderInit::kRandom) {
      throw std::invalid_argument(
          "init_policy: initializing the student from a teacher needs a teacher checkpoint");
    }
    return s;
  }
  if (teacher->config != cfg.teacher_config()) {
    throw std::invalid_argument("teacher checkpoint architecture does not match the config");
  }
  s.embed = teacher->embed;
  const StagePlan plan = cfg.plan();
  for (std::size_t i = 0; i < plan.num_stages; ++i) {
    const LayerRange sr = plan.student_ranges[i];
    const LayerRange tr = plan.teacher_ranges[i];
    for (std::size_t l = sr.begin; l < sr.end; ++l) {
      const std::size_t k = l - sr.begin;
      switch (cfg.init_policy) {
        case InitPolicy::kSkip:
          // last layers of the teacher stage
          s.blocks[l] = teacher->blocks[tr.end - sr.size() + k];
          break;
        case InitPolicy::kFirstK:
          s.blocks[l] = teacher->blocks[l];
          break;
        case InitPolicy::kRandom:
          break;
      }
    }
  }
  if (cfg.decoder_init == DecoderInit::kTeacher) s.decoder = teacher->decoder;
  s.set_requires_grad(false);
  return s;
}

RunResult train_teacher(const RunConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  Rng rng(derive_seed(cfg.seed, {kInitStream}));
  RunResult r{TrackerModel<float>::init(cfg.teacher_config(), rng), {}, {}};
  r.model.set_requires_grad(true);
  AdamW<float> opt(adam_options(cfg));
  r.model.visit_parameters([&](const std::string&, Tensor<float>& p) { opt.add(p); });
  const TaskConfig task = cfg.task();
  const auto eval_set = make_eval_set(kEvalSeed, task, cfg.eval_samples);
  const LossWeights w{cfg.weights.track, 0.0, 0.0};
  StepFn step = [&](const Batch<float>& b, std::size_t, std::size_t) {
    Graph<float> g;
    const Prediction<float> p = forward_full(g, r.model, b.z, b.x).prediction;
    Var l = track_loss(g, p, b.cells, b.offsets);
    Var total = total_loss(g, w, l, std::nullopt, std::nullopt);
    StepLosses out;
    out.track = scalar(g, l);
    out.total = scalar(g, total);
    g.backward(total);
    return out;
  };
  train_epochs(cfg, 0, cfg.epochs, r.model, eval_set, opt, [](std::size_t) { return 0.0; }, step,
               options, r, start);
  r.model.set_requires_grad(false);
  return finish(std::move(r), eval_set, cfg);
}

namespace {

RunResult run_student(const TrackerModel<float>* teacher, const RunConfig& cfg, Regime mode,
                      std::optional<double> fixed_p, const RunOptions& options) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  StudentSession s(teacher, cfg);
  const std::size_t N = s.plan.num_stages;
  RunResult r{TrackerModel<float>{}, {}, {}};
  const std::vector<bool> all_stages(N, true);

  auto run_phase = [&](std::size_t first, std::size_t count, const std::vector<bool>& stages,
                       const std::function<double(std::size_t)>& p_of,
                       const std::function<PathMask(std::size_t, std::size_t)>& mask_of,
                       const LossWeights& w) {
    s.set_trainable(stages, cfg.decoder_trainable);
    AdamW<float> opt(adam_options(cfg));
    s.register_trainable(opt);
    StepFn step = [&](const Batch<float>& b, std::size_t epoch, std::size_t it) {
      return s.step(b, mask_of(epoch, it), w);
    };
    train_epochs(cfg, first, count, s.student, s.eval_set, opt, p_of, step, options, r, start);
  };
  auto sampled = [&](const std::function<double(std::size_t)>& p_of) {
    return [&, p_of](std::size_t epoch, std::size_t it) {
      return draw_mask(cfg, N, p_of(epoch), epoch, it);
    };
  };
  auto ones = [&](std::size_t, std::size_t) { return PathMask::all(N, true); };
  auto one = [](std::size_t) { return 1.0; };

  switch (mode) {
    case Regime::kCompress: {
      if (!teacher) throw std::invalid_argument("compress: teacher checkpoint required");
      if (fixed_p) {
        const double p = *fixed_p;
        const std::size_t fixed = cfg.epochs - cfg.finetune_epochs;
        auto p_of = [p, fixed](std::size_t e) { return e < fixed ? p : 1.0; };
        run_phase(0, cfg.epochs, all_stages, p_of, sampled(p_of), cfg.weights);
      } else {
        const ReplacementSchedule sched = cfg.schedule();
        auto p_of = [sched](std::size_t e) { return schedule_p(sched, static_cast<double>(e)); };
        run_phase(0, cfg.epochs, all_stages, p_of, sampled(p_of), cfg.weights);
      }
      break;
    }
    case Regime::kNaive: {
      const LossWeights w{cfg.weights.track, 0.0, 0.0};
      run_phase(0, cfg.epochs, all_stages, one, ones, w);
      break;
    }
    case Regime::kDistill: {
      if (!teacher) throw std::invalid_argument("distill: teacher checkpoint required");
      run_phase(0, cfg.epochs, all_stages, one, ones, cfg.weights);
      break;
    }
    case Regime::kDecoupled: {
      if (!teacher) throw std::invalid_argument("decoupled: teacher checkpoint required");
      const std::size_t staged = cfg.epochs - cfg.finetune_epochs;
      if (staged < N) {
        throw std::invalid_argument(
            "epochs: decoupled training needs at least one epoch per stage before the finetune");
      }
      std::size_t epoch = 0;
      const double share = 1.0 / static_cast<double>(N);
      for (std::size_t k = 0; k < N; ++k) {
        const std::size_t len = staged / N + (k < staged % N ? 1 : 0);
        std::vector<bool> only(N, false);
        only[k] = true;
        run_phase(epoch, len, only, [share](std::size_t) { return share; },
                  [N, k](std::size_t, std::size_t) { return PathMask::single(N, k); },
                  cfg.weights);
        epoch += len;
      }
      run_phase(epoch, cfg.finetune_epochs, all_stages, one, ones, cfg.weights);
      break;
    }
    case Regime::kTeacher:
      throw std::invalid_argument("regime teacher is not a student regime");
  }
  s.student.set_requires_grad(false);
  r.model = std::move(s.student);
  return finish(std::move(r), s.eval_set, cfg);
}

}  // namespace

RunResult compress(const TrackerModel<float>& teacher, const RunConfig& cfg,
                   const RunOptions& options) {
  return run_student(&teacher, cfg, Regime::kCompress, options.fixed_p, options);
}

RunResult train_baseline(const TrackerModel<float>* teacher, const RunConfig& cfg, Regime mode,
                         const RunOptions& options) {
  if (mode != Regime::kNaive && mode != Regime::kDistill && mode != Regime::kDecoupled) {
    throw std::invalid_argument("baseline mode must be naive, distill or decoupled");
  }
  return run_student(teacher, cfg, mode, std::nullopt, options);
}

RunResult sweep_run(const TrackerModel<float>& teacher, const RunConfig& cfg, double p,
                    const RunOptions& options) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("sweep: p must lie in [0, 1]");
  return run_student(&teacher, cfg, Regime::kCompress, p, options);
}

}  // namespace ctrack
