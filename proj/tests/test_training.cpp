#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ctrack/optim.hpp"
#include "ctrack/training.hpp"

using namespace ctrack;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.seed = 3;
  c.epochs = 3;
  c.iters_per_epoch = 3;
  c.batch = 4;
  c.lr = 1e-3;
  c.lr_decay_epoch = 100;
  c.teacher_layers = 4;
  c.student_layers = 2;
  c.embed_dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.patch = 2;
  c.template_side = 4;
  c.search_side = 8;
  c.eval_samples = 16;
  c.finetune_epochs = 1;
  return c;
}

std::uint64_t block_checksum(const EncoderBlock<float>& b) {
  std::uint64_t h = 0;
  const_cast<EncoderBlock<float>&>(b).visit("", [&](const std::string&, Tensor<float>& t) {
    h = h * 1000003u ^ checksum(t);
  });
  return h;
}

const TrackerModel<float>& tiny_teacher() {
  static const TrackerModel<float> t = [] {
    RunConfig c = tiny_run();
    c.finetune_epochs = 0;
    c.epochs = 1;
    return train_teacher(c).model;
  }();
  return t;
}

}  // namespace

TEST(Data, DeterministicPerAddress) {
  const TaskConfig task = tiny_run().task();
  const auto a = gen_batch(7, 2, 5, task, 3);
  const auto b = gen_batch(7, 2, 5, task, 3);
  const auto c = gen_batch(7, 2, 6, task, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].search, b[i].search);
    EXPECT_EQ(a[i].gt_cell, b[i].gt_cell);
  }
  EXPECT_NE(a[0].search, c[0].search);
  EXPECT_NE(make_eval_set(7, task, 1)[0].search, a[0].search);
}

TEST(Data, NoiselessTargetIsPastedVerbatim) {
  TaskConfig task;
  task.template_side = 16;
  task.search_side = 32;
  task.patch_size = 4;
  task.noise = 0.0;
  Rng rng(11);
  for (const SyntheticSample& s : gen_batch(rng, task, 50)) {
    const std::size_t side = task.object_side(), P = task.patch_size, G = task.grid_side();
    const std::size_t t0 = (task.template_side - side) / 2;
    const auto dx = static_cast<std::size_t>(std::lround(s.gt_offset[0] * P - 0.5 * side));
    const auto dy = static_cast<std::size_t>(std::lround(s.gt_offset[1] * P - 0.5 * side));
    const std::size_t top = (s.gt_cell / G) * P + dy, left = (s.gt_cell % G) * P + dx;
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        EXPECT_EQ(s.search[(top + r) * task.search_side + left + c],
                  s.template_image[(t0 + r) * task.template_side + t0 + c]);
      }
    }
    EXPECT_GE(s.gt_offset[0], 0.0);
    EXPECT_LT(s.gt_offset[0], 1.0);
  }
}

TEST(Data, TargetCellIsUniform) {
  const TaskConfig task = tiny_run().task();
  const std::size_t G2 = task.num_cells();
  constexpr std::size_t K = 10000;
  std::vector<double> counts(G2, 0.0);
  Rng rng(5);
  for (const SyntheticSample& s : gen_batch(rng, task, K)) counts[s.gt_cell] += 1.0;
  const double expect = static_cast<double>(K) / G2;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // 16 cells, 15 degrees of freedom, 0.999 quantile
  ASSERT_EQ(G2, 16u);
  EXPECT_LT(chi2, 37.7);
}

TEST(Data, Errors) {
  TaskConfig task = tiny_run().task();
  Rng rng(1);
  EXPECT_THROW(gen_batch(rng, task, 0), std::invalid_argument);
  task.distractors = 16;
  EXPECT_THROW(gen_batch(rng, task, 1), std::invalid_argument);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Tensor<double> p(Shape{1}, {1.0});
  AdamW<double> opt(AdamWOptions{0.1, 0.0});
  opt.add(p);
  p.grad[0] = 1.0;
  opt.step();
  EXPECT_NEAR(p.data[0], 0.9, 1e-7);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoop) {
  Tensor<double> p(Shape{3}, {1.0, -2.0, 0.5});
  AdamW<double> opt(AdamWOptions{0.1, 0.0});
  opt.add(p);
  for (int i = 0; i < 3; ++i) opt.step();
  EXPECT_EQ(p.data, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, ThreeStepsMatchHandComputation) {
  const double lr = 0.05, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double grads[3] = {0.5, -1.5, 2.0};
  double theta = 0.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    theta *= 1.0 - lr * wd;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    theta -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  Tensor<double> p(Shape{1}, {0.7});
  AdamW<double> opt(AdamWOptions{lr, wd, b1, b2, eps});
  opt.add(p);
  for (double g : grads) {
    opt.zero_grad();
    p.grad[0] = g;
    opt.step();
  }
  EXPECT_NEAR(p.data[0], theta, 1e-12);
  EXPECT_EQ(opt.step_count(), 3);
}

TEST(AdamW, GradientShapeMismatchIsError) {
  Tensor<double> p(Shape{2});
  AdamW<double> opt(AdamWOptions{});
  opt.add(p);
  p.grad.resize(3);
  EXPECT_THROW(opt.step(), ShapeError);
}

TEST(Hanning, SymmetricPositiveAndPeakedAtCentre) {
  for (std::size_t G : {1u, 4u, 5u, 8u}) {
    const auto w = hanning_window(G);
    ASSERT_EQ(w.size(), G * G);
    for (std::size_t r = 0; r < G; ++r) {
      for (std::size_t c = 0; c < G; ++c) {
        EXPECT_GT(w[r * G + c], 0.0);
        EXPECT_EQ(w[r * G + c], w[c * G + r]);
        EXPECT_EQ(w[r * G + c], w[(G - 1 - r) * G + (G - 1 - c)]);
      }
    }
    const std::size_t mid = (G - 1) / 2;
    EXPECT_EQ(*std::max_element(w.begin(), w.end()), w[mid * G + mid]);
  }
}

TEST(ScorePredictions, PerfectAndMissed) {
  const TaskConfig task = tiny_run().task();
  Rng rng(2);
  const auto samples = gen_batch(rng, task, 20);
  std::vector<std::size_t> cells;
  std::vector<std::array<double, 2>> offsets;
  for (const auto& s : samples) {
    cells.push_back(s.gt_cell);
    offsets.push_back(s.gt_offset);
  }
  const EvalMetrics perfect = score_predictions(cells, offsets, samples, task.grid_side());
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.offset_error, 0.0);
  EXPECT_EQ(perfect.mean_iou, 1.0);
  // shifted by exactly one cell horizontally where possible
  std::size_t moved = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i] % task.grid_side() + 1 < task.grid_side()) {
      ++cells[i];
      ++moved;
    }
  }
  const EvalMetrics off = score_predictions(cells, offsets, samples, task.grid_side());
  const double frac = static_cast<double>(moved) / cells.size();
  EXPECT_NEAR(off.accuracy, 1.0 - frac, 1e-15);
  EXPECT_NEAR(off.offset_error, frac, 1e-12);
  EXPECT_NEAR(off.mean_iou, 1.0 - frac, 1e-12);
  cells.pop_back();
  EXPECT_THROW(score_predictions(cells, offsets, samples, task.grid_side()), std::invalid_argument);
}

TEST(Evaluate, UniformScoresWithHanningPickTheCentreCell) {
  const RunConfig cfg = tiny_run();
  Rng rng(4);
  auto m = TrackerModel<float>::init(cfg.teacher_config(), rng);
  for (float& v : m.decoder.score.weight.data) v = 0.0f;
  const TaskConfig task = cfg.task();
  auto samples = make_eval_set(1, task, 64);
  const std::size_t G = task.grid_side(), centre = ((G - 1) / 2) * (G + 1);
  for (auto& s : samples) s.gt_cell = centre;
  EXPECT_EQ(evaluate(m, samples, task, true).accuracy, 1.0);
  // plain argmax of a flat map breaks the tie at cell 0
  for (auto& s : samples) s.gt_cell = 0;
  EXPECT_EQ(evaluate(m, samples, task, false).accuracy, 1.0);
}

TEST(Evaluate, FloatAndDoubleAgree) {
  const TaskConfig task = tiny_run().task();
  const auto samples = make_eval_set(2, task, 32);
  TrackerModel<float> m = tiny_teacher();
  TrackerModel<double> md = cast_model<double>(m);
  const EvalMetrics a = evaluate(m, samples, task, false);
  const EvalMetrics b = evaluate(md, samples, task, false);
  EXPECT_NEAR(a.accuracy, b.accuracy, 1.0 / 32 + 1e-12);
  EXPECT_NEAR(a.offset_error, b.offset_error, 0.05);
}

TEST(Training, TeacherWithoutEpochsStaysNearChance) {
  RunConfig c = tiny_run();
  c.epochs = 0;
  c.finetune_epochs = 0;
  c.eval_samples = 256;
  const RunResult r = train_teacher(c);
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_LT(r.final_eval.accuracy, 0.3);
}

TEST(Training, DeterministicAndSeedSensitive) {
  RunConfig c = tiny_run();
  c.epochs = 1;
  c.finetune_epochs = 0;
  const RunResult a = train_teacher(c), b = train_teacher(c);
  EXPECT_EQ(a.model.checksum(), b.model.checksum());
  EXPECT_EQ(a.metrics.size(), 1u);
  EXPECT_EQ(a.metrics[0].l_total, b.metrics[0].l_total);
  c.seed = 4;
  EXPECT_NE(train_teacher(c).model.checksum(), a.model.checksum());
}

TEST(Training, MetricsRowsMatchEpochsForEveryRegime) {
  const RunConfig c = tiny_run();
  std::size_t sunk = 0;
  RunOptions o;
  o.sink = [&](const MetricsRecord&) { ++sunk; };
  EXPECT_EQ(compress(tiny_teacher(), c, o).metrics.size(), c.epochs);
  for (Regime r : {Regime::kNaive, Regime::kDistill, Regime::kDecoupled}) {
    EXPECT_EQ(train_baseline(&tiny_teacher(), c, r, o).metrics.size(), c.epochs) << regime_name(r);
  }
  EXPECT_EQ(sweep_run(tiny_teacher(), c, 0.3, o).metrics.size(), c.epochs);
  EXPECT_EQ(sunk, 5 * c.epochs);
}

TEST(Training, CompressLeavesTheTeacherUntouched) {
  const TrackerModel<float>& t = tiny_teacher();
  const std::uint64_t before = t.checksum();
  const RunResult r = compress(t, tiny_run());
  EXPECT_EQ(t.checksum(), before);
  EXPECT_EQ(r.model.blocks.size(), 2u);
  EXPECT_NE(r.model.checksum(), init_student(&t, tiny_run()).checksum());
}

TEST(Training, ScheduleIsRecordedPerEpoch) {
  RunConfig c = tiny_run();
  c.epochs = 10;
  const RunResult r = compress(tiny_teacher(), c);
  for (const MetricsRecord& m : r.metrics) {
    EXPECT_EQ(m.p, schedule_p(c.schedule(), static_cast<double>(m.epoch)));
  }
}

TEST(Training, AllStudentWithoutGuidanceEqualsNaive) {
  RunConfig c = tiny_run();
  c.finetune_epochs = 0;
  c.weights = LossWeights{1.0, 0.0, 0.0};
  RunOptions o;
  o.fixed_p = 1.0;
  const RunResult a = compress(tiny_teacher(), c, o);
  const RunResult b = train_baseline(&tiny_teacher(), c, Regime::kNaive);
  EXPECT_EQ(a.model.checksum(), b.model.checksum());
}

TEST(Training, DecoupledTrainsOneStageAtATime) {
  RunConfig c = tiny_run();
  const TrackerModel<float> init = init_student(&tiny_teacher(), c);
  std::map<std::size_t, std::array<std::uint64_t, 2>> seen;
  RunOptions o;
  o.on_epoch_end = [&](std::size_t e, const TrackerModel<float>& m) {
    seen[e] = {block_checksum(m.blocks[0]), block_checksum(m.blocks[1])};
  };
  train_baseline(&tiny_teacher(), c, Regime::kDecoupled, o);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_NE(seen[0][0], block_checksum(init.blocks[0]));
  EXPECT_EQ(seen[0][1], block_checksum(init.blocks[1]));
  EXPECT_EQ(seen[1][0], seen[0][0]);
  EXPECT_NE(seen[1][1], seen[0][1]);
  EXPECT_NE(seen[2][0], seen[1][0]);
  EXPECT_NE(seen[2][1], seen[1][1]);
  c.epochs = 2;
  EXPECT_THROW(train_baseline(&tiny_teacher(), c, Regime::kDecoupled), std::invalid_argument);
}

TEST(Training, StudentEmbeddingIsCopiedAndFrozen) {
  const RunResult r = train_baseline(&tiny_teacher(), tiny_run(), Regime::kDistill);
  EXPECT_EQ(r.model.embed.patch.weight.data, tiny_teacher().embed.patch.weight.data);
  EXPECT_EQ(r.model.embed.pos_x.data, tiny_teacher().embed.pos_x.data);
}

TEST(Training, LossFallsOverAShortRun) {
  RunConfig c = tiny_run();
  c.epochs = 6;
  c.iters_per_epoch = 10;
  c.finetune_epochs = 0;
  const RunResult r = train_teacher(c);
  EXPECT_LT(r.metrics.back().l_track, r.metrics.front().l_track);
}

TEST(Training, InvalidConfigs) {
  RunConfig c = tiny_run();
  c.finetune_epochs = 4;
  EXPECT_THROW(train_teacher(c), std::invalid_argument);
  c = tiny_run();
  c.student_layers = 3;
  EXPECT_THROW(compress(tiny_teacher(), c), std::invalid_argument);
  c = tiny_run();
  c.embed_dim = 16;
  EXPECT_THROW(compress(tiny_teacher(), c), std::invalid_argument);
  EXPECT_THROW(train_baseline(nullptr, tiny_run(), Regime::kDistill), std::invalid_argument);
  EXPECT_THROW(train_baseline(&tiny_teacher(), tiny_run(), Regime::kCompress), std::invalid_argument);
  EXPECT_THROW(sweep_run(tiny_teacher(), tiny_run(), 1.5), std::invalid_argument);
}

TEST(Training, NaiveWithoutTeacherNeedsRandomInit) {
  RunConfig c = tiny_run();
  EXPECT_THROW(train_baseline(nullptr, c, Regime::kNaive), std::invalid_argument);
  c.init_policy = InitPolicy::kRandom;
  c.decoder_init = DecoderInit::kRandom;
  EXPECT_EQ(train_baseline(nullptr, c, Regime::kNaive).metrics.size(), c.epochs);
}

TEST(InitStudent, Policies) {
  const TrackerModel<float>& t = tiny_teacher();
  RunConfig c = tiny_run();
  const auto skip = init_student(&t, c);
  EXPECT_EQ(block_checksum(skip.blocks[0]), block_checksum(t.blocks[1]));
  EXPECT_EQ(block_checksum(skip.blocks[1]), block_checksum(t.blocks[3]));
  EXPECT_EQ(skip.decoder.offset.weight.data, t.decoder.offset.weight.data);
  c.init_policy = InitPolicy::kFirstK;
  const auto first = init_student(&t, c);
  EXPECT_EQ(block_checksum(first.blocks[1]), block_checksum(t.blocks[1]));
  c.init_policy = InitPolicy::kRandom;
  c.decoder_init = DecoderInit::kRandom;
  const auto rnd = init_student(&t, c);
  EXPECT_NE(block_checksum(rnd.blocks[0]), block_checksum(t.blocks[1]));
  EXPECT_NE(rnd.decoder.offset.weight.data, t.decoder.offset.weight.data);
}
