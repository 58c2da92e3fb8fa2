#include "ctrack/data.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace ctrack {

namespace {

constexpr std::uint64_t kTrainStream = 0x7472616e;
constexpr std::uint64_t kEvalStream = 0x6576616c;

constexpr double kLow = 0.3;
constexpr double kHigh = 1.0;

std::vector<float> random_pattern(Rng& rng, std::size_t side) {
  std::vector<float> p(side * side);
  for (float& v : p) v = static_cast<float>(kLow + (kHigh - kLow) * uniform01(rng));
  return p;
}

void paste(std::vector<float>& image, std::size_t image_side, const std::vector<float>& pattern,
           std::size_t side, std::size_t top, std::size_t left) {
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      image[(top + r) * image_side + left + c] = pattern[r * side + c];
    }
  }
}

}  // namespace

TaskConfig TaskConfig::from(const TrackerConfig& model, double noise, std::size_t distractors) {
  TaskConfig t;
  t.template_side = model.template_side;
  t.search_side = model.search_side;
  t.patch_size = model.patch_size;
  t.noise = noise;
  t.distractors = distractors;
  return t;
}

void TaskConfig::validate() const {
  if (patch_size == 0 || template_side % patch_size != 0 || search_side % patch_size != 0) {
    throw std::invalid_argument("task: image sides must be multiples of patch_size");
  }
  if (template_side < object_side()) throw std::invalid_argument("task: template too small");
  if (!(noise >= 0.0)) throw std::invalid_argument("noise: must be >= 0");
  if (distractors + 1 > num_cells()) {
    throw std::invalid_argument("distractors: more distractors than free cells");
  }
}

std::vector<SyntheticSample> gen_batch(Rng& rng, const TaskConfig& task, std::size_t n) {
  task.validate();
  if (n == 0) throw std::invalid_argument("gen_batch: n must be >= 1");
  const std::size_t s = task.object_side();
  const std::size_t P = task.patch_size;
  const std::size_t G = task.grid_side();
  const std::size_t shifts = P - s + 1;
  std::vector<SyntheticSample> out(n);
  for (SyntheticSample& sample : out) {
    const std::vector<float> target = random_pattern(rng, s);

    sample.template_image.assign(task.template_side * task.template_side, 0.0f);
    const std::size_t t0 = (task.template_side - s) / 2;
    paste(sample.template_image, task.template_side, target, s, t0, t0);

    sample.search.assign(task.search_side * task.search_side, 0.0f);
    std::vector<std::size_t> cells(task.num_cells());
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    // partial Fisher-Yates: first cell is the target, the rest distractors
    for (std::size_t i = 0; i <= task.distractors; ++i) {
      std::swap(cells[i], cells[i + uniform_index(rng, cells.size() - i)]);
    }
    for (std::size_t i = 0; i <= task.distractors; ++i) {
      const std::size_t cell = cells[i];
      const std::size_t dy = uniform_index(rng, shifts);
      const std::size_t dx = uniform_index(rng, shifts);
      const std::size_t top = (cell / G) * P + dy;
      const std::size_t left = (cell % G) * P + dx;
      if (i == 0) {
        paste(sample.search, task.search_side, target, s, top, left);
        sample.gt_cell = cell;
        sample.gt_offset = {(static_cast<double>(dx) + 0.5 * s) / P,
                            (static_cast<double>(dy) + 0.5 * s) / P};
      } else {
        paste(sample.search, task.search_side, random_pattern(rng, s), s, top, left);
      }
    }
    if (task.noise > 0.0) {
      for (float& v : sample.search) {
        v += static_cast<float>(task.noise * (2.0 * uniform01(rng) - 1.0));
      }
    }
  }
  return out;
}

std::vector<SyntheticSample> gen_batch(std::uint64_t seed, std::uint64_t epoch,
                                       std::uint64_t iteration, const TaskConfig& task,
                                       std::size_t n) {
  Rng rng(derive_seed(seed, {kTrainStream, epoch, iteration}));
  return gen_batch(rng, task, n);
}

std::vector<SyntheticSample> make_eval_set(std::uint64_t seed, const TaskConfig& task,
                                           std::size_t n) {
  Rng rng(derive_seed(seed, {kEvalStream}));
  return gen_batch(rng, task, n);
}

template <typename T>
Batch<T> collate(std::span<const SyntheticSample> samples, const TaskConfig& task) {
  const std::size_t B = samples.size();
  const std::size_t ts = task.template_side, ss = task.search_side;
  Batch<T> b;
  b.z = Tensor<T>(Shape{B, ts, ts});
  b.x = Tensor<T>(Shape{B, ss, ss});
  b.offsets = Tensor<T>(Shape{B, 2});
  b.cells.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    const SyntheticSample& s = samples[i];
    if (s.template_image.size() != ts * ts || s.search.size() != ss * ss) {
      throw ShapeError("collate", "sample " + std::to_string(i) + " does not match the task");
    }
    std::copy(s.template_image.begin(), s.template_image.end(), b.z.data.begin() + i * ts * ts);
    std::copy(s.search.begin(), s.search.end(), b.x.data.begin() + i * ss * ss);
    b.cells[i] = s.gt_cell;
    b.offsets.data[2 * i] = static_cast<T>(s.gt_offset[0]);
    b.offsets.data[2 * i + 1] = static_cast<T>(s.gt_offset[1]);
  }
  return b;
}

template Batch<float> collate(std::span<const SyntheticSample>, const TaskConfig&);
template Batch<double> collate(std::span<const SyntheticSample>, const TaskConfig&);

}  // namespace ctrack
