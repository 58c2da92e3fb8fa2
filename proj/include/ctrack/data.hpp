#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "ctrack/model.hpp"
#include "ctrack/rng.hpp"
#include "ctrack/tensor.hpp"

namespace ctrack {

/// Geometry and difficulty of the synthetic matching task.
struct TaskConfig {
  std::size_t template_side = 16;
  std::size_t search_side = 32;
  std::size_t patch_size = 4;
  double noise = 0.1;
  std::size_t distractors = 2;

  static TaskConfig from(const TrackerConfig& model, double noise, std::size_t distractors);
  std::size_t grid_side() const { return search_side / patch_size; }
  std::size_t num_cells() const { return grid_side() * grid_side(); }
  /// Side of the square target, half a cell.
  std::size_t object_side() const { return patch_size / 2 == 0 ? 1 : patch_size / 2; }
  void validate() const;
};

struct SyntheticSample {
  std::vector<float> template_image;  // template_side^2, row-major
  std::vector<float> search;          // search_side^2, row-major
  std::size_t gt_cell = 0;            // row * grid_side + col
  std::array<double, 2> gt_offset{};  // (x, y) of the target centre inside its cell, in [0, 1)
};

/// n independent samples drawn from rng. The target is a random intensity
/// pattern shown at the template centre and pasted into a random search
/// cell at a random sub-cell position; distractors are other patterns in
/// other cells. Search pixels get uniform noise in [-noise, noise].
std::vector<SyntheticSample> gen_batch(Rng& rng, const TaskConfig& task, std::size_t n);

/// Batch addressed by (seed, epoch, iteration).
std::vector<SyntheticSample> gen_batch(std::uint64_t seed, std::uint64_t epoch,
                                       std::uint64_t iteration, const TaskConfig& task,
                                       std::size_t n);

/// Held-out evaluation set; its stream never overlaps a training batch.
std::vector<SyntheticSample> make_eval_set(std::uint64_t seed, const TaskConfig& task,
                                           std::size_t n);

template <typename T>
struct Batch {
  Tensor<T> z;        // [B, template_side, template_side]
  Tensor<T> x;        // [B, search_side, search_side]
  std::vector<std::size_t> cells;
  Tensor<T> offsets;  // [B, 2]
  std::size_t size() const { return cells.size(); }
};

template <typename T>
Batch<T> collate(std::span<const SyntheticSample> samples, const TaskConfig& task);

}  // namespace ctrack
