#pragma once

#include <string>
#include <vector>

#include "ctrack/tensor.hpp"

namespace ctrack {

struct AdamWOptions {
  double lr = 4e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay: theta <- theta - lr * wd * theta,
/// then the bias-corrected Adam update.
template <typename T>
class AdamW {
 public:
  struct Slot {
    Tensor<T>* param = nullptr;
    std::vector<T> m;
    std::vector<T> v;
  };

  explicit AdamW(AdamWOptions options) : options_(options) {}

  /// Registers a parameter; it must outlive the optimizer.
  void add(Tensor<T>& param);
  void step();
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  long step_count() const { return step_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  AdamWOptions options_;
  std::vector<Slot> slots_;
  long step_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace ctrack
