#include "ctrack/optim.hpp"

#include <cmath>

namespace ctrack {

template <typename T>
void AdamW<T>::add(Tensor<T>& param) {
  param.enable_grad();
  slots_.push_back(Slot{&param, std::vector<T>(param.numel(), T(0)),
                        std::vector<T>(param.numel(), T(0))});
}

template <typename T>
void AdamW<T>::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  const T lr = static_cast<T>(options_.lr);
  const T decay = static_cast<T>(options_.lr * options_.weight_decay);
  const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
  const T eps = static_cast<T>(options_.eps);
  const T c1 = static_cast<T>(bc1), c2 = static_cast<T>(bc2);
  for (Slot& s : slots_) {
    Tensor<T>& p = *s.param;
    if (p.grad.size() != p.data.size()) {
      throw ShapeError("adamw_step", p.shape, Shape{p.grad.size()});
    }
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const T g = p.grad[i];
      p.data[i] -= decay * p.data[i];
      s.m[i] = b1 * s.m[i] + (T(1) - b1) * g;
      s.v[i] = b2 * s.v[i] + (T(1) - b2) * g * g;
      const T mhat = s.m[i] / c1;
      const T vhat = s.v[i] / c2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (Slot& s : slots_) s.param->zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace ctrack
