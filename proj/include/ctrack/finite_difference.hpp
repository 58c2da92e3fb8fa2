#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "ctrack/tensor.hpp"

namespace ctrack {

/// Central-difference estimate of d f / d theta, one coordinate at a time.
/// theta is perturbed in place and restored before returning.
template <typename T, typename F>
Tensor<T> finite_difference_grad(F&& f, Tensor<T>& theta, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be > 0");
  Tensor<T> out(theta.shape);
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    const T saved = theta.data[i];
    theta.data[i] = saved + static_cast<T>(step);
    const double up = static_cast<double>(f());
    theta.data[i] = saved - static_cast<T>(step);
    const double down = static_cast<double>(f());
    theta.data[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    out.data[i] = static_cast<T>((up - down) / (2.0 * step));
  }
  return out;
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace ctrack
