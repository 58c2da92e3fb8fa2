#include "ctrack/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <type_traits>

namespace ctrack {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                            " and " + shape_str(b)) {}

ShapeError::ShapeError(const std::string& op, const std::string& what)
    : std::invalid_argument(op + ": " + what) {}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values)
    : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("tensor", "buffer of " + std::to_string(data.size()) +
                                   " elements for shape " + shape_str(shape));
  }
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape s, T value) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(int i) const {
  const int r = static_cast<int>(shape.size());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) {
    throw ShapeError("dim", "axis " + std::to_string(i) + " out of range for " +
                                shape_str(shape));
  }
  return shape[static_cast<std::size_t>(k)];
}

template <typename T>
void Tensor<T>::enable_grad() {
  requires_grad = true;
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
  for (std::size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {
template <typename T>
void check_finite_impl(const T* p, std::size_t n, const char* op) {
  // Non-finite values have an all-ones exponent; this scan vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  unsigned bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Bits b;
    std::memcpy(&b, p + i, sizeof(T));
    bad |= static_cast<unsigned>((b & exp_mask) == exp_mask);
  }
  if (bad == 0) return;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(std::string(op) + ": non-finite output at element " +
                         std::to_string(i));
    }
  }
}
}  // namespace

void check_finite(const float* p, std::size_t n, const char* op) {
  check_finite_impl(p, n, op);
}
void check_finite(const double* p, std::size_t n, const char* op) {
  check_finite_impl(p, n, op);
}

template struct Tensor<float>;
template struct Tensor<double>;
template std::uint64_t checksum(const Tensor<float>&);
template std::uint64_t checksum(const Tensor<double>&);

}  // namespace ctrack
