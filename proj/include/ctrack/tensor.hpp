#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrack {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes do not satisfy an op's signature.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  ShapeError(const std::string& op, const std::string& what);
};

/// Raised when a forward value or a loss component is NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense row-major array. Parameters carry a gradient buffer of the same
/// length; activations inside a Graph do not.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> values);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor filled(Shape s, T value);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  /// Negative indices count from the back.
  std::size_t dim(int i) const;

  bool has_grad() const { return !grad.empty(); }
  void enable_grad();
  void zero_grad();
};

/// FNV-1a over the raw bytes of the buffer; used to compare parameter states.
template <typename T>
std::uint64_t checksum(const Tensor<T>& t);

void check_finite(const float* p, std::size_t n, const char* op);
void check_finite(const double* p, std::size_t n, const char* op);

extern template struct Tensor<float>;
extern template struct Tensor<double>;

}  // namespace ctrack
