#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "ctrack/tensor.hpp"

namespace ctrack {

/// Primitive set of the reverse-mode engine.
enum class Op : std::uint8_t {
  kInput,
  kParam,
  kMatMul,
  kAdd,
  kSub,
  kScale,
  kLayerNorm,
  kSoftmax,
  kGelu,
  kSigmoid,
  kReshape,
  kSwapAxes12,
  kConcatTokens,
  kSliceTokens,
  kGatherCells,
  kMean,
  kSumSquares,
  kCrossEntropy,
  kL1,
};

std::string_view op_name(Op op);

/// Handle to a node of a Graph.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Append-only tape of primitive applications. Node inputs always precede
/// the node, so reverse append order is a valid topological order for the
/// backward sweep. A Graph is a single-threaded unit of work.
template <typename T>
class Graph {
 public:
  struct Node {
    Op op = Op::kInput;
    Tensor<T> value;
    std::vector<T> grad;
    std::array<std::uint32_t, 3> inputs{};
    std::uint8_t num_inputs = 0;
    bool needs_grad = false;
    Tensor<T>* param = nullptr;
    // op-specific caches
    std::vector<T> saved;
    std::vector<T> saved2;
    std::vector<std::size_t> index;
    double attr = 0.0;
    bool flag = false;
  };

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {
    nodes_.reserve(256);
  }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Constant input; never receives a gradient.
  Var constant(Tensor<T> value);
  /// Leaf bound to a parameter. When the parameter requires grad, backward
  /// accumulates into its grad buffer.
  Var param(Tensor<T>& p);

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? *n.param : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  /// Gradient of the last backward() with respect to an interior node.
  std::span<const T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? std::span<const T>(n.param->grad) : std::span<const T>(n.grad);
  }
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  /// Reverse sweep from a scalar loss. Throws if the loss is not scalar or
  /// if backward already ran on this tape.
  void backward(Var loss);
  /// Drops all nodes so the graph can record a fresh computation.
  void reset();

  // Used by the primitive implementations.
  Var record(Op op, Tensor<T> value, std::initializer_list<Var> inputs);
  Node& node(Var v) { return nodes_.at(v.id); }
  const Node& node(Var v) const { return nodes_.at(v.id); }

 private:
  void backward_node(std::size_t id);
  std::vector<T>& grad_of(std::uint32_t id);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// Primitives. Each one checks shapes, computes the forward value, verifies it
// is finite and records a node.

/// a: [..., M, K]; b: [K, N] shared across the leading dims, or [..., K, N]
/// with the same leading dims. With trans_b the last two dims of b swap.
template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool trans_b = false);
/// Elementwise sum; b may also match a trailing suffix of a's shape.
template <typename T>
Var add(Graph<T>& g, Var a, Var b);
template <typename T>
Var sub(Graph<T>& g, Var a, Var b);
template <typename T>
Var scale(Graph<T>& g, Var a, double s);
/// Normalizes over the last dim (epsilon 1e-5) then applies gamma/beta.
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta);
template <typename T>
Var softmax_last_dim(Graph<T>& g, Var x);
/// tanh approximation.
template <typename T>
Var gelu(Graph<T>& g, Var x);
template <typename T>
Var sigmoid(Graph<T>& g, Var x);
template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape);
/// [A, B, C, D] -> [A, C, B, D].
template <typename T>
Var swap_axes12(Graph<T>& g, Var x);
/// [B, T1, D] ++ [B, T2, D] -> [B, T1 + T2, D].
template <typename T>
Var concat_tokens(Graph<T>& g, Var a, Var b);
template <typename T>
Var slice_tokens(Graph<T>& g, Var x, std::size_t start, std::size_t count);
/// x: [B, G, C]; picks row cells[b] of each batch item -> [B, C].
template <typename T>
Var gather_cells(Graph<T>& g, Var x, std::span<const std::size_t> cells);
template <typename T>
Var mean(Graph<T>& g, Var x);
template <typename T>
Var sum_squares(Graph<T>& g, Var x);
/// Batch-mean cross entropy of logits [B, G] against class indices.
template <typename T>
Var cross_entropy_with_logits(Graph<T>& g, Var logits,
                              std::span<const std::size_t> labels);
/// Batch-mean cross entropy against a target distribution [B, G].
template <typename T>
Var cross_entropy_with_logits(Graph<T>& g, Var logits, const Tensor<T>& target);
/// Sum of |a - b| divided by the number of rows (numel / last dim).
template <typename T>
Var l1(Graph<T>& g, Var a, Var b);

/// Row-wise softmax of a plain tensor, same numerics as the primitive.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace ctrack
