#include "ctrack/graph.hpp"

#include <Eigen/Core>
#include <malloc.h>
#include <algorithm>
#include <cmath>

namespace ctrack {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kScale: return "scale";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kSoftmax: return "softmax_last_dim";
    case Op::kGelu: return "gelu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kReshape: return "reshape";
    case Op::kSwapAxes12: return "swap_axes12";
    case Op::kConcatTokens: return "concat_tokens";
    case Op::kSliceTokens: return "slice_tokens";
    case Op::kGatherCells: return "gather_cells";
    case Op::kMean: return "mean";
    case Op::kSumSquares: return "sum_squares";
    case Op::kCrossEntropy: return "cross_entropy_with_logits";
    case Op::kL1: return "l1";
  }
  return "unknown";
}

namespace {

// Activations are freed and reallocated every training step. Keep them on the
// heap instead of mapping and unmapping pages each time.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();


constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

Eigen::Index ix(std::size_t n) { return static_cast<Eigen::Index>(n); }

// C (+)= op(A) * op(B), all row-major.
template <typename T>
void gemm(const T* a, std::size_t a_rows, std::size_t a_cols, bool ta, const T* b,
          std::size_t b_rows, std::size_t b_cols, bool tb, T* c, bool accumulate) {
  CMap<T> am(a, ix(a_rows), ix(a_cols));
  CMap<T> bm(b, ix(b_rows), ix(b_cols));
  const std::size_t m = ta ? a_cols : a_rows;
  const std::size_t n = tb ? b_rows : b_cols;
  MMap<T> cm(c, ix(m), ix(n));
  if (!accumulate) cm.setZero();
  if (!ta && !tb) {
    cm.noalias() += am * bm;
  } else if (!ta && tb) {
    cm.noalias() += am * bm.transpose();
  } else if (ta && !tb) {
    cm.noalias() += am.transpose() * bm;
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

template <typename T>
void finite_or_throw(const Tensor<T>& t, Op op) {
  check_finite(t.data.data(), t.data.size(), std::string(op_name(op)).c_str());
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  return record(Op::kInput, std::move(value), {});
}

template <typename T>
Var Graph<T>::param(Tensor<T>& p) {
  Node n;
  n.op = Op::kParam;
  n.param = &p;
  n.needs_grad = grad_enabled_ && p.requires_grad;
  if (n.needs_grad) p.enable_grad();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::record(Op op, Tensor<T> value, std::initializer_list<Var> inputs) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  bool any = false;
  for (Var in : inputs) {
    n.inputs[n.num_inputs++] = in.id;
    any = any || nodes_[in.id].needs_grad;
  }
  n.needs_grad = grad_enabled_ && any;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Graph<T>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

template <typename T>
std::vector<T>& Graph<T>::grad_of(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.param) return n.param->grad;
  if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (backward_done_) {
    throw std::logic_error("backward: already ran on this graph; reset() first");
  }
  const Tensor<T>& lv = value(loss);
  if (lv.numel() != 1) {
    throw ShapeError("backward", "loss must be scalar, got shape " + shape_str(lv.shape));
  }
  backward_done_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  grad_of(loss.id)[0] += T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.param || n.grad.empty()) continue;
    backward_node(i);
  }
}

template <typename T>
void Graph<T>::backward_node(std::size_t id) {
  Node& n = nodes_[id];
  const std::vector<T>& gy = n.grad;
  auto in = [&](int k) -> Node& { return nodes_[n.inputs[k]]; };
  auto in_value = [&](int k) -> const Tensor<T>& {
    Node& x = in(k);
    return x.param ? *x.param : x.value;
  };
  auto wants = [&](int k) { return in(k).needs_grad; };
  auto gin = [&](int k) -> std::vector<T>& { return grad_of(n.inputs[k]); };

  switch (n.op) {
    case Op::kInput:
    case Op::kParam:
      break;
    case Op::kMatMul: {
      const Tensor<T>& a = in_value(0);
      const Tensor<T>& b = in_value(1);
      const bool tb = n.flag;
      const std::size_t k = a.dim(-1);
      const std::size_t m = a.dim(-2);
      if (b.rank() == 2) {
        const std::size_t rows = a.numel() / k;
        const std::size_t nn = tb ? b.shape[0] : b.shape[1];
        if (wants(0)) {
          // dA = dC * op(B)^T
          gemm(gy.data(), rows, nn, false, b.data.data(), b.shape[0], b.shape[1], !tb,
               gin(0).data(), true);
        }
        if (wants(1)) {
          if (!tb) {
            gemm(a.data.data(), rows, k, true, gy.data(), rows, nn, false, gin(1).data(),
                 true);
          } else {
            gemm(gy.data(), rows, nn, true, a.data.data(), rows, k, false, gin(1).data(),
                 true);
          }
        }
      } else {
        const std::size_t br = b.dim(-2), bc = b.dim(-1);
        const std::size_t nn = tb ? br : bc;
        const std::size_t batches = a.numel() / (m * k);
        for (std::size_t s = 0; s < batches; ++s) {
          const T* as = a.data.data() + s * m * k;
          const T* bs = b.data.data() + s * br * bc;
          const T* gs = gy.data() + s * m * nn;
          if (wants(0)) {
            gemm(gs, m, nn, false, bs, br, bc, !tb, gin(0).data() + s * m * k, true);
          }
          if (wants(1)) {
            T* gb = gin(1).data() + s * br * bc;
            if (!tb) {
              gemm(as, m, k, true, gs, m, nn, false, gb, true);
            } else {
              gemm(gs, m, nn, true, as, m, k, false, gb, true);
            }
          }
        }
      }
      break;
    }
    case Op::kAdd: {
      if (wants(0)) {
        auto& ga = gin(0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (wants(1)) {
        auto& gb = gin(1);
        const std::size_t nb = gb.size();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i % nb] += gy[i];
      }
      break;
    }
    case Op::kSub: {
      if (wants(0)) {
        auto& ga = gin(0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (wants(1)) {
        auto& gb = gin(1);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
      break;
    }
    case Op::kScale: {
      if (wants(0)) {
        auto& ga = gin(0);
        const T s = static_cast<T>(n.attr);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
      }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor<T>& gamma = in_value(1);
      const std::size_t d = gamma.numel();
      const std::size_t rows = gy.size() / d;
      const std::vector<T>& xhat = n.saved;
      const std::vector<T>& rstd = n.saved2;
      std::vector<T> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = gy.data() + r * d;
        const T* xh = xhat.data() + r * d;
        if (wants(1)) {
          auto& gg = gin(1);
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * xh[j];
        }
        if (wants(2)) {
          auto& gbeta = gin(2);
          for (std::size_t j = 0; j < d; ++j) gbeta[j] += g[j];
        }
        if (wants(0)) {
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = g[j] * gamma.data[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
          }
          mean_dxhat /= static_cast<T>(d);
          mean_dxhat_xhat /= static_cast<T>(d);
          T* gx = gin(0).data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            gx[j] += rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
          }
        }
      }
      break;
    }
    case Op::kSoftmax: {
      if (!wants(0)) break;
      const std::vector<T>& y = n.value.data;
      const std::size_t d = n.value.dim(-1);
      auto& gx = gin(0);
      for (std::size_t r = 0; r < y.size() / d; ++r) {
        const T* yr = y.data() + r * d;
        const T* gr = gy.data() + r * d;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += yr[j] * (gr[j] - dot);
      }
      break;
    }
    case Op::kGelu: {
      if (!wants(0)) break;
      const std::vector<T>& x = in_value(0).data;
      auto& gx = gin(0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T xi = x[i];
        const T t = n.saved[i];
        const T du = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * xi * xi);
        const T d = T(0.5) * (T(1) + t) + T(0.5) * xi * (T(1) - t * t) * du;
        gx[i] += gy[i] * d;
      }
      break;
    }
    case Op::kSigmoid: {
      if (!wants(0)) break;
      const std::vector<T>& y = n.value.data;
      auto& gx = gin(0);
      for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
      break;
    }
    case Op::kReshape: {
      if (!wants(0)) break;
      auto& gx = gin(0);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      break;
    }
    case Op::kSwapAxes12: {
      if (!wants(0)) break;
      const Shape& s = in_value(0).shape;
      const std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
      auto& gx = gin(0);
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const T* src = gy.data() + ((a * C + c) * B + b) * D;
            T* dst = gx.data() + ((a * B + b) * C + c) * D;
            for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
          }
      break;
    }
    case Op::kConcatTokens: {
      const Shape& sa = in_value(0).shape;
      const Shape& sb = in_value(1).shape;
      const std::size_t B = sa[0], Ta = sa[1], Tb = sb[1], D = sa[2];
      for (std::size_t b = 0; b < B; ++b) {
        const T* src = gy.data() + b * (Ta + Tb) * D;
        if (wants(0)) {
          T* dst = gin(0).data() + b * Ta * D;
          for (std::size_t i = 0; i < Ta * D; ++i) dst[i] += src[i];
        }
        if (wants(1)) {
          T* dst = gin(1).data() + b * Tb * D;
          for (std::size_t i = 0; i < Tb * D; ++i) dst[i] += src[Ta * D + i];
        }
      }
      break;
    }
    case Op::kSliceTokens: {
      if (!wants(0)) break;
      const Shape& s = in_value(0).shape;
      const std::size_t B = s[0], Tn = s[1], D = s[2];
      const std::size_t start = n.index[0], count = n.index[1];
      auto& gx = gin(0);
      for (std::size_t b = 0; b < B; ++b) {
        const T* src = gy.data() + b * count * D;
        T* dst = gx.data() + (b * Tn + start) * D;
        for (std::size_t i = 0; i < count * D; ++i) dst[i] += src[i];
      }
      break;
    }
    case Op::kGatherCells: {
      if (!wants(0)) break;
      const Shape& s = in_value(0).shape;
      const std::size_t B = s[0], G = s[1], C = s[2];
      auto& gx = gin(0);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) gx[(b * G + n.index[b]) * C + c] += gy[b * C + c];
      }
      break;
    }
    case Op::kMean: {
      if (!wants(0)) break;
      auto& gx = gin(0);
      const T s = gy[0] / static_cast<T>(gx.size());
      for (auto& v : gx) v += s;
      break;
    }
    case Op::kSumSquares: {
      if (!wants(0)) break;
      const std::vector<T>& x = in_value(0).data;
      auto& gx = gin(0);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += T(2) * x[i] * gy[0];
      break;
    }
    case Op::kCrossEntropy: {
      if (!wants(0)) break;
      const std::vector<T>& p = n.saved;
      const std::vector<T>& t = n.saved2;
      const std::size_t G = in_value(0).dim(-1);
      const std::size_t B = p.size() / G;
      auto& gx = gin(0);
      const T s = gy[0] / static_cast<T>(B);
      for (std::size_t b = 0; b < B; ++b) {
        T mass = 0;
        for (std::size_t j = 0; j < G; ++j) mass += t[b * G + j];
        for (std::size_t j = 0; j < G; ++j) {
          gx[b * G + j] += s * (p[b * G + j] * mass - t[b * G + j]);
        }
      }
      break;
    }
    case Op::kL1: {
      const std::vector<T>& a = in_value(0).data;
      const std::vector<T>& b = in_value(1).data;
      const T s = gy[0] / static_cast<T>(n.attr);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a[i] - b[i];
        const T sg = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
        if (wants(0)) gin(0)[i] += s * sg;
        if (wants(1)) gin(1)[i] -= s * sg;
      }
      break;
    }
  }
}

namespace {

template <typename T>
const Tensor<T>& val(const Graph<T>& g, Var v) {
  const auto& n = g.node(v);
  return n.param ? *n.param : n.value;
}

template <typename T>
Var finish(Graph<T>& g, Op op, Tensor<T> out, std::initializer_list<Var> inputs) {
  finite_or_throw(out, op);
  return g.record(op, std::move(out), inputs);
}

}  // namespace

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool trans_b) {
  const Tensor<T>& av = val(g, a);
  const Tensor<T>& bv = val(g, b);
  if (av.rank() < 2 || bv.rank() < 2) throw ShapeError("matmul", av.shape, bv.shape);
  const std::size_t m = av.dim(-2), k = av.dim(-1);
  const std::size_t br = bv.dim(-2), bc = bv.dim(-1);
  const std::size_t bk = trans_b ? bc : br;
  const std::size_t nn = trans_b ? br : bc;
  if (bk != k) throw ShapeError("matmul", av.shape, bv.shape);
  Shape out_shape = av.shape;
  out_shape.back() = nn;
  Tensor<T> out(out_shape);
  if (bv.rank() == 2) {
    gemm(av.data.data(), av.numel() / k, k, false, bv.data.data(), br, bc, trans_b,
         out.data.data(), false);
  } else {
    if (bv.rank() != av.rank() ||
        !std::equal(av.shape.begin(), av.shape.end() - 2, bv.shape.begin())) {
      throw ShapeError("matmul", av.shape, bv.shape);
    }
    const std::size_t batches = av.numel() / (m * k);
    for (std::size_t s = 0; s < batches; ++s) {
      gemm(av.data.data() + s * m * k, m, k, false, bv.data.data() + s * br * bc, br, bc,
           trans_b, out.data.data() + s * m * nn, false);
    }
  }
  Var v = finish(g, Op::kMatMul, std::move(out), {a, b});
  g.node(v).flag = trans_b;
  return v;
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = val(g, a);
  const Tensor<T>& bv = val(g, b);
  if (!is_suffix(av.shape, bv.shape)) throw ShapeError("add", av.shape, bv.shape);
  Tensor<T> out = Tensor<T>(av.shape, av.data);
  const std::size_t nb = bv.numel();
  for (std::size_t i = 0; i < out.data.size(); i += nb) {
    for (std::size_t j = 0; j < nb; ++j) out.data[i + j] += bv.data[j];
  }
  return finish(g, Op::kAdd, std::move(out), {a, b});
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = val(g, a);
  const Tensor<T>& bv = val(g, b);
  if (av.shape != bv.shape) throw ShapeError("sub", av.shape, bv.shape);
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
  return finish(g, Op::kSub, std::move(out), {a, b});
}

template <typename T>
Var scale(Graph<T>& g, Var a, double s) {
  const Tensor<T>& av = val(g, a);
  Tensor<T> out(av.shape);
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = st * av.data[i];
  Var v = finish(g, Op::kScale, std::move(out), {a});
  g.node(v).attr = s;
  return v;
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta) {
  const Tensor<T>& xv = val(g, x);
  const Tensor<T>& gv = val(g, gamma);
  const Tensor<T>& bv = val(g, beta);
  if (xv.rank() < 1 || gv.rank() != 1 || gv.shape != bv.shape || gv.shape[0] != xv.dim(-1)) {
    throw ShapeError("layer_norm", xv.shape, gv.shape);
  }
  const std::size_t d = gv.shape[0];
  const std::size_t rows = xv.numel() / d;
  Tensor<T> out(xv.shape);
  std::vector<T> xhat(xv.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xr[j] - mu) * rs;
      xhat[r * d + j] = xh;
      out.data[r * d + j] = xh * gv.data[j] + bv.data[j];
    }
  }
  Var v = finish(g, Op::kLayerNorm, std::move(out), {x, gamma, beta});
  auto& n = g.node(v);
  if (n.needs_grad) {
    n.saved = std::move(xhat);
    n.saved2 = std::move(rstd);
  }
  return v;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape);
  const std::size_t d = logits.dim(-1);
  for (std::size_t r = 0; r < logits.numel() / d; ++r) {
    const T* x = logits.data.data() + r * d;
    T* y = out.data.data() + r * d;
    T mx = x[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < d; ++j) y[j] /= sum;
  }
  return out;
}

template <typename T>
Var softmax_last_dim(Graph<T>& g, Var x) {
  const Tensor<T>& xv = val(g, x);
  if (xv.rank() < 1) throw ShapeError("softmax_last_dim", "needs rank >= 1");
  return finish(g, Op::kSoftmax, softmax_rows(xv), {x});
}

template <typename T>
Var gelu(Graph<T>& g, Var x) {
  const Tensor<T>& xv = val(g, x);
  const std::size_t n = xv.numel();
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Eigen::Map<const Arr> xa(xv.data.data(), static_cast<Eigen::Index>(n));
  Arr t = (static_cast<T>(kGeluC) * (xa + static_cast<T>(kGeluA) * xa.cube())).tanh();
  Tensor<T> out(xv.shape, std::vector<T>(n));
  Eigen::Map<Arr>(out.data.data(), static_cast<Eigen::Index>(n)) = T(0.5) * xa * (T(1) + t);
  Var v = finish(g, Op::kGelu, std::move(out), {x});
  if (g.grad_enabled()) g.node(v).saved.assign(t.data(), t.data() + n);
  return v;
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  const Tensor<T>& xv = val(g, x);
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = T(1) / (T(1) + std::exp(-xv.data[i]));
  }
  return finish(g, Op::kSigmoid, std::move(out), {x});
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  const Tensor<T>& xv = val(g, x);
  if (shape_numel(shape) != xv.numel()) throw ShapeError("reshape", xv.shape, shape);
  return g.record(Op::kReshape, Tensor<T>(std::move(shape), xv.data), {x});
}

template <typename T>
Var swap_axes12(Graph<T>& g, Var x) {
  const Tensor<T>& xv = val(g, x);
  if (xv.rank() != 4) throw ShapeError("swap_axes12", "needs rank 4, got " + shape_str(xv.shape));
  const std::size_t A = xv.shape[0], B = xv.shape[1], C = xv.shape[2], D = xv.shape[3];
  Tensor<T> out(Shape{A, C, B, D});
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = xv.data.data() + ((a * B + b) * C + c) * D;
        T* dst = out.data.data() + ((a * C + c) * B + b) * D;
        std::copy(src, src + D, dst);
      }
  return g.record(Op::kSwapAxes12, std::move(out), {x});
}

template <typename T>
Var concat_tokens(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = val(g, a);
  const Tensor<T>& bv = val(g, b);
  if (av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0] ||
      av.shape[2] != bv.shape[2]) {
    throw ShapeError("concat_tokens", av.shape, bv.shape);
  }
  const std::size_t B = av.shape[0], Ta = av.shape[1], Tb = bv.shape[1], D = av.shape[2];
  Tensor<T> out(Shape{B, Ta + Tb, D});
  for (std::size_t i = 0; i < B; ++i) {
    T* dst = out.data.data() + i * (Ta + Tb) * D;
    std::copy_n(av.data.data() + i * Ta * D, Ta * D, dst);
    std::copy_n(bv.data.data() + i * Tb * D, Tb * D, dst + Ta * D);
  }
  return g.record(Op::kConcatTokens, std::move(out), {a, b});
}

template <typename T>
Var slice_tokens(Graph<T>& g, Var x, std::size_t start, std::size_t count) {
  const Tensor<T>& xv = val(g, x);
  if (xv.rank() != 3 || start + count > xv.shape[1] || count == 0) {
    throw ShapeError("slice_tokens", "range [" + std::to_string(start) + ", " +
                                         std::to_string(start + count) + ") of " +
                                         shape_str(xv.shape));
  }
  const std::size_t B = xv.shape[0], Tn = xv.shape[1], D = xv.shape[2];
  Tensor<T> out(Shape{B, count, D});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(xv.data.data() + (b * Tn + start) * D, count * D,
                out.data.data() + b * count * D);
  }
  Var v = g.record(Op::kSliceTokens, std::move(out), {x});
  g.node(v).index = {start, count};
  return v;
}

template <typename T>
Var gather_cells(Graph<T>& g, Var x, std::span<const std::size_t> cells) {
  const Tensor<T>& xv = val(g, x);
  if (xv.rank() != 3 || cells.size() != xv.shape[0]) {
    throw ShapeError("gather_cells", "input " + shape_str(xv.shape) + " with " +
                                         std::to_string(cells.size()) + " indices");
  }
  const std::size_t B = xv.shape[0], G = xv.shape[1], C = xv.shape[2];
  Tensor<T> out(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b) {
    if (cells[b] >= G) {
      throw ShapeError("gather_cells", "cell " + std::to_string(cells[b]) +
                                           " outside grid of " + std::to_string(G));
    }
    std::copy_n(xv.data.data() + (b * G + cells[b]) * C, C, out.data.data() + b * C);
  }
  Var v = g.record(Op::kGatherCells, std::move(out), {x});
  g.node(v).index.assign(cells.begin(), cells.end());
  return v;
}

template <typename T>
Var mean(Graph<T>& g, Var x) {
  const Tensor<T>& xv = val(g, x);
  T s = 0;
  for (T v : xv.data) s += v;
  Tensor<T> out(Shape{}, {s / static_cast<T>(xv.numel())});
  return finish(g, Op::kMean, std::move(out), {x});
}

template <typename T>
Var sum_squares(Graph<T>& g, Var x) {
  const Tensor<T>& xv = val(g, x);
  T s = 0;
  for (T v : xv.data) s += v * v;
  return finish(g, Op::kSumSquares, Tensor<T>(Shape{}, {s}), {x});
}

namespace {

template <typename T>
Var cross_entropy_impl(Graph<T>& g, Var logits, std::vector<T> target) {
  const Tensor<T>& lv = val(g, logits);
  const std::size_t G = lv.dim(-1);
  const std::size_t B = lv.numel() / G;
  Tensor<T> probs = softmax_rows(lv);
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = lv.data.data() + b * G;
    T mx = z[0];
    for (std::size_t j = 1; j < G; ++j) mx = std::max(mx, z[j]);
    T sum = 0;
    for (std::size_t j = 0; j < G; ++j) sum += std::exp(z[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < G; ++j) {
      const T t = target[b * G + j];
      if (t != T(0)) total -= t * (z[j] - lse);
    }
  }
  Var v = finish(g, Op::kCrossEntropy, Tensor<T>(Shape{}, {total / static_cast<T>(B)}),
                 {logits});
  auto& n = g.node(v);
  if (n.needs_grad) {
    n.saved = std::move(probs.data);
    n.saved2 = std::move(target);
  }
  return v;
}

}  // namespace

template <typename T>
Var cross_entropy_with_logits(Graph<T>& g, Var logits, std::span<const std::size_t> labels) {
  const Tensor<T>& lv = val(g, logits);
  if (lv.rank() != 2 || labels.size() != lv.shape[0]) {
    throw ShapeError("cross_entropy_with_logits",
                     "logits " + shape_str(lv.shape) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t G = lv.shape[1];
  std::vector<T> target(lv.numel(), T(0));
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= G) {
      throw ShapeError("cross_entropy_with_logits",
                       "label " + std::to_string(labels[b]) + " outside " + std::to_string(G));
    }
    target[b * G + labels[b]] = T(1);
  }
  return cross_entropy_impl(g, logits, std::move(target));
}

template <typename T>
Var cross_entropy_with_logits(Graph<T>& g, Var logits, const Tensor<T>& target) {
  const Tensor<T>& lv = val(g, logits);
  if (lv.rank() != 2 || target.shape != lv.shape) {
    throw ShapeError("cross_entropy_with_logits", lv.shape, target.shape);
  }
  return cross_entropy_impl(g, logits, target.data);
}

template <typename T>
Var l1(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = val(g, a);
  const Tensor<T>& bv = val(g, b);
  if (av.shape != bv.shape || av.rank() < 1) throw ShapeError("l1", av.shape, bv.shape);
  const std::size_t rows = av.numel() / av.dim(-1);
  T s = 0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += std::abs(av.data[i] - bv.data[i]);
  Var v = finish(g, Op::kL1, Tensor<T>(Shape{}, {s / static_cast<T>(rows)}), {a, b});
  g.node(v).attr = static_cast<double>(rows);
  return v;
}

#define CTRACK_INSTANTIATE(T)                                                          \
  template class Graph<T>;                                                             \
  template Var matmul(Graph<T>&, Var, Var, bool);                                      \
  template Var add(Graph<T>&, Var, Var);                                               \
  template Var sub(Graph<T>&, Var, Var);                                               \
  template Var scale(Graph<T>&, Var, double);                                          \
  template Var layer_norm(Graph<T>&, Var, Var, Var);                                   \
  template Var softmax_last_dim(Graph<T>&, Var);                                       \
  template Var gelu(Graph<T>&, Var);                                                   \
  template Var sigmoid(Graph<T>&, Var);                                                \
  template Var reshape(Graph<T>&, Var, Shape);                                         \
  template Var swap_axes12(Graph<T>&, Var);                                            \
  template Var concat_tokens(Graph<T>&, Var, Var);                                     \
  template Var slice_tokens(Graph<T>&, Var, std::size_t, std::size_t);                 \
  template Var gather_cells(Graph<T>&, Var, std::span<const std::size_t>);             \
  template Var mean(Graph<T>&, Var);                                                   \
  template Var sum_squares(Graph<T>&, Var);                                            \
  template Var cross_entropy_with_logits(Graph<T>&, Var, std::span<const std::size_t>); \
  template Var cross_entropy_with_logits(Graph<T>&, Var, const Tensor<T>&);            \
  template Var l1(Graph<T>&, Var, Var);                                                \
  template Tensor<T> softmax_rows(const Tensor<T>&);

CTRACK_INSTANTIATE(float)
CTRACK_INSTANTIATE(double)

#undef CTRACK_INSTANTIATE

}  // namespace ctrack
