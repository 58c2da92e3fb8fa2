#include "ctrack/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ctrack {

void TrackerConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("tracker config: " + what); };
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (num_heads == 0) fail("heads must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (patch_size == 0) fail("patch must be positive");
  if (template_side == 0 || search_side == 0) fail("image sides must be positive");
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by heads");
  if (template_side % patch_size != 0) fail("template side must be divisible by patch");
  if (search_side % patch_size != 0) fail("search side must be divisible by patch");
  if (search_side != 2 * template_side) fail("search side must be twice the template side");
}

template <typename T>
Linear<T> Linear<T>::zeros(std::size_t in, std::size_t out) {
  return Linear{Tensor<T>(Shape{in, out}), Tensor<T>(Shape{out})};
}

template <typename T>
Linear<T> Linear<T>::xavier(std::size_t in, std::size_t out, Rng& rng) {
  Linear l = zeros(in, out);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& w : l.weight.data) w = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
  return l;
}

template <typename T>
Linear<T> Linear<T>::xavier_no_bias(std::size_t in, std::size_t out, Rng& rng) {
  Linear l = xavier(in, out, rng);
  l.bias = Tensor<T>();
  l.has_bias = false;
  return l;
}

template <typename T>
Linear<T> Linear<T>::identity(std::size_t dim) {
  Linear l = zeros(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) l.weight.data[i * dim + i] = T(1);
  return l;
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::make(std::size_t dim) {
  return LayerNormParams{Tensor<T>::filled(Shape{dim}, T(1)), Tensor<T>(Shape{dim})};
}

template <typename T>
EncoderBlock<T> EncoderBlock<T>::init(std::size_t dim, std::size_t heads, std::size_t mlp_ratio,
                                      Rng& rng) {
  EncoderBlock b;
  b.num_heads = heads;
  b.norm1 = LayerNormParams<T>::make(dim);
  b.q = Linear<T>::xavier(dim, dim, rng);
  b.k = Linear<T>::xavier_no_bias(dim, dim, rng);
  b.v = Linear<T>::xavier(dim, dim, rng);
  b.proj = Linear<T>::xavier(dim, dim, rng);
  b.norm2 = LayerNormParams<T>::make(dim);
  b.fc1 = Linear<T>::xavier(dim, dim * mlp_ratio, rng);
  b.fc2 = Linear<T>::xavier(dim * mlp_ratio, dim, rng);
  return b;
}

namespace {

template <typename T>
Tensor<T> normal_table(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
TrackerModel<T> TrackerModel<T>::init(const TrackerConfig& config, Rng& rng) {
  config.validate();
  TrackerModel m;
  m.config = config;
  const std::size_t d = config.embed_dim;
  m.embed.patch = Linear<T>::xavier(config.patch_size * config.patch_size, d, rng);
  m.embed.pos_z = normal_table<T>(Shape{config.template_tokens(), d}, 0.02, rng);
  m.embed.pos_x = normal_table<T>(Shape{config.num_cells(), d}, 0.02, rng);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    m.blocks.push_back(EncoderBlock<T>::init(d, config.num_heads, config.mlp_ratio, rng));
  }
  m.decoder.norm = LayerNormParams<T>::make(d);
  m.decoder.score = Linear<T>::xavier_no_bias(d, 1, rng);
  m.decoder.offset = Linear<T>::xavier(d, 2, rng);
  return m;
}

template <typename T>
void TrackerModel<T>::set_requires_grad(bool on) {
  visit_parameters([on](const std::string&, Tensor<T>& t) {
    t.requires_grad = on;
    if (on) t.enable_grad();
  });
}

template <typename T>
void TrackerModel<T>::zero_grad() {
  visit_parameters([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template <typename T>
std::uint64_t TrackerModel<T>::checksum() const {
  std::uint64_t h = 0;
  visit_parameters([&h](const std::string&, const Tensor<T>& t) {
    h = mix64(h ^ ctrack::checksum(t));
  });
  return h;
}

template <typename T>
Var patch_embed(Graph<T>& g, Embedding<T>& embed, const TrackerConfig& config,
                const Tensor<T>& images, ImageKind which) {
  const std::size_t side =
      which == ImageKind::kTemplate ? config.template_side : config.search_side;
  if (images.rank() != 3 || images.shape[1] != side || images.shape[2] != side) {
    throw ShapeError("patch_embed", images.shape, Shape{images.rank() ? images.shape[0] : 0, side, side});
  }
  const std::size_t p = config.patch_size;
  const std::size_t n = side / p;
  const std::size_t batch = images.shape[0];
  Tensor<T> patches(Shape{batch, n * n, p * p});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        T* dst = patches.data.data() + ((b * n * n) + r * n + c) * p * p;
        for (std::size_t i = 0; i < p; ++i) {
          const T* src = images.data.data() + (b * side + r * p + i) * side + c * p;
          std::copy_n(src, p, dst + i * p);
        }
      }
    }
  }
  Var tokens = linear(g, g.constant(std::move(patches)), embed.patch);
  Tensor<T>& pos = which == ImageKind::kTemplate ? embed.pos_z : embed.pos_x;
  return add(g, tokens, g.param(pos));
}

template <typename T>
Var linear(Graph<T>& g, Var x, Linear<T>& layer) {
  Var y = matmul(g, x, g.param(layer.weight));
  return layer.has_bias ? add(g, y, g.param(layer.bias)) : y;
}

template <typename T>
Var block_forward(Graph<T>& g, EncoderBlock<T>& block, Var h) {
  const Shape& s = g.shape(h);
  if (s.size() != 3 || s[2] != block.dim()) {
    throw ShapeError("stage_forward", s, Shape{block.dim()});
  }
  const std::size_t batch = s[0], tokens = s[1], dim = s[2];
  const std::size_t heads = block.num_heads, dh = dim / heads;

  Var a = layer_norm(g, h, g.param(block.norm1.gamma), g.param(block.norm1.beta));
  auto split = [&](Var t) { return swap_axes12(g, reshape(g, t, Shape{batch, tokens, heads, dh})); };
  Var q = split(linear(g, a, block.q));
  Var k = split(linear(g, a, block.k));
  Var v = split(linear(g, a, block.v));
  Var att = softmax_last_dim(g, scale(g, matmul(g, q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))));
  Var o = reshape(g, swap_axes12(g, matmul(g, att, v)), Shape{batch, tokens, dim});
  h = add(g, h, linear(g, o, block.proj));

  Var m = layer_norm(g, h, g.param(block.norm2.gamma), g.param(block.norm2.beta));
  m = linear(g, gelu(g, linear(g, m, block.fc1)), block.fc2);
  return add(g, h, m);
}

template <typename T>
Var stage_forward(Graph<T>& g, std::span<EncoderBlock<T>* const> layers, Var h) {
  for (EncoderBlock<T>* blk : layers) h = block_forward(g, *blk, h);
  return h;
}

template <typename T>
Var stage_forward(Graph<T>& g, TrackerModel<T>& model, LayerRange range, Var h) {
  if (range.end > model.blocks.size() || range.begin > range.end) {
    throw std::invalid_argument("stage_forward: layer range [" + std::to_string(range.begin) +
                                ", " + std::to_string(range.end) + ") outside model of " +
                                std::to_string(model.blocks.size()) + " layers");
  }
  for (std::size_t i = range.begin; i < range.end; ++i) h = block_forward(g, model.blocks[i], h);
  return h;
}

template <typename T>
Var embed_pair(Graph<T>& g, TrackerModel<T>& model, const Tensor<T>& z, const Tensor<T>& x) {
  Var zt = patch_embed(g, model.embed, model.config, z, ImageKind::kTemplate);
  Var xt = patch_embed(g, model.embed, model.config, x, ImageKind::kSearch);
  return concat_tokens(g, zt, xt);
}

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& scores) {
  const std::size_t cols = scores.dim(-1);
  const std::size_t rows = scores.numel() / cols;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = scores.data.data() + r * cols;
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[r] = best;
  }
  return out;
}

template <typename T>
Prediction<T> decode(Graph<T>& g, Decoder<T>& decoder, const TrackerConfig& config, Var tokens) {
  const Shape& s = g.shape(tokens);
  if (s.size() != 3 || s[1] != config.num_tokens()) {
    throw ShapeError("decode", s, Shape{s.empty() ? 0 : s[0], config.num_tokens(), config.embed_dim});
  }
  const std::size_t batch = s[0];
  const std::size_t cells = config.num_cells();
  Var search = slice_tokens(g, tokens, config.template_tokens(), cells);
  Var h = layer_norm(g, search, g.param(decoder.norm.gamma), g.param(decoder.norm.beta));
  Prediction<T> p;
  p.score = reshape(g, linear(g, h, decoder.score), Shape{batch, cells});
  p.offset_map = sigmoid(g, linear(g, h, decoder.offset));
  p.cells = argmax_rows(g.value(p.score));
  const Tensor<T>& om = g.value(p.offset_map);
  p.offset = Tensor<T>(Shape{batch, 2});
  for (std::size_t b = 0; b < batch; ++b) {
    p.offset.data[b * 2] = om.data[(b * cells + p.cells[b]) * 2];
    p.offset.data[b * 2 + 1] = om.data[(b * cells + p.cells[b]) * 2 + 1];
  }
  return p;
}

template <typename T>
ForwardResult<T> forward_full(Graph<T>& g, TrackerModel<T>& model, const Tensor<T>& z,
                              const Tensor<T>& x, std::optional<std::span<const LayerRange>> stages) {
  ForwardResult<T> r;
  Var h = embed_pair(g, model, z, x);
  r.embedded = h;
  if (stages) {
    std::size_t next = 0;
    for (const LayerRange& range : *stages) {
      if (range.begin != next || range.end < range.begin) {
        throw std::invalid_argument("forward_full: stage ranges do not partition the model layers");
      }
      next = range.end;
    }
    if (next != model.blocks.size()) {
      throw std::invalid_argument("forward_full: stage ranges cover " + std::to_string(next) +
                                  " layers but the model has " +
                                  std::to_string(model.blocks.size()));
    }
    for (const LayerRange& range : *stages) {
      h = stage_forward(g, model, range, h);
      r.snapshots.push_back(h);
    }
  } else {
    h = stage_forward(g, model, LayerRange{0, model.blocks.size()}, h);
  }
  r.tokens = h;
  r.prediction = decode(g, model.decoder, model.config, h);
  return r;
}

#define CTRACK_INSTANTIATE(T)                                                                  \
  template struct Linear<T>;                                                                   \
  template struct LayerNormParams<T>;                                                          \
  template struct EncoderBlock<T>;                                                             \
  template struct TrackerModel<T>;                                                             \
  template Var patch_embed(Graph<T>&, Embedding<T>&, const TrackerConfig&, const Tensor<T>&,  \
                           ImageKind);                                                         \
  template Var linear(Graph<T>&, Var, Linear<T>&);                                             \
  template Var block_forward(Graph<T>&, EncoderBlock<T>&, Var);                                \
  template Var stage_forward(Graph<T>&, std::span<EncoderBlock<T>* const>, Var);               \
  template Var stage_forward(Graph<T>&, TrackerModel<T>&, LayerRange, Var);                    \
  template Var embed_pair(Graph<T>&, TrackerModel<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Prediction<T> decode(Graph<T>&, Decoder<T>&, const TrackerConfig&, Var);            \
  template ForwardResult<T> forward_full(Graph<T>&, TrackerModel<T>&, const Tensor<T>&,        \
                                         const Tensor<T>&,                                     \
                                         std::optional<std::span<const LayerRange>>);          \
  template std::vector<std::size_t> argmax_rows(const Tensor<T>&);

CTRACK_INSTANTIATE(float)
CTRACK_INSTANTIATE(double)

#undef CTRACK_INSTANTIATE

}  // namespace ctrack
