#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctrack/graph.hpp"
#include "ctrack/rng.hpp"
#include "ctrack/tensor.hpp"

namespace ctrack {

/// Architecture of a toy one-stream tracker.
struct TrackerConfig {
  std::size_t embed_dim = 64;
  std::size_t num_layers = 8;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch_size = 4;
  std::size_t template_side = 16;
  std::size_t search_side = 32;

  std::size_t grid_side() const { return search_side / patch_size; }
  std::size_t template_grid() const { return template_side / patch_size; }
  std::size_t num_cells() const { return grid_side() * grid_side(); }
  std::size_t template_tokens() const { return template_grid() * template_grid(); }
  std::size_t num_tokens() const { return template_tokens() + num_cells(); }

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  bool operator==(const TrackerConfig&) const = default;
};

/// Half-open range of encoder layer indices.
struct LayerRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const LayerRange&) const = default;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], unused when has_bias is false
  bool has_bias = true;

  static Linear zeros(std::size_t in, std::size_t out);
  static Linear xavier(std::size_t in, std::size_t out, Rng& rng);
  /// For outputs feeding a softmax where a bias would shift every logit equally.
  static Linear xavier_no_bias(std::size_t in, std::size_t out, Rng& rng);
  static Linear identity(std::size_t dim);
  std::size_t in_dim() const { return weight.shape[0]; }
  std::size_t out_dim() const { return weight.shape[1]; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (has_bias) f(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNormParams make(std::size_t dim);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

/// Pre-norm transformer layer: h + attn(ln1(h)), then h + mlp(ln2(h)).
template <typename T>
struct EncoderBlock {
  std::size_t num_heads = 1;
  LayerNormParams<T> norm1;
  Linear<T> q, k, v, proj;
  LayerNormParams<T> norm2;
  Linear<T> fc1, fc2;

  static EncoderBlock init(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng);
  std::size_t dim() const { return norm1.gamma.numel(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    q.visit(prefix + ".attn.q", f);
    k.visit(prefix + ".attn.k", f);
    v.visit(prefix + ".attn.v", f);
    proj.visit(prefix + ".attn.proj", f);
    norm2.visit(prefix + ".norm2", f);
    fc1.visit(prefix + ".mlp.fc1", f);
    fc2.visit(prefix + ".mlp.fc2", f);
  }
};

/// Patch projection plus learned positional tables.
template <typename T>
struct Embedding {
  Linear<T> patch;   // [patch*patch, dim]
  Tensor<T> pos_z;   // [template tokens, dim]
  Tensor<T> pos_x;   // [search tokens, dim]

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    patch.visit(prefix + ".patch", f);
    f(prefix + ".pos_z", pos_z);
    f(prefix + ".pos_x", pos_x);
  }
};

/// Score map over the search grid plus a squashed 2-d offset per cell.
template <typename T>
struct Decoder {
  LayerNormParams<T> norm;
  Linear<T> score;   // [dim, 1]
  Linear<T> offset;  // [dim, 2]

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + ".norm", f);
    score.visit(prefix + ".score", f);
    offset.visit(prefix + ".offset", f);
  }
};

template <typename T>
struct TrackerModel {
  TrackerConfig config;
  Embedding<T> embed;
  std::vector<EncoderBlock<T>> blocks;
  Decoder<T> decoder;

  static TrackerModel init(const TrackerConfig& config, Rng& rng);

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <typename F>
  void visit_parameters(F&& f) {
    embed.visit("embed", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("blocks." + std::to_string(i), f);
    decoder.visit("decoder", f);
  }
  template <typename F>
  void visit_parameters(F&& f) const {
    const_cast<TrackerModel*>(this)->visit_parameters(
        [&](const std::string& name, Tensor<T>& t) { f(name, static_cast<const Tensor<T>&>(t)); });
  }

  void set_requires_grad(bool on);
  void zero_grad();
  /// Hash over every parameter buffer, in visiting order.
  std::uint64_t checksum() const;
};

/// Graph-side result of decoding.
template <typename T>
struct Prediction {
  Var score;                       // [B, G] logits
  Var offset_map;                  // [B, G, 2] in (0, 1)
  std::vector<std::size_t> cells;  // argmax cell per sample, ties to the lowest index
  Tensor<T> offset;                // [B, 2] offset at the argmax cell
};

enum class ImageKind { kTemplate, kSearch };

/// images: [B, side, side] pixels. Returns [B, tokens, dim] with the
/// positional table added.
template <typename T>
Var patch_embed(Graph<T>& g, Embedding<T>& embed, const TrackerConfig& config,
                const Tensor<T>& images, ImageKind which);

template <typename T>
Var linear(Graph<T>& g, Var x, Linear<T>& layer);

template <typename T>
Var block_forward(Graph<T>& g, EncoderBlock<T>& block, Var h);

/// Applies the blocks in order; an empty list returns h unchanged.
template <typename T>
Var stage_forward(Graph<T>& g, std::span<EncoderBlock<T>* const> layers, Var h);

/// Convenience: stage_forward over model.blocks[range].
template <typename T>
Var stage_forward(Graph<T>& g, TrackerModel<T>& model, LayerRange range, Var h);

/// Embeds template and search images and concatenates [template, search].
template <typename T>
Var embed_pair(Graph<T>& g, TrackerModel<T>& model, const Tensor<T>& z, const Tensor<T>& x);

template <typename T>
Prediction<T> decode(Graph<T>& g, Decoder<T>& decoder, const TrackerConfig& config, Var tokens);

template <typename T>
struct ForwardResult {
  Var embedded;                // concatenated tokens entering the first layer
  std::vector<Var> snapshots;  // token tensor after each stage
  Var tokens;                  // final pre-decoder tokens
  Prediction<T> prediction;
};

/// Full tracker forward. When stage ranges are given they must partition
/// the model's layers; the output after each range is recorded.
template <typename T>
ForwardResult<T> forward_full(Graph<T>& g, TrackerModel<T>& model, const Tensor<T>& z,
                              const Tensor<T>& x,
                              std::optional<std::span<const LayerRange>> stages = std::nullopt);

/// Lowest-index argmax of each row of a [B, G] tensor.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& scores);

/// Copies parameters into a model of another precision (same architecture).
template <typename To, typename From>
TrackerModel<To> cast_model(const TrackerModel<From>& m) {
  Rng rng(0);
  TrackerModel<To> out = TrackerModel<To>::init(m.config, rng);
  std::vector<const Tensor<From>*> src;
  m.visit_parameters([&](const std::string&, const Tensor<From>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit_parameters([&](const std::string&, Tensor<To>& t) {
    const Tensor<From>& s = *src.at(i++);
    t.shape = s.shape;
    t.data.assign(s.data.begin(), s.data.end());
  });
  return out;
}

}  // namespace ctrack
