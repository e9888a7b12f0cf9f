#pragma once

// Compact pre-norm vision transformer with prefix injection into the key and
// value streams of selected attention layers.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "ldeprompt/tensor.hpp"

namespace ldep {

struct BackboneConfig {
  int num_layers = 6;
  int embed_dim = 64;
  int num_heads = 4;
  int image_side = 32;
  int patch_side = 8;
  int channels = 3;
  int prefix_len = 4;
  double mlp_ratio = 2.0;

  // Throws ConfigError listing every violated constraint.
  void validate() const;

  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int seq_len() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const;
  int patch_dim() const { return patch_side * patch_side * channels; }
};

// Learned prefix P^K, P^V for one layer, both prefix_len x embed_dim.
template <typename Scalar>
struct Prefix {
  Tensor<Scalar> keys;
  Tensor<Scalar> values;
};

template <typename Scalar>
using PrefixSet = std::map<int, Prefix<Scalar>>;

template <typename Scalar>
struct AttentionWeights {
  Tensor<Scalar> wq, wk, wv, wo;  // D x D; head h owns columns [h*dh, (h+1)*dh)
  Tensor<Scalar> bo;              // D
};

template <typename Scalar>
struct BlockWeights {
  Tensor<Scalar> norm1_gain, norm1_bias;
  AttentionWeights<Scalar> attention;
  Tensor<Scalar> norm2_gain, norm2_bias;
  Tensor<Scalar> fc1, fc1_bias;  // D x hidden, hidden
  Tensor<Scalar> fc2, fc2_bias;  // hidden x D, D
};

template <typename Scalar>
struct ForwardTrace {
  Tensor<Scalar> logits;                       // B x C
  std::vector<Tensor<Scalar>> cls_per_layer;   // L entries of B x D
  std::vector<Tensor<Scalar>> pooled_per_layer;  // L entries of B x D, mean over patch tokens
  Tensor<Scalar> embed_pooled;                 // B x D, pooled patch-embed output (h_0)
};

// Multi-head attention on z [B x T x D]. When a prefix is given, every head
// attends over concat(P^K W_K^h, Z W_K^h) keys and concat(P^V W_V^h, Z W_V^h)
// values; queries come from z only so the output keeps T positions.
// If attention_maps is non-null it receives the B*H softmax matrices.
template <typename Scalar>
Tensor<Scalar> attention_with_prefix(Tape<Scalar>& tape, const Tensor<Scalar>& z, const Prefix<Scalar>* prefix,
                                     const AttentionWeights<Scalar>& weights, int num_heads,
                                     std::vector<Tensor<Scalar>>* attention_maps = nullptr);

template <typename Scalar>
class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }

  // images [B x side x side x channels] -> tokens [B x (N+1) x D], CLS at position 0.
  Tensor<Scalar> patch_embed(Tape<Scalar>& tape, const Tensor<Scalar>& images) const;

  // One pre-norm transformer block on tokens [B x T x D].
  Tensor<Scalar> block(Tape<Scalar>& tape, const Tensor<Scalar>& tokens, int layer,
                       const Prefix<Scalar>* prefix) const;

  // classifier is D x C; logits = norm(final CLS) * classifier.
  ForwardTrace<Scalar> forward(Tape<Scalar>& tape, const Tensor<Scalar>& images, const PrefixSet<Scalar>& prefixes,
                               const Tensor<Scalar>& classifier) const;

  // Same pass without a classifier; trace.logits stays undefined.
  ForwardTrace<Scalar> features(Tape<Scalar>& tape, const Tensor<Scalar>& images,
                                const PrefixSet<Scalar>& prefixes) const;

  // Every weight tensor in a fixed order (for checksums and serialization).
  std::vector<Tensor<Scalar>> parameters() const;
  void set_requires_grad(bool flag);

  BlockWeights<Scalar>& block_weights(int layer) { return blocks_.at(static_cast<std::size_t>(layer)); }
  const BlockWeights<Scalar>& block_weights(int layer) const { return blocks_.at(static_cast<std::size_t>(layer)); }

 private:
  ForwardTrace<Scalar> run(Tape<Scalar>& tape, const Tensor<Scalar>& images, const PrefixSet<Scalar>& prefixes,
                           const Tensor<Scalar>* classifier) const;

  BackboneConfig config_;
  Tensor<Scalar> patch_proj_, patch_bias_, cls_token_, pos_embed_;
  std::vector<BlockWeights<Scalar>> blocks_;
  Tensor<Scalar> final_gain_, final_bias_;
};

// Converts row-major sample rows (each side*side*channels pixels) into an image batch tensor.
template <typename Scalar>
Tensor<Scalar> make_image_batch(const Eigen::Ref<const RowMatrix<float>>& rows, int side, int channels);

}  // namespace ldep
