#include "ldeprompt/backbone.hpp"

#include <cmath>
#include <sstream>

#include "ldeprompt/random.hpp"

namespace ldep {

void BackboneConfig::validate() const {
  std::ostringstream err;
  if (num_layers <= 0) err << "backbone.num_layers must be positive; ";
  if (embed_dim <= 0) err << "backbone.embed_dim must be positive; ";
  if (num_heads <= 0) err << "backbone.num_heads must be positive; ";
  if (embed_dim > 0 && num_heads > 0 && embed_dim % num_heads != 0) {
    err << "backbone.embed_dim (" << embed_dim << ") must be divisible by num_heads (" << num_heads << "); ";
  }
  if (image_side <= 0) err << "backbone.image_side must be positive; ";
  if (patch_side <= 0) err << "backbone.patch_side must be positive; ";
  if (image_side > 0 && patch_side > 0 && image_side % patch_side != 0) {
    err << "backbone.patch_side (" << patch_side << ") must divide image_side (" << image_side << "); ";
  }
  if (channels <= 0) err << "backbone.channels must be positive; ";
  if (prefix_len <= 0) err << "pool.prefix_len must be positive; ";
  if (!(mlp_ratio > 0)) err << "backbone.mlp_ratio must be positive; ";
  if (!err.str().empty()) throw ConfigError(err.str());
}

int BackboneConfig::mlp_hidden() const {
  return std::max(1, static_cast<int>(std::lround(mlp_ratio * embed_dim)));
}

namespace {

template <typename Scalar>
Tensor<Scalar> to_2d(Tape<Scalar>& tape, const Tensor<Scalar>& t, Index d) {
  return reshape(tape, t, Shape{t.size() / d, d});
}

template <typename Scalar>
void check_prefix(const Prefix<Scalar>& prefix, Index embed_dim) {
  const Shape& k = prefix.keys.shape();
  const Shape& v = prefix.values.shape();
  if (k.size() != 2 || k != v || k[1] != embed_dim) {
    throw ShapeError("prefix P^K " + to_string(k) + " / P^V " + to_string(v) + " must both be l_p x " +
                     std::to_string(embed_dim));
  }
}

// Attention over the folded [B*T x D] representation.
template <typename Scalar>
Tensor<Scalar> attention_folded(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index batch, Index seq,
                                const Prefix<Scalar>* prefix, const AttentionWeights<Scalar>& w, int num_heads,
                                std::vector<Tensor<Scalar>>* maps) {
  const Index d = x.cols();
  const Index dh = d / num_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  const auto q = matmul(tape, x, w.wq);
  const auto k = matmul(tape, x, w.wk);
  const auto v = matmul(tape, x, w.wv);
  Tensor<Scalar> pk, pv;
  if (prefix) {
    check_prefix(*prefix, d);
    pk = matmul(tape, prefix->keys, w.wk);
    pv = matmul(tape, prefix->values, w.wv);
  }

  std::vector<Tensor<Scalar>> outputs;
  outputs.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    const auto qb = slice_rows(tape, q, b * seq, seq);
    auto kb = slice_rows(tape, k, b * seq, seq);
    auto vb = slice_rows(tape, v, b * seq, seq);
    if (prefix) {
      const std::vector<Tensor<Scalar>> kparts{pk, kb}, vparts{pv, vb};
      kb = concat_rows<Scalar>(tape, kparts);
      vb = concat_rows<Scalar>(tape, vparts);
    }
    std::vector<Tensor<Scalar>> heads;
    heads.reserve(static_cast<std::size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
      const auto qh = slice_cols(tape, qb, h * dh, dh);
      const auto kh = slice_cols(tape, kb, h * dh, dh);
      const auto vh = slice_cols(tape, vb, h * dh, dh);
      const auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
      const auto attn = softmax_rows(tape, scores);
      if (maps) maps->push_back(attn);
      heads.push_back(matmul(tape, attn, vh));
    }
    outputs.push_back(concat_cols<Scalar>(tape, heads));
  }
  const auto merged = concat_rows<Scalar>(tape, outputs);
  return add_bias(tape, matmul(tape, merged, w.wo), w.bo);
}

template <typename Scalar>
Tensor<Scalar> block_folded(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index batch, Index seq,
                            const BlockWeights<Scalar>& w, const Prefix<Scalar>* prefix, int num_heads) {
  std::vector<Tensor<Scalar>>* no_maps = nullptr;
  const auto h1 = layer_norm(tape, x, w.norm1_gain, w.norm1_bias);
  const auto attended = add(tape, x, attention_folded(tape, h1, batch, seq, prefix, w.attention, num_heads, no_maps));
  const auto h2 = layer_norm(tape, attended, w.norm2_gain, w.norm2_bias);
  const auto hidden = gelu(tape, add_bias(tape, matmul(tape, h2, w.fc1), w.fc1_bias));
  const auto mlp = add_bias(tape, matmul(tape, hidden, w.fc2), w.fc2_bias);
  return add(tape, attended, mlp);
}

// Mean over the patch tokens (positions 1..T-1) of each sample; no gradient.
template <typename Scalar>
Tensor<Scalar> pool_patches(const Tensor<Scalar>& x, Index batch, Index seq) {
  Tensor<Scalar> out({batch, x.cols()});
  const auto m = x.matrix();
  for (Index b = 0; b < batch; ++b) {
    out.matrix().row(b) = m.middleRows(b * seq + 1, seq - 1).colwise().mean();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  fill_normal(t.value(), static_cast<Scalar>(stddev), rng);
  return t;
}

template <typename Scalar>
Tensor<Scalar> constant_tensor(Shape shape, Scalar v) {
  Tensor<Scalar> t(std::move(shape));
  t.value().setConstant(v);
  return t;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> attention_with_prefix(Tape<Scalar>& tape, const Tensor<Scalar>& z, const Prefix<Scalar>* prefix,
                                     const AttentionWeights<Scalar>& weights, int num_heads,
                                     std::vector<Tensor<Scalar>>* attention_maps) {
  if (z.rank() != 3) throw ShapeError("attention_with_prefix expects [B x T x D], got " + to_string(z.shape()));
  const Index d = z.shape()[2];
  if (num_heads <= 0 || d % num_heads != 0) {
    throw ShapeError("embed dim " + std::to_string(d) + " not divisible into " + std::to_string(num_heads) + " heads");
  }
  const auto x = to_2d(tape, z, d);
  const auto y = attention_folded(tape, x, z.shape()[0], z.shape()[1], prefix, weights, num_heads, attention_maps);
  return reshape(tape, y, z.shape());
}

template <typename Scalar>
Backbone<Scalar>::Backbone(BackboneConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, "backbone"));
  const Index d = config_.embed_dim;
  const Index hidden = config_.mlp_hidden();
  const auto inv_sqrt = [](Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  patch_proj_ = normal_tensor<Scalar>({config_.patch_dim(), d}, inv_sqrt(config_.patch_dim()), rng);
  patch_bias_ = Tensor<Scalar>({d});
  cls_token_ = normal_tensor<Scalar>({1, d}, 1.0, rng);
  pos_embed_ = normal_tensor<Scalar>({config_.seq_len(), d}, 0.1, rng);
  blocks_.resize(static_cast<std::size_t>(config_.num_layers));
  for (auto& b : blocks_) {
    b.norm1_gain = constant_tensor<Scalar>({d}, Scalar(1));
    b.norm1_bias = Tensor<Scalar>({d});
    b.attention.wq = normal_tensor<Scalar>({d, d}, inv_sqrt(d), rng);
    b.attention.wk = normal_tensor<Scalar>({d, d}, inv_sqrt(d), rng);
    b.attention.wv = normal_tensor<Scalar>({d, d}, inv_sqrt(d), rng);
    b.attention.wo = normal_tensor<Scalar>({d, d}, inv_sqrt(d), rng);
    b.attention.bo = Tensor<Scalar>({d});
    b.norm2_gain = constant_tensor<Scalar>({d}, Scalar(1));
    b.norm2_bias = Tensor<Scalar>({d});
    b.fc1 = normal_tensor<Scalar>({d, hidden}, inv_sqrt(d), rng);
    b.fc1_bias = Tensor<Scalar>({hidden});
    b.fc2 = normal_tensor<Scalar>({hidden, d}, inv_sqrt(hidden), rng);
    b.fc2_bias = Tensor<Scalar>({d});
  }
  final_gain_ = constant_tensor<Scalar>({d}, Scalar(1));
  final_bias_ = Tensor<Scalar>({d});
}

template <typename Scalar>
Tensor<Scalar> Backbone<Scalar>::patch_embed(Tape<Scalar>& tape, const Tensor<Scalar>& images) const {
  const Index side = config_.image_side;
  const Index ch = config_.channels;
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != side || s[2] != side || s[3] != ch) {
    throw ShapeError("patch_embed expects [B x " + std::to_string(side) + " x " + std::to_string(side) + " x " +
                     std::to_string(ch) + "], got " + to_string(s));
  }
  const Index batch = s[0];
  const Index p = config_.patch_side;
  const Index per_side = config_.patches_per_side();
  const Index n = config_.num_patches();
  const Index d = config_.embed_dim;

  // Patch vectors are laid out (row-in-patch, col-in-patch, channel).
  RowMatrix<Scalar> patches(batch * n, config_.patch_dim());
  const Scalar* px = images.value().data();
  for (Index b = 0; b < batch; ++b) {
    for (Index py = 0; py < per_side; ++py) {
      for (Index pxi = 0; pxi < per_side; ++pxi) {
        Scalar* dst = patches.row(b * n + py * per_side + pxi).data();
        for (Index dy = 0; dy < p; ++dy) {
          const Scalar* src = px + ((b * side + py * p + dy) * side + pxi * p) * ch;
          std::copy(src, src + p * ch, dst + dy * p * ch);
        }
      }
    }
  }
  const auto embedded =
      add_bias(tape, matmul(tape, Tensor<Scalar>::from_matrix(patches), patch_proj_), patch_bias_);
  std::vector<Tensor<Scalar>> sequences;
  sequences.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    const std::vector<Tensor<Scalar>> parts{cls_token_, slice_rows(tape, embedded, b * n, n)};
    sequences.push_back(add(tape, concat_rows<Scalar>(tape, parts), pos_embed_));
  }
  return reshape(tape, concat_rows<Scalar>(tape, sequences), Shape{batch, n + 1, d});
}

template <typename Scalar>
Tensor<Scalar> Backbone<Scalar>::block(Tape<Scalar>& tape, const Tensor<Scalar>& tokens, int layer,
                                       const Prefix<Scalar>* prefix) const {
  if (layer < 0 || layer >= config_.num_layers) {
    throw ContractError("block index " + std::to_string(layer) + " outside [0, " +
                        std::to_string(config_.num_layers) + ")");
  }
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[2] != config_.embed_dim) {
    throw ShapeError("block expects [B x T x " + std::to_string(config_.embed_dim) + "], got " + to_string(s));
  }
  if (prefix && prefix->keys.rows() != config_.prefix_len) {
    throw ShapeError("prefix length " + std::to_string(prefix->keys.rows()) + " != configured " +
                     std::to_string(config_.prefix_len));
  }
  const auto x = to_2d(tape, tokens, config_.embed_dim);
  const auto y = block_folded(tape, x, s[0], s[1], blocks_[static_cast<std::size_t>(layer)], prefix, config_.num_heads);
  return reshape(tape, y, s);
}

template <typename Scalar>
ForwardTrace<Scalar> Backbone<Scalar>::run(Tape<Scalar>& tape, const Tensor<Scalar>& images,
                                           const PrefixSet<Scalar>& prefixes, const Tensor<Scalar>* classifier) const {
  for (const auto& [layer, prefix] : prefixes) {
    if (layer < 0 || layer >= config_.num_layers) {
      throw ContractError("prefix at layer " + std::to_string(layer) + " but the backbone has " +
                          std::to_string(config_.num_layers) + " layers");
    }
    check_prefix(prefix, config_.embed_dim);
    if (prefix.keys.rows() != config_.prefix_len) {
      throw ShapeError("prefix length " + std::to_string(prefix.keys.rows()) + " != configured " +
                       std::to_string(config_.prefix_len));
    }
  }
  if (classifier && (classifier->rank() != 2 || classifier->rows() != config_.embed_dim)) {
    throw ShapeError("classifier must be " + std::to_string(config_.embed_dim) + " x C, got " +
                     to_string(classifier->shape()));
  }
  const Index batch = images.shape().at(0);
  const Index seq = config_.seq_len();
  const Index d = config_.embed_dim;

  ForwardTrace<Scalar> trace;
  auto x = to_2d(tape, patch_embed(tape, images), d);
  trace.embed_pooled = pool_patches(x, batch, seq);

  std::vector<Index> cls_rows(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) cls_rows[static_cast<std::size_t>(b)] = b * seq;

  for (int l = 0; l < config_.num_layers; ++l) {
    const auto it = prefixes.find(l);
    const Prefix<Scalar>* prefix = it == prefixes.end() ? nullptr : &it->second;
    x = block_folded(tape, x, batch, seq, blocks_[static_cast<std::size_t>(l)], prefix, config_.num_heads);
    trace.cls_per_layer.push_back(gather_rows<Scalar>(tape, x, cls_rows));
    trace.pooled_per_layer.push_back(pool_patches(x, batch, seq));
  }
  if (classifier) {
    const auto normed = layer_norm(tape, trace.cls_per_layer.back(), final_gain_, final_bias_);
    trace.logits = matmul(tape, normed, *classifier);
  }
  return trace;
}

template <typename Scalar>
ForwardTrace<Scalar> Backbone<Scalar>::forward(Tape<Scalar>& tape, const Tensor<Scalar>& images,
                                               const PrefixSet<Scalar>& prefixes,
                                               const Tensor<Scalar>& classifier) const {
  return run(tape, images, prefixes, &classifier);
}

template <typename Scalar>
ForwardTrace<Scalar> Backbone<Scalar>::features(Tape<Scalar>& tape, const Tensor<Scalar>& images,
                                                const PrefixSet<Scalar>& prefixes) const {
  return run(tape, images, prefixes, nullptr);
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Backbone<Scalar>::parameters() const {
  std::vector<Tensor<Scalar>> out{patch_proj_, patch_bias_, cls_token_, pos_embed_};
  for (const auto& b : blocks_) {
    out.insert(out.end(), {b.norm1_gain, b.norm1_bias, b.attention.wq, b.attention.wk, b.attention.wv,
                           b.attention.wo, b.attention.bo, b.norm2_gain, b.norm2_bias, b.fc1, b.fc1_bias, b.fc2,
                           b.fc2_bias});
  }
  out.push_back(final_gain_);
  out.push_back(final_bias_);
  return out;
}

template <typename Scalar>
void Backbone<Scalar>::set_requires_grad(bool flag) {
  for (auto& t : parameters()) t.set_requires_grad(flag);
}

template <typename Scalar>
Tensor<Scalar> make_image_batch(const Eigen::Ref<const RowMatrix<float>>& rows, int side, int channels) {
  const Index expected = static_cast<Index>(side) * side * channels;
  if (rows.cols() != expected) {
    throw ShapeError("image rows have " + std::to_string(rows.cols()) + " values, expected " +
                     std::to_string(expected));
  }
  Tensor<Scalar> out({rows.rows(), side, side, channels});
  Eigen::Map<RowMatrix<Scalar>>(out.value().data(), rows.rows(), rows.cols()) = rows.template cast<Scalar>();
  return out;
}

#define LDEP_INSTANTIATE_BACKBONE(S)                                                                          \
  template class Backbone<S>;                                                                                 \
  template Tensor<S> attention_with_prefix(Tape<S>&, const Tensor<S>&, const Prefix<S>*,                     \
                                           const AttentionWeights<S>&, int, std::vector<Tensor<S>>*);         \
  template Tensor<S> make_image_batch<S>(const Eigen::Ref<const RowMatrix<float>>&, int, int);

LDEP_INSTANTIATE_BACKBONE(float)
LDEP_INSTANTIATE_BACKBONE(double)

#undef LDEP_INSTANTIATE_BACKBONE

}  // namespace ldep
