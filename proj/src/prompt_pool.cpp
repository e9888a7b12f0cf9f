#include "ldeprompt/prompt_pool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldeprompt/random.hpp"

namespace ldep {

template <typename Scalar>
void GlobalPool<Scalar>::append(PromptEntry<Scalar> entry) {
  if (entry.layer_id < 0) throw ContractError("prompt entry with negative layer id");
  layers_[entry.layer_id].push_back(std::move(entry));
}

template <typename Scalar>
std::span<const PromptEntry<Scalar>> GlobalPool<Scalar>::layer(int layer_id) const {
  const auto it = layers_.find(layer_id);
  if (it == layers_.end()) return {};
  return it->second;
}

template <typename Scalar>
std::size_t GlobalPool<Scalar>::size(int layer_id) const {
  return layer(layer_id).size();
}

template <typename Scalar>
std::size_t GlobalPool<Scalar>::total() const {
  std::size_t n = 0;
  for (const auto& [l, entries] : layers_) n += entries.size();
  return n;
}

template <typename Scalar>
std::vector<int> GlobalPool<Scalar>::layers() const {
  std::vector<int> out;
  for (const auto& [l, entries] : layers_) {
    if (!entries.empty()) out.push_back(l);
  }
  return out;
}

template <typename Scalar>
std::map<int, std::size_t> GlobalPool<Scalar>::sizes() const {
  std::map<int, std::size_t> out;
  for (const auto& [l, entries] : layers_) out[l] = entries.size();
  return out;
}

void PoolConfig::validate() const {
  std::string err;
  if (capacity < 1) err += "pool.capacity must be >= 1; ";
  if (reuse < 0) err += "pool.reuse must be >= 0; ";
  if (capacity >= 1 && reuse >= capacity) err += "pool.reuse must be < pool.capacity; ";
  if (!err.empty()) throw ConfigError(err);
}

template <typename Scalar>
std::vector<Tensor<Scalar>> TrainingPool<Scalar>::trainable() const {
  std::vector<Tensor<Scalar>> out;
  for (const auto& [l, entries] : layers) {
    for (const auto& e : entries) {
      if (e.frozen) continue;
      out.push_back(e.p_k);
      out.push_back(e.p_v);
    }
  }
  return out;
}

template <typename Scalar>
std::size_t TrainingPool<Scalar>::fresh_count(int layer_id) const {
  const auto it = layers.find(layer_id);
  if (it == layers.end()) return 0;
  return static_cast<std::size_t>(
      std::count_if(it->second.begin(), it->second.end(), [](const auto& e) { return e.key.value().isZero(0); }));
}

template <typename Scalar>
std::vector<std::size_t> rank_by_similarity(std::span<const PromptEntry<Scalar>> entries,
                                            const Eigen::Ref<const Vector<Scalar>>& z, std::size_t s) {
  std::vector<double> sim(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) sim[i] = cosine_similarity(z, entries[i].key.value());
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  order.resize(std::min(s, order.size()));
  return order;
}

template <typename Scalar>
std::vector<PromptEntry<Scalar>> retrieve_top_s(std::span<const PromptEntry<Scalar>> entries,
                                                const Eigen::Ref<const Vector<Scalar>>& z, std::size_t s) {
  std::vector<PromptEntry<Scalar>> out;
  for (std::size_t i : rank_by_similarity(entries, z, s)) out.push_back(entries[i]);
  return out;
}

template <typename Scalar>
TrainingPool<Scalar> build_training_pool(const GlobalPool<Scalar>& global, std::span<const int> selected_layers,
                                         const std::map<int, Vector<Scalar>>& queries, const PoolConfig& config,
                                         const BackboneConfig& backbone, int task_id, std::uint64_t seed) {
  config.validate();
  TrainingPool<Scalar> pool;
  pool.capacity = config.capacity;
  pool.reuse = config.reuse;
  const Index lp = backbone.prefix_len;
  const Index d = backbone.embed_dim;
  for (int layer : selected_layers) {
    if (layer < 0 || layer >= backbone.num_layers) {
      throw ContractError("selected layer " + std::to_string(layer) + " outside the backbone");
    }
    auto& entries = pool.layers[layer];
    const auto stored = global.layer(layer);
    if (!stored.empty() && config.reuse > 0) {
      const auto q = queries.find(layer);
      if (q == queries.end()) throw ContractError("no retrieval query for layer " + std::to_string(layer));
      entries = retrieve_top_s<Scalar>(stored, q->second, static_cast<std::size_t>(config.reuse));
      for (auto& e : entries) {
        e.frozen = config.freeze_retrieved;
        e.p_k.set_requires_grad(!e.frozen);
        e.p_v.set_requires_grad(!e.frozen);
      }
    }
    Rng rng(derive_seed(seed, "fresh-prompts", static_cast<std::uint64_t>(layer)));
    while (static_cast<int>(entries.size()) < config.capacity) {
      PromptEntry<Scalar> e;
      e.key = Tensor<Scalar>({d});
      e.p_k = Tensor<Scalar>({lp, d}, true);
      e.p_v = Tensor<Scalar>({lp, d}, true);
      fill_normal(e.p_k.value(), static_cast<Scalar>(kPromptInitStd), rng);
      fill_normal(e.p_v.value(), static_cast<Scalar>(kPromptInitStd), rng);
      e.frozen = false;
      e.task_id = task_id;
      e.layer_id = layer;
      entries.push_back(std::move(e));
    }
  }
  return pool;
}

template <typename Scalar>
std::vector<Scalar> merge_weights(std::span<const PromptEntry<Scalar>> entries, const Vector<Scalar>* z,
                                  MergeMode mode) {
  if (entries.empty()) throw ContractError("merge_prompts on an empty entry list");
  const std::size_t n = entries.size();
  if (mode == MergeMode::Training) return std::vector<Scalar>(n, Scalar(1) / static_cast<Scalar>(n));
  if (!z) throw ContractError("inference-mode merge needs a query feature");
  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i) sim[i] = cosine_similarity(*z, entries[i].key.value());
  const double m = *std::max_element(sim.begin(), sim.end());
  double total = 0.0;
  for (double& v : sim) {
    v = std::exp(v - m);
    total += v;
  }
  std::vector<Scalar> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = static_cast<Scalar>(sim[i] / total);
  return w;
}

template <typename Scalar>
Prefix<Scalar> merge_prompts(Tape<Scalar>& tape, std::span<const PromptEntry<Scalar>> entries,
                             const Vector<Scalar>* z, MergeMode mode) {
  const auto w = merge_weights(entries, z, mode);
  std::vector<Tensor<Scalar>> keys, values;
  keys.reserve(entries.size());
  values.reserve(entries.size());
  for (const auto& e : entries) {
    keys.push_back(e.p_k);
    values.push_back(e.p_v);
  }
  return Prefix<Scalar>{linear_combination<Scalar>(tape, keys, w), linear_combination<Scalar>(tape, values, w)};
}

template <typename Scalar>
void finalize_task(TrainingPool<Scalar>&& training, GlobalPool<Scalar>& global,
                   const std::map<int, Vector<Scalar>>& mean_cls) {
  // Validate every key before touching the global pool.
  for (const auto& [layer, entries] : training.layers) {
    const auto it = mean_cls.find(layer);
    if (it == mean_cls.end()) throw ContractError("no mean CLS feature for layer " + std::to_string(layer));
    if (it->second.size() != entries.front().key.size() || it->second.norm() == Scalar(0)) {
      throw ContractError("degenerate prompt key for layer " + std::to_string(layer));
    }
  }
  for (auto& [layer, entries] : training.layers) {
    const auto& key = mean_cls.at(layer);
    for (auto& e : entries) {
      const bool fresh = e.key.value().isZero(0);
      e.p_k.set_requires_grad(false);
      e.p_v.set_requires_grad(false);
      e.p_k.clear_grad();
      e.p_v.clear_grad();
      if (!fresh) continue;
      e.key.value() = key;
      e.frozen = true;
      global.append(std::move(e));
    }
  }
  training.layers.clear();
}

template <typename Scalar>
std::vector<PrefixSet<Scalar>> query_inference(const GlobalPool<Scalar>& global, const Backbone<Scalar>& backbone,
                                               const Tensor<Scalar>& images, int capacity) {
  if (global.empty()) throw ContractError("query_inference on an empty global pool");
  Tape<Scalar> tape;
  const auto trace = backbone.features(tape, images, {});
  const Index batch = images.shape().at(0);
  std::vector<PrefixSet<Scalar>> out(static_cast<std::size_t>(batch));
  for (int layer : global.layers()) {
    const auto stored = global.layer(layer);
    const auto& cls = trace.cls_per_layer.at(static_cast<std::size_t>(layer));
    const std::size_t s = std::min<std::size_t>(static_cast<std::size_t>(capacity), stored.size());
    for (Index b = 0; b < batch; ++b) {
      const Vector<Scalar> z = cls.matrix().row(b).transpose();
      const auto picked = retrieve_top_s<Scalar>(stored, z, s);
      Tape<Scalar> merge_tape;
      auto prefix = merge_prompts<Scalar>(merge_tape, picked, &z, MergeMode::Inference);
      out[static_cast<std::size_t>(b)][layer] = Prefix<Scalar>{prefix.keys.detach(), prefix.values.detach()};
    }
  }
  return out;
}

#define LDEP_INSTANTIATE_POOL(S)                                                                                  \
  template class GlobalPool<S>;                                                                                   \
  template struct TrainingPool<S>;                                                                                \
  template std::vector<std::size_t> rank_by_similarity(std::span<const PromptEntry<S>>,                           \
                                                       const Eigen::Ref<const Vector<S>>&, std::size_t);          \
  template std::vector<PromptEntry<S>> retrieve_top_s(std::span<const PromptEntry<S>>,                            \
                                                      const Eigen::Ref<const Vector<S>>&, std::size_t);           \
  template TrainingPool<S> build_training_pool(const GlobalPool<S>&, std::span<const int>,                        \
                                               const std::map<int, Vector<S>>&, const PoolConfig&,                \
                                               const BackboneConfig&, int, std::uint64_t);                        \
  template std::vector<S> merge_weights(std::span<const PromptEntry<S>>, const Vector<S>*, MergeMode);            \
  template Prefix<S> merge_prompts(Tape<S>&, std::span<const PromptEntry<S>>, const Vector<S>*, MergeMode);       \
  template void finalize_task(TrainingPool<S>&&, GlobalPool<S>&, const std::map<int, Vector<S>>&);                \
  template std::vector<PrefixSet<S>> query_inference(const GlobalPool<S>&, const Backbone<S>&, const Tensor<S>&,  \
                                                     int);

LDEP_INSTANTIATE_POOL(float)
LDEP_INSTANTIATE_POOL(double)

#undef LDEP_INSTANTIATE_POOL

}  // namespace ldep
