#pragma once

// Dual expandable prompt pool: an append-only global pool of frozen prompts and
// a fixed-capacity training pool built per task from retrieved global prompts
// plus freshly initialized trainable ones.

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ldeprompt/backbone.hpp"
#include "ldeprompt/errors.hpp"

namespace ldep {

inline constexpr double kPromptInitStd = 0.5;

// A fresh entry carries an all-zero key until finalize_task assigns one.
template <typename Scalar>
struct PromptEntry {
  Tensor<Scalar> key;  // D
  Tensor<Scalar> p_k;  // l_p x D
  Tensor<Scalar> p_v;  // l_p x D
  bool frozen = false;
  int task_id = 0;
  int layer_id = 0;
};

template <typename Scalar>
class GlobalPool {
 public:
  void append(PromptEntry<Scalar> entry);

  std::span<const PromptEntry<Scalar>> layer(int layer_id) const;
  std::size_t size(int layer_id) const;
  std::size_t total() const;
  bool empty() const { return total() == 0; }
  std::vector<int> layers() const;  // ascending, only non-empty layers
  std::map<int, std::size_t> sizes() const;

 private:
  std::map<int, std::vector<PromptEntry<Scalar>>> layers_;
};

struct PoolConfig {
  int capacity = 4;  // S
  int reuse = 2;     // s < S
  // Retrieved global entries stay frozen during training. Disabled only by the
  // no-freeze ablation.
  bool freeze_retrieved = true;

  void validate() const;
};

template <typename Scalar>
struct TrainingPool {
  int capacity = 0;
  int reuse = 0;
  std::map<int, std::vector<PromptEntry<Scalar>>> layers;

  // Prompt matrices that receive gradient updates this task.
  std::vector<Tensor<Scalar>> trainable() const;
  std::size_t fresh_count(int layer_id) const;
};

enum class MergeMode { Training, Inference };

template <typename DerivedA, typename DerivedB>
double cosine_similarity(const Eigen::MatrixBase<DerivedA>& z, const Eigen::MatrixBase<DerivedB>& k) {
  const double nz = static_cast<double>(z.norm());
  const double nk = static_cast<double>(k.norm());
  if (nz == 0.0 || nk == 0.0) throw ContractError("cosine similarity of a zero-norm vector");
  return static_cast<double>(z.dot(k)) / (nz * nk);
}

// Indices of the min(s, size) entries most similar to z, by descending cosine
// similarity; ties keep insertion order.
template <typename Scalar>
std::vector<std::size_t> rank_by_similarity(std::span<const PromptEntry<Scalar>> entries,
                                            const Eigen::Ref<const Vector<Scalar>>& z, std::size_t s);

template <typename Scalar>
std::vector<PromptEntry<Scalar>> retrieve_top_s(std::span<const PromptEntry<Scalar>> entries,
                                                const Eigen::Ref<const Vector<Scalar>>& z, std::size_t s);

// queries must hold a vector for every selected layer whose global pool is non-empty.
template <typename Scalar>
TrainingPool<Scalar> build_training_pool(const GlobalPool<Scalar>& global, std::span<const int> selected_layers,
                                         const std::map<int, Vector<Scalar>>& queries, const PoolConfig& config,
                                         const BackboneConfig& backbone, int task_id, std::uint64_t seed);

// Convex combination of the entries' prefixes: uniform in training mode,
// softmax over cosine similarity to z in inference mode.
template <typename Scalar>
Prefix<Scalar> merge_prompts(Tape<Scalar>& tape, std::span<const PromptEntry<Scalar>> entries,
                             const Vector<Scalar>* z, MergeMode mode);

// Merge weights used by merge_prompts.
template <typename Scalar>
std::vector<Scalar> merge_weights(std::span<const PromptEntry<Scalar>> entries, const Vector<Scalar>* z,
                                  MergeMode mode);

// Keys the fresh entries with the layer's mean CLS feature, freezes them and
// appends them to the global pool. Retrieved entries are not re-appended.
template <typename Scalar>
void finalize_task(TrainingPool<Scalar>&& training, GlobalPool<Scalar>& global,
                   const std::map<int, Vector<Scalar>>& mean_cls);

// Two-pass inference, first pass: promptless features, then per sample and per
// non-empty pool layer, top-min(S, size) retrieval with that layer's CLS and an
// inference-mode merge. Returns one PrefixSet per image.
template <typename Scalar>
std::vector<PrefixSet<Scalar>> query_inference(const GlobalPool<Scalar>& global, const Backbone<Scalar>& backbone,
                                               const Tensor<Scalar>& images, int capacity);

}  // namespace ldep
