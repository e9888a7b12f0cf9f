#pragma once

// Per-task pipeline: layer importance -> training pool -> classifier expansion
// -> prompt + classifier optimization -> pool finalization.

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "ldeprompt/backbone.hpp"
#include "ldeprompt/data.hpp"
#include "ldeprompt/importance.hpp"
#include "ldeprompt/prompt_pool.hpp"

namespace ldep {

// Ablation variants; the numbering is what configs and reports use.
enum class Variant : int {
  SinglePool = 1,  // one fixed pool per layer, always trainable, never expanded
  NoFreeze = 2,    // dual pools with expansion, retrieved prompts stay trainable
  AllLayers = 3,   // full method with prompts at every layer
  Full = 4,
};

Variant variant_from_int(int v);  // ConfigError for anything outside 1..4
const char* variant_name(Variant v);

struct TrainConfig {
  double lr = 0.001;
  double weight_decay = 0.005;
  int epochs = 5;
  int batch_size = 24;
  PoolConfig pool;
  ImportanceConfig importance;
  Variant variant = Variant::Full;

  void validate() const;
};

struct TaskSession {
  int task_id = 0;
  ImportanceReport importance;
  int class_offset = 0;
  int class_count = 0;
  std::vector<double> loss_history;           // mean loss per epoch
  std::map<int, std::size_t> fresh_per_layer;  // prompts created this task
  std::map<int, std::size_t> pool_sizes;       // global pool after finalization
};

// Appends new_classes seeded columns; existing columns are copied bit-exactly.
// An undefined classifier counts as zero columns.
template <typename Scalar>
Tensor<Scalar> expand_classifier(const Tensor<Scalar>& classifier, Index embed_dim, int new_classes,
                                 std::uint64_t seed);

// The parameters a task step updates; ContractError("no trainable parameters")
// if none of them requires grad.
template <typename Scalar>
std::vector<Tensor<Scalar>> collect_trainable(const TrainingPool<Scalar>& pool, const Tensor<Scalar>& classifier);

template <typename Scalar>
struct LearnerState {
  Backbone<Scalar> backbone;
  Tensor<Scalar> classifier;  // D x seen_classes, undefined before the first task
  GlobalPool<Scalar> global;
  int tasks_done = 0;
  int seen_classes = 0;
  std::vector<int> fixed_layers;  // SinglePool variant: layers chosen on the first task
};

template <typename Scalar>
class Learner {
 public:
  Learner(const BackboneConfig& backbone, TrainConfig config, std::uint64_t seed);
  Learner(TrainConfig config, std::uint64_t seed, LearnerState<Scalar> state);

  // Trains the next task. Labels must lie in [seen_classes, seen_classes + new_classes).
  TaskSession train_task(const Dataset& train, int new_classes);

  // Accuracy per test set with two-pass prompt retrieval and argmax over every
  // seen class.
  std::vector<double> evaluate(std::span<const Dataset> test_sets) const;
  std::vector<int> predict(const Dataset& data) const;

  const LearnerState<Scalar>& state() const { return state_; }
  LearnerState<Scalar>& mutable_state() { return state_; }
  const TrainConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

 private:
  TrainingPool<Scalar> prepare_pool(ImportanceReport& report, const std::vector<Eigen::VectorXd>& sample_cls,
                                    int task_id);
  std::map<int, Vector<Scalar>> mean_cls(const Dataset& data, std::span<const int> layers) const;

  TrainConfig config_;
  std::uint64_t seed_;
  LearnerState<Scalar> state_;
};

}  // namespace ldep
