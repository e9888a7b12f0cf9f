#include "ldeprompt/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "ldeprompt/random.hpp"

namespace ldep {

Variant variant_from_int(int v) {
  if (v < 1 || v > 4) throw ConfigError("unknown ablation variant " + std::to_string(v) + " (expected 1..4)");
  return static_cast<Variant>(v);
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::SinglePool: return "single pool, no freezing or expansion";
    case Variant::NoFreeze: return "dual pool with expansion, no freezing";
    case Variant::AllLayers: return "prompt pools in all layers";
    case Variant::Full: return "full method";
  }
  return "?";
}

void TrainConfig::validate() const {
  std::ostringstream err;
  if (!(lr > 0)) err << "train.lr must be positive; ";
  if (!(weight_decay >= 0)) err << "train.weight_decay must be >= 0; ";
  if (epochs < 1) err << "train.epochs must be >= 1; ";
  if (batch_size < 1) err << "train.batch_size must be >= 1; ";
  if (importance.num_bins < 1) err << "importance.num_bins must be >= 1; ";
  if (importance.num_samples < 2) err << "importance.num_samples must be >= 2; ";
  try {
    pool.validate();
  } catch (const ConfigError& e) {
    err << e.what();
  }
  if (!err.str().empty()) throw ConfigError(err.str());
}

template <typename Scalar>
Tensor<Scalar> expand_classifier(const Tensor<Scalar>& classifier, Index embed_dim, int new_classes,
                                 std::uint64_t seed) {
  if (new_classes < 1) throw ContractError("expand_classifier needs at least one new class");
  const Index old_cols = classifier.defined() ? classifier.cols() : 0;
  if (classifier.defined() && classifier.rows() != embed_dim) {
    throw ShapeError("classifier " + to_string(classifier.shape()) + " does not have " + std::to_string(embed_dim) +
                     " rows");
  }
  Tensor<Scalar> out({embed_dim, old_cols + new_classes}, true);
  if (old_cols > 0) out.matrix().leftCols(old_cols) = classifier.matrix();
  RowMatrix<Scalar> fresh(embed_dim, new_classes);
  Rng rng(seed);
  fill_normal(fresh, Scalar(0.02), rng);
  out.matrix().rightCols(new_classes) = fresh;
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> collect_trainable(const TrainingPool<Scalar>& pool, const Tensor<Scalar>& classifier) {
  std::vector<Tensor<Scalar>> out;
  for (auto& t : pool.trainable()) {
    if (t.requires_grad()) out.push_back(t);
  }
  if (classifier.defined() && classifier.requires_grad()) out.push_back(classifier);
  if (out.empty()) throw ContractError("no trainable parameters");
  return out;
}

template <typename Scalar>
Learner<Scalar>::Learner(const BackboneConfig& backbone, TrainConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
  config_.validate();
  state_.backbone = Backbone<Scalar>(backbone, seed);
}

template <typename Scalar>
Learner<Scalar>::Learner(TrainConfig config, std::uint64_t seed, LearnerState<Scalar> state)
    : config_(std::move(config)), seed_(seed), state_(std::move(state)) {
  config_.validate();
}

template <typename Scalar>
std::map<int, Vector<Scalar>> Learner<Scalar>::mean_cls(const Dataset& data, std::span<const int> layers) const {
  const auto& cfg = state_.backbone.config();
  std::map<int, Vector<Scalar>> sums;
  for (int l : layers) sums[l] = Vector<Scalar>::Zero(cfg.embed_dim);
  const Index step = std::max(1, config_.importance.batch_size);
  for (Index start = 0; start < data.size(); start += step) {
    const Index count = std::min(step, data.size() - start);
    Tape<Scalar> tape;
    const auto trace = state_.backbone.features(
        tape, make_image_batch<Scalar>(data.images.middleRows(start, count), cfg.image_side, cfg.channels), {});
    for (int l : layers) {
      sums[l] += trace.cls_per_layer[static_cast<std::size_t>(l)].matrix().colwise().sum().transpose();
    }
  }
  for (auto& [l, v] : sums) v /= static_cast<Scalar>(data.size());
  return sums;
}

template <typename Scalar>
TrainingPool<Scalar> Learner<Scalar>::prepare_pool(ImportanceReport& report,
                                                   const std::vector<Eigen::VectorXd>& sample_cls, int task_id) {
  const auto& cfg = state_.backbone.config();
  if (config_.variant == Variant::AllLayers) {
    report.selected.resize(static_cast<std::size_t>(cfg.num_layers));
    std::iota(report.selected.begin(), report.selected.end(), 0);
  }
  const std::uint64_t pool_seed = derive_seed(seed_, "pool", static_cast<std::uint64_t>(task_id));

  if (config_.variant == Variant::SinglePool) {
    if (state_.fixed_layers.empty()) {
      state_.fixed_layers = report.selected;
      PoolConfig fresh_only = config_.pool;
      fresh_only.reuse = 0;
      return build_training_pool<Scalar>(GlobalPool<Scalar>{}, state_.fixed_layers, {}, fresh_only, cfg, task_id,
                                         pool_seed);
    }
    report.selected = state_.fixed_layers;
    TrainingPool<Scalar> pool;
    pool.capacity = config_.pool.capacity;
    pool.reuse = 0;
    for (int l : state_.fixed_layers) {
      auto& entries = pool.layers[l];
      for (const auto& stored : state_.global.layer(l)) {
        PromptEntry<Scalar> e = stored;
        e.frozen = false;
        e.p_k.set_requires_grad(true);
        e.p_v.set_requires_grad(true);
        entries.push_back(e);
      }
    }
    return pool;
  }

  std::map<int, Vector<Scalar>> queries;
  for (int l : report.selected) queries[l] = sample_cls[static_cast<std::size_t>(l)].template cast<Scalar>();
  PoolConfig pool_config = config_.pool;
  pool_config.freeze_retrieved = config_.variant != Variant::NoFreeze;
  return build_training_pool<Scalar>(state_.global, report.selected, queries, pool_config, cfg, task_id, pool_seed);
}

template <typename Scalar>
TaskSession Learner<Scalar>::train_task(const Dataset& train, int new_classes) {
  if (train.size() == 0) throw ContractError("train_task on an empty task");
  if (new_classes < 1) throw ContractError("train_task needs at least one new class");
  const int lo = state_.seen_classes;
  const int hi = lo + new_classes;
  for (int label : train.labels) {
    if (label < lo || label >= hi) {
      throw DataError("label " + std::to_string(label) + " outside the task range [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + ")");
    }
  }
  const auto& cfg = state_.backbone.config();
  const int task_id = state_.tasks_done;

  TaskSession session;
  session.task_id = task_id;
  session.class_offset = lo;
  session.class_count = new_classes;

  std::vector<Eigen::VectorXd> sample_cls;
  session.importance =
      evaluate_task(state_.backbone, train.images, config_.importance,
                    derive_seed(seed_, "importance", static_cast<std::uint64_t>(task_id)), &sample_cls);
  TrainingPool<Scalar> pool = prepare_pool(session.importance, sample_cls, task_id);
  for (const auto& [l, entries] : pool.layers) session.fresh_per_layer[l] = pool.fresh_count(l);

  state_.classifier = expand_classifier(state_.classifier, cfg.embed_dim, new_classes,
                                        derive_seed(seed_, "classifier", static_cast<std::uint64_t>(task_id)));
  state_.seen_classes = hi;
  auto params = collect_trainable(pool, state_.classifier);

  const Scalar lr = static_cast<Scalar>(config_.lr);
  const Scalar wd = static_cast<Scalar>(config_.weight_decay);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(derive_seed(derive_seed(seed_, "shuffle", static_cast<std::uint64_t>(task_id)), "epoch",
                        static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config_.batch_size)) {
      const std::size_t count = std::min(order.size() - start, static_cast<std::size_t>(config_.batch_size));
      const std::span<const Index> rows(order.data() + start, count);
      const Dataset batch = train.subset(rows);

      Tape<Scalar> tape;
      PrefixSet<Scalar> prefixes;
      for (const auto& [l, entries] : pool.layers) {
        prefixes[l] = merge_prompts<Scalar>(tape, entries, nullptr, MergeMode::Training);
      }
      const auto trace = state_.backbone.forward(
          tape, make_image_batch<Scalar>(batch.images, cfg.image_side, cfg.channels), prefixes, state_.classifier);
      auto loss = cross_entropy_logits(tape, trace.logits, std::span<const int>(batch.labels));
      tape.backward(loss);
      sgd_step<Scalar>(params, lr, wd);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(count);
    }
    session.loss_history.push_back(loss_sum / static_cast<double>(order.size()));
  }

  std::vector<int> layers;
  for (const auto& [l, entries] : pool.layers) layers.push_back(l);
  const auto keys = mean_cls(train, layers);
  if (config_.variant == Variant::SinglePool && state_.tasks_done > 0) {
    // The single pool is updated in place: refresh keys, then lock until the next task.
    for (auto& [l, entries] : pool.layers) {
      if (keys.at(l).norm() == Scalar(0)) throw ContractError("degenerate prompt key for layer " + std::to_string(l));
      for (auto& e : entries) {
        e.key.value() = keys.at(l);
        e.p_k.set_requires_grad(false);
        e.p_v.set_requires_grad(false);
        e.p_k.clear_grad();
        e.p_v.clear_grad();
      }
    }
  } else {
    finalize_task(std::move(pool), state_.global, keys);
  }
  state_.classifier.clear_grad();
  ++state_.tasks_done;
  session.pool_sizes = state_.global.sizes();
  return session;
}

template <typename Scalar>
std::vector<int> Learner<Scalar>::predict(const Dataset& data) const {
  if (data.size() == 0) throw ContractError("predict on an empty dataset");
  if (!state_.classifier.defined()) throw ContractError("predict before any task was trained");
  const auto& cfg = state_.backbone.config();
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  const Index step = std::max(1, config_.importance.batch_size);
  for (Index start = 0; start < data.size(); start += step) {
    const Index count = std::min(step, data.size() - start);
    const auto images = make_image_batch<Scalar>(data.images.middleRows(start, count), cfg.image_side, cfg.channels);
    const auto prefix_sets = query_inference(state_.global, state_.backbone, images, config_.pool.capacity);
    for (Index b = 0; b < count; ++b) {
      const auto one = make_image_batch<Scalar>(data.images.middleRows(start + b, 1), cfg.image_side, cfg.channels);
      Tape<Scalar> tape;
      const auto trace = state_.backbone.forward(tape, one, prefix_sets[static_cast<std::size_t>(b)], state_.classifier);
      Index best = 0;
      trace.logits.matrix().row(0).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

template <typename Scalar>
std::vector<double> Learner<Scalar>::evaluate(std::span<const Dataset> test_sets) const {
  if (state_.tasks_done == 0) throw ContractError("evaluate needs at least one completed task");
  std::vector<double> acc;
  for (const auto& test : test_sets) {
    if (test.size() == 0) throw ContractError("evaluate on an empty test set");
    const auto pred = predict(test);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i] ? 1 : 0;
    acc.push_back(static_cast<double>(correct) / static_cast<double>(pred.size()));
  }
  return acc;
}

template class Learner<float>;
template class Learner<double>;
template Tensor<float> expand_classifier(const Tensor<float>&, Index, int, std::uint64_t);
template Tensor<double> expand_classifier(const Tensor<double>&, Index, int, std::uint64_t);
template std::vector<Tensor<float>> collect_trainable(const TrainingPool<float>&, const Tensor<float>&);
template std::vector<Tensor<double>> collect_trainable(const TrainingPool<double>&, const Tensor<double>&);

}  // namespace ldep
