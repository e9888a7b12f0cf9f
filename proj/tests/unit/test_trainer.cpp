#include <numeric>

#include <gtest/gtest.h>

#include "ldeprompt/trainer.hpp"
#include "test_util.hpp"

using namespace ldep;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.num_layers = 3;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.image_side = 4;
  c.patch_side = 2;
  c.channels = 1;
  c.prefix_len = 2;
  return c;
}

TrainConfig tiny_train(Variant v = Variant::Full) {
  TrainConfig t;
  t.lr = 0.05;
  t.epochs = 4;
  t.batch_size = 8;
  t.importance.num_samples = 16;
  t.importance.num_bins = 4;
  t.variant = v;
  return t;
}

TaskStream tiny_stream(int classes = 6, int increment = 2) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.image_side = 4;
  spec.channels = 1;
  spec.train_per_class = 12;
  spec.test_per_class = 6;
  const auto data = generate_synthetic(spec);
  return make_task_stream(data.train, data.test, make_splits({classes, 0, increment, 3}));
}

std::uint64_t pool_checksum(const GlobalPool<float>& g) {
  std::uint64_t h = 0;
  for (const auto& [l, size] : g.sizes()) {
    for (const auto& e : g.layer(l)) h = h * 31 + checksum(e.key) * 7 + checksum(e.p_k) * 3 + checksum(e.p_v);
  }
  return h;
}

}  // namespace

TEST(Classifier, ExpansionPreservesOldColumnsExactly) {
  Tensor<double> w;
  std::vector<RowMatrix<double>> history;
  for (int t = 0; t < 4; ++t) {
    w = expand_classifier(w, 5, 3, 100 + t);
    ASSERT_EQ(w.shape(), (Shape{5, 3 * (t + 1)}));
    EXPECT_TRUE(w.requires_grad());
    if (!history.empty()) EXPECT_EQ(RowMatrix<double>(w.matrix().leftCols(history.back().cols())), history.back());
    w.matrix().array() += 1.0;  // stand-in for training between tasks
    history.push_back(w.matrix());
  }
  EXPECT_THROW(expand_classifier(w, 6, 1, 1), ShapeError);
  EXPECT_THROW(expand_classifier(w, 5, 0, 1), ContractError);
}

TEST(Classifier, NoTrainableParametersIsContractError) {
  TrainingPool<double> pool;
  Tensor<double> frozen({2, 2}, false);
  try {
    collect_trainable(pool, frozen);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("no trainable parameters"), std::string::npos);
  }
}

TEST(Variants, IntegerMapping) {
  EXPECT_EQ(variant_from_int(1), Variant::SinglePool);
  EXPECT_EQ(variant_from_int(4), Variant::Full);
  EXPECT_THROW(variant_from_int(0), ConfigError);
  EXPECT_THROW(variant_from_int(5), ConfigError);
}

TEST(Learner, LossDecreasesWithinEveryTask) {
  const auto stream = tiny_stream();
  Learner<float> learner(tiny_backbone(), tiny_train(), 7);
  for (const auto& task : stream.tasks) {
    const auto s = learner.train_task(task.train, static_cast<int>(task.classes.size()));
    ASSERT_EQ(s.loss_history.size(), 4u);
    EXPECT_LT(s.loss_history.back(), s.loss_history.front()) << "task " << s.task_id;
  }
}

TEST(Learner, SameSeedGivesBitIdenticalState) {
  const auto stream = tiny_stream();
  Learner<float> a(tiny_backbone(), tiny_train(), 11), b(tiny_backbone(), tiny_train(), 11);
  for (int t = 0; t < 2; ++t) {
    const auto sa = a.train_task(stream.tasks[t].train, 2);
    const auto sb = b.train_task(stream.tasks[t].train, 2);
    EXPECT_EQ(sa.loss_history, sb.loss_history);
  }
  EXPECT_EQ(checksum(a.state().classifier), checksum(b.state().classifier));
  EXPECT_EQ(pool_checksum(a.state().global), pool_checksum(b.state().global));
  Learner<float> c(tiny_backbone(), tiny_train(), 12);
  c.train_task(stream.tasks[0].train, 2);
  EXPECT_NE(checksum(c.state().classifier), checksum(a.state().classifier));
}

TEST(Learner, BackboneAndStoredPromptsStayFrozen) {
  const auto stream = tiny_stream();
  Learner<float> learner(tiny_backbone(), tiny_train(), 5);
  std::vector<std::uint64_t> backbone_sums;
  for (const auto& p : learner.state().backbone.parameters()) backbone_sums.push_back(checksum(p));
  learner.train_task(stream.tasks[0].train, 2);
  const auto before = learner.state().global.sizes();
  std::vector<std::uint64_t> stored;
  for (const auto& [l, n] : before) {
    for (const auto& e : learner.state().global.layer(l)) stored.push_back(checksum(e.p_k) ^ (checksum(e.p_v) << 1));
  }
  const RowMatrix<float> old_cols = learner.state().classifier.matrix();
  learner.train_task(stream.tasks[1].train, 2);

  const auto params = learner.state().backbone.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(checksum(params[i]), backbone_sums[i]) << "param " << i;
  std::size_t k = 0;
  for (const auto& [l, n] : before) {
    const auto entries = learner.state().global.layer(l);
    for (std::size_t i = 0; i < n; ++i, ++k) {
      EXPECT_EQ(checksum(entries[i].p_k) ^ (checksum(entries[i].p_v) << 1), stored[k]);
    }
  }
  // The classifier keeps training on every column.
  EXPECT_NE(RowMatrix<float>(learner.state().classifier.matrix().leftCols(2)), old_cols);
}

TEST(Learner, NoFreezeVariantUpdatesRetrievedPrompts) {
  const auto stream = tiny_stream();
  auto cfg = tiny_train(Variant::NoFreeze);
  cfg.importance.num_bins = 16;  // saturated entropies pin selection to layer 0
  Learner<float> learner(tiny_backbone(), cfg, 5);
  learner.train_task(stream.tasks[0].train, 2);
  const auto before = pool_checksum(learner.state().global);
  std::map<int, std::size_t> sizes = learner.state().global.sizes();
  const auto session = learner.train_task(stream.tasks[1].train, 2);
  ASSERT_EQ(session.fresh_per_layer.at(0), 2u);
  // Compare only the entries that existed before the second task.
  GlobalPool<float> prefix;
  for (const auto& [l, n] : sizes) {
    const auto entries = learner.state().global.layer(l);
    for (std::size_t i = 0; i < n; ++i) prefix.append(entries[i]);
  }
  EXPECT_NE(pool_checksum(prefix), before);
}

TEST(Learner, OutOfRangeLabelIsDataError) {
  const auto stream = tiny_stream();
  Learner<float> learner(tiny_backbone(), tiny_train(), 5);
  EXPECT_THROW(learner.train_task(stream.tasks[1].train, 2), DataError);
  EXPECT_THROW(learner.evaluate(std::vector<Dataset>{stream.tasks[0].test}), ContractError);
}

TEST(Learner, AllLayersVariantSelectsEveryLayer) {
  const auto stream = tiny_stream();
  Learner<float> learner(tiny_backbone(), tiny_train(Variant::AllLayers), 5);
  const auto s = learner.train_task(stream.tasks[0].train, 2);
  EXPECT_EQ(s.importance.selected, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(s.pool_sizes.size(), 3u);
}

TEST(Learner, SinglePoolVariantNeverGrows) {
  const auto stream = tiny_stream();
  Learner<float> learner(tiny_backbone(), tiny_train(Variant::SinglePool), 5);
  std::map<int, std::size_t> first;
  for (const auto& task : stream.tasks) {
    const auto s = learner.train_task(task.train, 2);
    if (first.empty()) first = s.pool_sizes;
    EXPECT_EQ(s.pool_sizes, first);
    EXPECT_EQ(s.importance.selected, learner.state().fixed_layers);
  }
  for (const auto& [l, n] : first) EXPECT_EQ(n, 4u);
}

TEST(Learner, PoolGrowsByFreshPromptsPerTask) {
  const auto stream = tiny_stream(10, 2);
  Learner<float> learner(tiny_backbone(), tiny_train(Variant::AllLayers), 5);
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    const auto s = learner.train_task(stream.tasks[t].train, 2);
    for (const auto& [l, n] : s.pool_sizes) EXPECT_EQ(n, 4 + 2 * t);
  }
}

TEST(Learner, PredictionsDoNotDependOnEvalBatchSize) {
  const auto stream = tiny_stream();
  auto cfg = tiny_train();
  Learner<float> learner(tiny_backbone(), cfg, 9);
  learner.train_task(stream.tasks[0].train, 2);
  learner.train_task(stream.tasks[1].train, 2);
  cfg.importance.batch_size = 1;
  Learner<float> single(cfg, 9, learner.state());
  const auto& test = stream.tasks[1].test;
  EXPECT_EQ(learner.predict(test), single.predict(test));
  const auto acc = learner.evaluate(std::vector<Dataset>{stream.tasks[0].test, test});
  const auto pred = single.predict(test);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  EXPECT_DOUBLE_EQ(acc[1], static_cast<double>(hit) / static_cast<double>(pred.size()));
  for (int p : pred) EXPECT_LT(p, 4);
}
