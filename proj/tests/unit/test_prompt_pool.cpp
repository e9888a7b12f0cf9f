#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "ldeprompt/prompt_pool.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ldep;
using ldep::testing::random_tensor;
using Entry = PromptEntry<double>;
using namespace ldep::oracles;

namespace {

Entry make_entry(const Vector<double>& key, Rng& rng, int layer = 0, int task = 0, Index lp = 2) {
  Entry e;
  e.key = Tensor<double>({key.size()}, key);
  e.p_k = random_tensor({lp, key.size()}, rng, 1.0, false);
  e.p_v = random_tensor({lp, key.size()}, rng, 1.0, false);
  e.frozen = true;
  e.layer_id = layer;
  e.task_id = task;
  return e;
}

Vector<double> random_vector(Index d, Rng& rng) {
  Vector<double> v(d);
  fill_normal(v, 1.0, rng);
  return v;
}

BackboneConfig small_backbone() {
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

std::map<int, Vector<double>> mean_for(std::span<const int> layers, Rng& rng, Index d) {
  std::map<int, Vector<double>> out;
  for (int l : layers) out[l] = random_vector(d, rng);
  return out;
}

}  // namespace

TEST(Retrieval, MatchesExhaustiveSortIncludingTies) {
  Rng rng(77);
  std::uniform_int_distribution<int> pool_size(1, 64), s_dist(1, 8), dim(2, 10), tie_kind(0, 2);
  for (int trial = 0; trial < 500; ++trial) {
    const Index d = dim(rng);
    std::vector<Entry> entries;
    const int n = pool_size(rng);
    for (int i = 0; i < n; ++i) {
      Vector<double> key = random_vector(d, rng);
      // Exact ties: repeat an earlier key, or scale it by a power of two.
      if (i > 0 && tie_kind(rng) == 0) {
        key = entries[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(i))].key.value();
        if (rng() % 2) key *= 4.0;
      }
      entries.push_back(make_entry(key, rng, 0, 0, 1));
    }
    const Vector<double> z = random_vector(d, rng);
    const std::size_t s = static_cast<std::size_t>(s_dist(rng));
    const auto got = rank_by_similarity<double>(entries, z, s);
    EXPECT_EQ(got, exhaustive_top_s(entries, z, s)) << "trial " << trial;
    const auto picked = retrieve_top_s<double>(entries, z, s);
    ASSERT_EQ(picked.size(), got.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_TRUE(picked[i].p_k.is_same(entries[got[i]].p_k));
  }
}

TEST(Retrieval, RankingInvariantUnderPositiveScaling) {
  Rng rng(5);
  std::vector<Entry> entries;
  for (int i = 0; i < 20; ++i) entries.push_back(make_entry(random_vector(6, rng), rng, 0, 0, 1));
  const Vector<double> z = random_vector(6, rng);
  const auto base = rank_by_similarity<double>(entries, z, 20);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector<double> scaled = z * scale(rng);
    EXPECT_EQ(rank_by_similarity<double>(entries, scaled, 20), base);
  }
}

TEST(Cosine, ZeroVectorIsContractError) {
  Vector<double> z = Vector<double>::Zero(3);
  Vector<double> k = Vector<double>::Ones(3);
  EXPECT_THROW(cosine_similarity(z, k), ContractError);
  EXPECT_NEAR(cosine_similarity(k, Vector<double>(2.0 * k)), 1.0, 1e-15);
}

TEST(Merge, TrainingModeIsUniformAverage) {
  Rng rng(3);
  std::vector<Entry> entries;
  for (int i = 0; i < 3; ++i) entries.push_back(make_entry(random_vector(4, rng), rng));
  Tape<double> tape;
  const auto merged = merge_prompts<double>(tape, entries, nullptr, MergeMode::Training);
  const Vector<double> expected_k = (entries[0].p_k.value() + entries[1].p_k.value() + entries[2].p_k.value()) / 3.0;
  const Vector<double> expected_v = (entries[0].p_v.value() + entries[1].p_v.value() + entries[2].p_v.value()) / 3.0;
  EXPECT_LT((merged.keys.value() - expected_k).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((merged.values.value() - expected_v).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Merge, InferenceModeIsSoftmaxOverCosine) {
  Rng rng(4);
  std::vector<Entry> entries;
  for (int i = 0; i < 4; ++i) entries.push_back(make_entry(random_vector(5, rng), rng));
  const Vector<double> z = random_vector(5, rng);
  const auto w = merge_weights<double>(entries, &z, MergeMode::Inference);
  double total = 0;
  std::vector<double> e(4);
  for (int i = 0; i < 4; ++i) {
    const Vector<double>& k = entries[static_cast<std::size_t>(i)].key.value();
    e[static_cast<std::size_t>(i)] = std::exp(z.dot(k) / (z.norm() * k.norm()));
    total += e[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(w[static_cast<std::size_t>(i)], e[static_cast<std::size_t>(i)] / total, 1e-14);
  EXPECT_THROW(merge_weights<double>(entries, nullptr, MergeMode::Inference), ContractError);
  EXPECT_THROW(merge_weights<double>({}, &z, MergeMode::Training), ContractError);
}

TEST(Merge, GradientReachesOnlyTrainableEntries) {
  Rng rng(6);
  std::vector<Entry> entries{make_entry(random_vector(4, rng), rng), make_entry(random_vector(4, rng), rng)};
  entries[1].frozen = false;
  entries[1].p_k.set_requires_grad(true);
  entries[1].p_v.set_requires_grad(true);
  Tape<double> tape;
  const auto merged = merge_prompts<double>(tape, entries, nullptr, MergeMode::Training);
  auto loss = sum(tape, add(tape, merged.keys, merged.values));
  tape.backward(loss);
  EXPECT_FALSE(entries[0].p_k.has_grad());
  ASSERT_TRUE(entries[1].p_k.has_grad());
  EXPECT_NEAR(entries[1].p_k.grad()(0), 0.5, 1e-15);
}

TEST(TrainingPool, FirstTaskIsAllFresh) {
  const auto bb = small_backbone();
  const std::vector<int> layers{0, 2};
  PoolConfig pc;
  const auto pool = build_training_pool<double>(GlobalPool<double>{}, layers, {}, pc, bb, 0, 9);
  ASSERT_EQ(pool.layers.size(), 2u);
  for (int l : layers) {
    EXPECT_EQ(pool.layers.at(l).size(), 4u);
    EXPECT_EQ(pool.fresh_count(l), 4u);
    for (const auto& e : pool.layers.at(l)) {
      EXPECT_EQ(e.p_k.shape(), (Shape{2, 8}));
      EXPECT_TRUE(e.p_k.requires_grad());
      EXPECT_FALSE(e.frozen);
      EXPECT_EQ(e.layer_id, l);
    }
  }
  EXPECT_EQ(pool.trainable().size(), 16u);
  const auto again = build_training_pool<double>(GlobalPool<double>{}, layers, {}, pc, bb, 0, 9);
  EXPECT_EQ(checksum(again.layers.at(2)[3].p_v), checksum(pool.layers.at(2)[3].p_v));
}

TEST(TrainingPool, RetrievesFrozenTopSThenFillsFresh) {
  const auto bb = small_backbone();
  Rng rng(10);
  GlobalPool<double> global;
  for (int i = 0; i < 5; ++i) global.append(make_entry(random_vector(8, rng), rng, 1, 0));
  const Vector<double> q = random_vector(8, rng);
  const auto expected = rank_by_similarity<double>(global.layer(1), q, 2);
  const std::vector<int> layers{1};
  PoolConfig pc;
  const auto pool = build_training_pool<double>(global, layers, {{1, q}}, pc, bb, 1, 3);
  const auto& entries = pool.layers.at(1);
  ASSERT_EQ(entries.size(), 4u);
  EXPECT_TRUE(entries[0].p_k.is_same(global.layer(1)[expected[0]].p_k));
  EXPECT_TRUE(entries[1].p_k.is_same(global.layer(1)[expected[1]].p_k));
  EXPECT_TRUE(entries[0].frozen && entries[1].frozen);
  EXPECT_FALSE(entries[0].p_k.requires_grad());
  EXPECT_EQ(pool.fresh_count(1), 2u);
  EXPECT_EQ(pool.trainable().size(), 4u);

  pc.freeze_retrieved = false;
  const auto unfrozen = build_training_pool<double>(global, layers, {{1, q}}, pc, bb, 1, 3);
  EXPECT_EQ(unfrozen.trainable().size(), 8u);
  EXPECT_THROW(build_training_pool<double>(global, layers, {}, PoolConfig{}, bb, 1, 3), ContractError);
}

TEST(TrainingPool, ConfigValidation) {
  PoolConfig pc;
  pc.reuse = 4;
  EXPECT_THROW(pc.validate(), ConfigError);
  pc.capacity = 0;
  pc.reuse = 0;
  EXPECT_THROW(pc.validate(), ConfigError);
}

TEST(Finalize, KeysFreezesAndAppendsOnlyFresh) {
  const auto bb = small_backbone();
  Rng rng(12);
  GlobalPool<double> global;
  for (int i = 0; i < 4; ++i) global.append(make_entry(random_vector(8, rng), rng, 0, 0));
  const std::vector<int> layers{0};
  auto pool = build_training_pool<double>(global, layers, {{0, random_vector(8, rng)}}, PoolConfig{}, bb, 1, 1);
  const auto keys = mean_for(layers, rng, 8);
  finalize_task(std::move(pool), global, keys);
  ASSERT_EQ(global.size(0), 6u);
  for (std::size_t i = 4; i < 6; ++i) {
    const auto& e = global.layer(0)[i];
    EXPECT_TRUE(e.frozen);
    EXPECT_EQ(e.task_id, 1);
    EXPECT_EQ(e.key.value(), keys.at(0));
    EXPECT_FALSE(e.p_k.requires_grad());
  }
}

TEST(Finalize, DegenerateKeyLeavesGlobalPoolUntouched) {
  const auto bb = small_backbone();
  GlobalPool<double> global;
  const std::vector<int> layers{0, 1};
  Rng rng(1);
  auto pool = build_training_pool<double>(global, layers, {}, PoolConfig{}, bb, 0, 1);
  std::map<int, Vector<double>> keys{{0, random_vector(8, rng)}, {1, Vector<double>::Zero(8)}};
  EXPECT_THROW(finalize_task(std::move(pool), global, keys), ContractError);
  EXPECT_TRUE(global.empty());
  auto pool2 = build_training_pool<double>(global, layers, {}, PoolConfig{}, bb, 0, 1);
  EXPECT_THROW(finalize_task(std::move(pool2), global, {{0, random_vector(8, rng)}}), ContractError);
}

TEST(PoolLifecycle, GrowthFollowsRecurrenceAndFrozenEntriesNeverChange) {
  const auto bb = small_backbone();
  GlobalPool<double> global;
  const std::vector<int> layers{1};
  PoolConfig pc;  // S=4, s=2
  Rng rng(99);
  std::vector<std::uint64_t> frozen_sums;
  for (int t = 0; t < 5; ++t) {
    auto pool = build_training_pool<double>(global, layers, {{1, random_vector(8, rng)}}, pc, bb, t, 100 + t);
    // Pretend-train: perturb every trainable matrix.
    for (auto& p : pool.trainable()) p.value().array() += 0.25;
    finalize_task(std::move(pool), global, mean_for(layers, rng, 8));
    EXPECT_EQ(global.size(1), static_cast<std::size_t>(4 + t * (4 - 2))) << "after task " << t + 1;
    const auto entries = global.layer(1);
    for (std::size_t i = 0; i < frozen_sums.size(); ++i) {
      const auto& e = entries[i / 3];
      const std::uint64_t now = i % 3 == 0 ? checksum(e.key) : i % 3 == 1 ? checksum(e.p_k) : checksum(e.p_v);
      EXPECT_EQ(now, frozen_sums[i]) << "entry " << i / 3 << " changed during task " << t + 1;
    }
    frozen_sums.clear();
    for (const auto& e : entries) {
      frozen_sums.push_back(checksum(e.key));
      frozen_sums.push_back(checksum(e.p_k));
      frozen_sums.push_back(checksum(e.p_v));
    }
  }
}

TEST(QueryInference, MatchesManualTwoPassRetrieval) {
  const auto bb = small_backbone();
  Backbone<double> net(bb, 4);
  Rng rng(8);
  GlobalPool<double> global;
  for (int i = 0; i < 3; ++i) global.append(make_entry(random_vector(8, rng), rng, 2, i));
  for (int i = 0; i < 6; ++i) global.append(make_entry(random_vector(8, rng), rng, 0, i));
  const auto images = random_tensor({2, 4, 4, 1}, rng, 1.0, false);
  const auto sets = query_inference(global, net, images, 4);
  ASSERT_EQ(sets.size(), 2u);

  Tape<double> tape;
  const auto trace = net.features(tape, images, {});
  for (std::size_t b = 0; b < 2; ++b) {
    ASSERT_EQ(sets[b].size(), 2u);
    for (int layer : {0, 2}) {
      const Vector<double> z = trace.cls_per_layer[static_cast<std::size_t>(layer)].matrix().row(static_cast<Index>(b)).transpose();
      const auto stored = global.layer(layer);
      const std::size_t s = std::min<std::size_t>(4, stored.size());
      std::vector<Entry> all(stored.begin(), stored.end());
      const auto idx = exhaustive_top_s(all, z, s);
      std::vector<double> w;
      double total = 0;
      for (std::size_t i : idx) {
        const Vector<double>& k = all[i].key.value();
        w.push_back(std::exp(z.dot(k) / (z.norm() * k.norm())));
        total += w.back();
      }
      Vector<double> expected = Vector<double>::Zero(2 * 8);
      for (std::size_t j = 0; j < idx.size(); ++j) expected += w[j] / total * all[idx[j]].p_k.value();
      EXPECT_LT((sets[b].at(layer).keys.value() - expected).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_FALSE(sets[b].at(layer).keys.requires_grad());
    }
  }
  EXPECT_THROW(query_inference(GlobalPool<double>{}, net, images, 4), ContractError);
}
