#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include <gtest/gtest.h>

#include "ldeprompt/importance.hpp"
#include "ldeprompt/random.hpp"
#include "oracles.hpp"

using namespace ldep;
using Eigen::MatrixXd;
using namespace ldep::oracles;

namespace {

MatrixXd random_matrix(Eigen::Index m, Eigen::Index d, Rng& rng, double stddev = 1.0) {
  MatrixXd x(m, d);
  fill_normal(x, stddev, rng);
  return x;
}

}  // namespace

TEST(Entropy, ConstantFeaturesGiveZero) {
  MatrixXd f = MatrixXd::Constant(10, 4, 2.5);
  EXPECT_EQ(estimate_layer_entropy(f, 8), 0.0);
}

TEST(Entropy, TwoEquiprobableCodewordsGiveLn2) {
  MatrixXd f(4, 3);
  f << 0, 1, 5,
       0, 1, 5,
       1, 0, 5,
       1, 0, 5;
  EXPECT_NEAR(estimate_layer_entropy(f, 8), std::log(2.0), 1e-9);
}

TEST(Entropy, MatchesHashCountOracleOnRandomMatrices) {
  Rng rng(42);
  std::uniform_int_distribution<int> dims(1, 6), bins(1, 10), rows(2, 120);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = bins(rng);
    MatrixXd f = random_matrix(rows(rng), dims(rng), rng);
    if (trial % 5 == 0) f.col(0).setConstant(1.0);  // constant column maps to bin 0
    EXPECT_NEAR(estimate_layer_entropy(f, b), hash_count_entropy(f, b), 1e-9) << "trial " << trial;
  }
}

TEST(Entropy, BoundedByLogSampleCount) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixXd f = random_matrix(30, 3, rng);
    const double h = estimate_layer_entropy(f, 4);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(30.0) + 1e-12);
  }
}

TEST(Entropy, FewerThanTwoSamplesIsContractError) {
  EXPECT_THROW(estimate_layer_entropy(MatrixXd::Zero(1, 3), 8), ContractError);
}

TEST(Entropy, MaxValueLandsInLastBin) {
  MatrixXd f(3, 1);
  f << 0.0, 0.5, 1.0;
  const auto codes = bin_features(f, 4);
  EXPECT_EQ(codes(0, 0), 0);
  EXPECT_EQ(codes(1, 0), 2);
  EXPECT_EQ(codes(2, 0), 3);
}

TEST(InformationGain, CollapsingFirstLayerTelescopes) {
  Rng rng(3);
  const MatrixXd h0 = random_matrix(50, 2, rng);
  const MatrixXd collapsed = MatrixXd::Constant(50, 2, 0.3);
  const std::vector<MatrixXd> layers{h0, collapsed, collapsed, collapsed};
  const auto ig = information_gain(layers, 8);
  ASSERT_EQ(ig.size(), 3u);
  EXPECT_NEAR(ig[0], -estimate_layer_entropy(h0, 8), 1e-12);
  EXPECT_EQ(ig[1], 0.0);
  EXPECT_EQ(ig[2], 0.0);
}

TEST(InformationGain, MatchesHandDifferencedEntropiesOnToyNet) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixXd x = random_matrix(64, 3, rng);
    const MatrixXd w1 = random_matrix(3, 3, rng), w2 = random_matrix(3, 3, rng), w3 = random_matrix(3, 3, rng);
    const MatrixXd h1 = (x * w1).array().tanh().matrix();
    const MatrixXd h2 = (h1 * w2).cwiseMax(0.0);
    const MatrixXd h3 = (h2 * w3).array().round().matrix();
    const std::vector<MatrixXd> layers{x, h1, h2, h3};
    const auto ig = information_gain(layers, 5);
    const double e0 = hash_count_entropy(x, 5), e1 = hash_count_entropy(h1, 5), e2 = hash_count_entropy(h2, 5),
                 e3 = hash_count_entropy(h3, 5);
    EXPECT_NEAR(ig[0], e1 - e0, 1e-9);
    EXPECT_NEAR(ig[1], e2 - e1, 1e-9);
    EXPECT_NEAR(ig[2], e3 - e2, 1e-9);
  }
}

TEST(Selection, RandomVectorsMatchBruteForceAndSumToOne) {
  Rng rng(2024);
  std::uniform_int_distribution<int> layers(2, 12);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> ig(static_cast<std::size_t>(layers(rng)));
    std::normal_distribution<double> n(0.0, 2.0);
    for (double& v : ig) v = n(rng);
    const auto alpha = normalize_importance(ig);
    EXPECT_NEAR(std::accumulate(alpha.begin(), alpha.end(), 0.0), 1.0, 1e-6);
    const auto selected = select_layers(alpha);
    const auto expected = brute_force_select(alpha);
    if (expected.empty()) {
      ASSERT_EQ(selected.size(), 1u);
    } else {
      EXPECT_EQ(selected, expected) << "trial " << trial;
    }
    std::vector<double> shifted = ig;
    const double c = shift(rng);
    for (double& v : shifted) v += c;
    EXPECT_EQ(select_layers(normalize_importance(shifted)), selected) << "shift " << c;
  }
}

TEST(Selection, UniformAlphaFallsBackToSingleton) {
  for (int l = 2; l <= 12; ++l) {
    const std::vector<double> ig(static_cast<std::size_t>(l), 0.7);
    const auto selected = select_layers(normalize_importance(ig));
    ASSERT_EQ(selected.size(), 1u);
    EXPECT_EQ(selected[0], 0);
  }
}

TEST(Selection, OnlyAboveMeanLayersChosen) {
  const std::vector<double> alpha{0.1, 0.4, 0.25, 0.25};
  EXPECT_EQ(select_layers(alpha), std::vector<int>{1});
}

TEST(ImportanceSample, SeededAndTruncated) {
  const auto a = importance_sample(100, 10, 7);
  const auto b = importance_sample(100, 10, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(importance_sample(5, 10, 7).size(), 5u);
  EXPECT_NE(a, importance_sample(100, 10, 8));
}

TEST(EvaluateTask, ReportIsWellFormedAndDeterministic) {
  BackboneConfig cfg;
  cfg.num_layers = 3;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.image_side = 4;
  cfg.patch_side = 2;
  cfg.channels = 1;
  Backbone<float> net(cfg, 1);
  RowMatrix<float> images(40, 16);
  Rng rng(3);
  fill_normal(images, 1.0f, rng);
  ImportanceConfig ic;
  ic.num_bins = 3;
  ic.num_samples = 32;
  ic.batch_size = 10;
  std::vector<Eigen::VectorXd> cls;
  const auto r = evaluate_task(net, images, ic, 5, &cls);
  EXPECT_EQ(r.num_samples, 32);
  EXPECT_EQ(r.ig.size(), 3u);
  EXPECT_NEAR(std::accumulate(r.alpha.begin(), r.alpha.end(), 0.0), 1.0, 1e-12);
  EXPECT_FALSE(r.selected.empty());
  EXPECT_EQ(cls.size(), 3u);
  const auto again = evaluate_task(net, images, ic, 5);
  EXPECT_EQ(again.ig, r.ig);
  EXPECT_EQ(again.selected, r.selected);
}

TEST(EvaluateTask, SingleSampleIsContractError) {
  BackboneConfig cfg;
  cfg.num_layers = 1;
  cfg.embed_dim = 4;
  cfg.num_heads = 1;
  cfg.image_side = 2;
  cfg.patch_side = 1;
  cfg.channels = 1;
  Backbone<float> net(cfg, 1);
  RowMatrix<float> images = RowMatrix<float>::Ones(5, 4);
  ImportanceConfig ic;
  ic.num_samples = 1;
  EXPECT_THROW(evaluate_task(net, images, ic, 1), ContractError);
}
