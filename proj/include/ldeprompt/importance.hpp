#pragma once

// Per-layer information gain from binned activation entropy, softmax
// normalization, and above-mean layer selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ldeprompt/backbone.hpp"
#include "ldeprompt/errors.hpp"

namespace ldep {

struct ImportanceConfig {
  int num_bins = 8;
  int num_samples = 256;
  int batch_size = 64;
};

struct ImportanceReport {
  std::vector<double> ig;
  std::vector<double> alpha;
  std::vector<int> selected;  // ascending, never empty
  int num_samples = 0;
  int num_bins = 0;
};

// Quantizes every feature dimension into num_bins equal-width bins over its
// min-max range across the M rows. Constant dimensions map to bin 0.
template <typename Derived>
Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> bin_features(
    const Eigen::MatrixBase<Derived>& features, int num_bins) {
  if (num_bins <= 0) throw ContractError("num_bins must be positive");
  const Eigen::Index m = features.rows();
  const Eigen::Index d = features.cols();
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> codes(m, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double lo = static_cast<double>(features.col(j).minCoeff());
    const double hi = static_cast<double>(features.col(j).maxCoeff());
    const double width = hi - lo;
    for (Eigen::Index i = 0; i < m; ++i) {
      int bin = 0;
      if (width > 0) {
        bin = static_cast<int>(std::floor((static_cast<double>(features(i, j)) - lo) / width * num_bins));
        bin = std::clamp(bin, 0, num_bins - 1);
      }
      codes(i, j) = bin;
    }
  }
  return codes;
}

double codeword_entropy(const Eigen::Ref<const Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>& codes);

// Shannon entropy (nats) of the empirical distribution of binned codewords.
template <typename Derived>
double estimate_layer_entropy(const Eigen::MatrixBase<Derived>& features, int num_bins) {
  if (features.rows() < 2) {
    throw ContractError("entropy estimation needs at least 2 samples, got " + std::to_string(features.rows()));
  }
  return codeword_entropy(bin_features(features, num_bins));
}

// IG(l) = H(h_l) - H(h_{l-1}) for l = 1..L, where layers[0] is h_0 (the stem
// output) and layers[l] the output of block l. Returns L values.
std::vector<double> information_gain(std::span<const Eigen::MatrixXd> layers, int num_bins);

std::vector<double> normalize_importance(std::span<const double> ig);

// Indices with alpha > 1/L. When nothing clears the mean (all alpha equal) the
// result is {argmax alpha}, lowest index on ties; argmax alpha = argmax IG.
std::vector<int> select_layers(std::span<const double> alpha);

// Promptless passes over a seeded sample of the task data. When mean_cls is
// non-null it receives the per-layer mean CLS feature over the same sample.
template <typename Scalar>
ImportanceReport evaluate_task(const Backbone<Scalar>& backbone, const Eigen::Ref<const RowMatrix<float>>& images,
                               const ImportanceConfig& config, std::uint64_t seed,
                               std::vector<Eigen::VectorXd>* mean_cls = nullptr);

// Seeded order used by evaluate_task; exposed so callers can reuse the same sample.
std::vector<Eigen::Index> importance_sample(Eigen::Index available, int num_samples, std::uint64_t seed);

}  // namespace ldep
