#include "ldeprompt/importance.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>

#include "ldeprompt/random.hpp"

namespace ldep {

namespace {

struct CodewordHash {
  std::size_t operator()(const std::vector<int>& v) const {
    std::uint64_t h = 0x84222325cbf29ce4ULL;
    for (int x : v) h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(x)));
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

double codeword_entropy(
    const Eigen::Ref<const Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>& codes) {
  std::unordered_map<std::vector<int>, std::size_t, CodewordHash> counts;
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    std::vector<int> word(codes.row(i).data(), codes.row(i).data() + codes.cols());
    ++counts[std::move(word)];
  }
  // Sum in a fixed order so the result does not depend on hash iteration order.
  std::vector<std::size_t> sorted;
  sorted.reserve(counts.size());
  for (const auto& [word, c] : counts) sorted.push_back(c);
  std::sort(sorted.begin(), sorted.end());
  const double m = static_cast<double>(codes.rows());
  double h = 0.0;
  for (std::size_t c : sorted) {
    const double p = static_cast<double>(c) / m;
    h -= p * std::log(p);
  }
  return h == 0.0 ? 0.0 : h;  // no -0
}

std::vector<double> information_gain(std::span<const Eigen::MatrixXd> layers, int num_bins) {
  if (layers.size() < 2) {
    throw ContractError("information_gain needs h_0 plus at least one layer, got " + std::to_string(layers.size()));
  }
  for (const auto& f : layers) {
    if (f.rows() != layers.front().rows()) throw ContractError("layer feature sets disagree on sample count");
  }
  std::vector<double> entropy;
  entropy.reserve(layers.size());
  for (const auto& f : layers) entropy.push_back(estimate_layer_entropy(f, num_bins));
  std::vector<double> ig(layers.size() - 1);
  for (std::size_t l = 1; l < layers.size(); ++l) ig[l - 1] = entropy[l] - entropy[l - 1];
  return ig;
}

std::vector<double> normalize_importance(std::span<const double> ig) {
  if (ig.empty()) return {};
  const double m = *std::max_element(ig.begin(), ig.end());
  std::vector<double> alpha(ig.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ig.size(); ++i) {
    alpha[i] = std::exp(ig[i] - m);
    total += alpha[i];
  }
  for (double& a : alpha) a /= total;
  return alpha;
}

std::vector<int> select_layers(std::span<const double> alpha) {
  if (alpha.empty()) throw ContractError("select_layers on an empty importance vector");
  const double mean = 1.0 / static_cast<double>(alpha.size());
  std::vector<int> selected;
  for (std::size_t l = 0; l < alpha.size(); ++l) {
    if (alpha[l] > mean) selected.push_back(static_cast<int>(l));
  }
  if (selected.empty()) {
    const auto best = std::max_element(alpha.begin(), alpha.end());  // first maximum
    selected.push_back(static_cast<int>(best - alpha.begin()));
  }
  return selected;
}

std::vector<Eigen::Index> importance_sample(Eigen::Index available, int num_samples, std::uint64_t seed) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(available));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, "importance-sample"));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(num_samples, 0))));
  return order;
}

template <typename Scalar>
ImportanceReport evaluate_task(const Backbone<Scalar>& backbone, const Eigen::Ref<const RowMatrix<float>>& images,
                               const ImportanceConfig& config, std::uint64_t seed,
                               std::vector<Eigen::VectorXd>* mean_cls) {
  if (images.rows() == 0) throw ContractError("evaluate_task on empty task data");
  const auto order = importance_sample(images.rows(), config.num_samples, seed);
  const Eigen::Index m = static_cast<Eigen::Index>(order.size());
  if (m < 2) throw ContractError("layer importance needs at least 2 samples, got " + std::to_string(m));

  const auto& cfg = backbone.config();
  const int num_layers = cfg.num_layers;
  std::vector<Eigen::MatrixXd> layers(static_cast<std::size_t>(num_layers) + 1,
                                      Eigen::MatrixXd(m, cfg.embed_dim));
  std::vector<Eigen::VectorXd> cls_sum(static_cast<std::size_t>(num_layers), Eigen::VectorXd::Zero(cfg.embed_dim));
  const Eigen::Index step = std::max(1, config.batch_size);
  for (Eigen::Index start = 0; start < m; start += step) {
    const Eigen::Index count = std::min(step, m - start);
    RowMatrix<float> rows(count, images.cols());
    for (Eigen::Index i = 0; i < count; ++i) rows.row(i) = images.row(order[static_cast<std::size_t>(start + i)]);
    Tape<Scalar> tape;
    const auto trace = backbone.features(tape, make_image_batch<Scalar>(rows, cfg.image_side, cfg.channels), {});
    layers[0].middleRows(start, count) = trace.embed_pooled.matrix().template cast<double>();
    for (int l = 0; l < num_layers; ++l) {
      layers[static_cast<std::size_t>(l) + 1].middleRows(start, count) =
          trace.pooled_per_layer[static_cast<std::size_t>(l)].matrix().template cast<double>();
      cls_sum[static_cast<std::size_t>(l)] +=
          trace.cls_per_layer[static_cast<std::size_t>(l)].matrix().template cast<double>().colwise().sum().transpose();
    }
  }
  if (mean_cls) {
    for (auto& v : cls_sum) v /= static_cast<double>(m);
    *mean_cls = std::move(cls_sum);
  }

  ImportanceReport report;
  report.num_samples = static_cast<int>(m);
  report.num_bins = config.num_bins;
  report.ig = information_gain(layers, config.num_bins);
  report.alpha = normalize_importance(report.ig);
  report.selected = select_layers(report.alpha);
  return report;
}

template ImportanceReport evaluate_task(const Backbone<float>&, const Eigen::Ref<const RowMatrix<float>>&,
                                        const ImportanceConfig&, std::uint64_t,
                                        std::vector<Eigen::VectorXd>*);
template ImportanceReport evaluate_task(const Backbone<double>&, const Eigen::Ref<const RowMatrix<float>>&,
                                        const ImportanceConfig&, std::uint64_t,
                                        std::vector<Eigen::VectorXd>*);

}  // namespace ldep
