#include "ldeprompt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ldeprompt/errors.hpp"

namespace ldep {

void AccuracyMatrix::record_row(std::size_t stage, std::span<const double> accuracies) {
  if (stage >= rows_.size()) {
    throw ContractError("stage " + std::to_string(stage) + " outside a " + std::to_string(rows_.size()) +
                        "-task matrix");
  }
  if (rows_[stage]) throw ContractError("stage " + std::to_string(stage) + " already recorded");
  if (accuracies.size() != stage + 1) {
    throw ContractError("stage " + std::to_string(stage) + " needs " + std::to_string(stage + 1) +
                        " accuracies, got " + std::to_string(accuracies.size()));
  }
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0)) throw ContractError("accuracy " + std::to_string(a) + " outside [0, 1]");
  }
  rows_[stage] = std::vector<double>(accuracies.begin(), accuracies.end());
}

const std::vector<double>& AccuracyMatrix::row(std::size_t stage) const {
  if (!has_row(stage)) throw ContractError("stage " + std::to_string(stage) + " not recorded");
  return *rows_[stage];
}

std::optional<double> AccuracyMatrix::at(std::size_t stage, std::size_t task) const {
  if (!has_row(stage) || task > stage) return std::nullopt;
  return (*rows_[stage])[task];
}

std::size_t AccuracyMatrix::defined_entries() const {
  std::size_t n = 0;
  for (const auto& r : rows_) n += r ? r->size() : 0;
  return n;
}

std::vector<double> stage_accuracies(const AccuracyMatrix& m, std::span<const std::size_t> test_sizes) {
  if (test_sizes.size() != m.num_tasks()) throw ContractError("test_sizes length differs from the task count");
  std::vector<double> out;
  out.reserve(m.num_tasks());
  for (std::size_t i = 0; i < m.num_tasks(); ++i) {
    const auto& row = m.row(i);
    double correct = 0.0, total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      correct += row[j] * static_cast<double>(test_sizes[j]);
      total += static_cast<double>(test_sizes[j]);
    }
    if (total <= 0) throw ContractError("stage " + std::to_string(i) + " has no test samples");
    out.push_back(correct / total);
  }
  return out;
}

double avg_accuracy(const AccuracyMatrix& m, std::span<const std::size_t> test_sizes) {
  if (m.num_tasks() == 0) throw ContractError("avg_accuracy on an empty matrix");
  const auto a = stage_accuracies(m, test_sizes);
  double s = 0.0;
  for (double v : a) s += v;
  return 100.0 * s / static_cast<double>(a.size());
}

double last_accuracy(const AccuracyMatrix& m, std::span<const std::size_t> test_sizes) {
  const std::size_t t = m.num_tasks();
  if (t == 0 || !m.has_row(t - 1)) throw ContractError("last_accuracy needs the final stage");
  if (test_sizes.size() != t) throw ContractError("test_sizes length differs from the task count");
  const auto& row = m.row(t - 1);
  double correct = 0.0, total = 0.0;
  for (std::size_t j = 0; j < t; ++j) {
    correct += row[j] * static_cast<double>(test_sizes[j]);
    total += static_cast<double>(test_sizes[j]);
  }
  if (total <= 0) throw ContractError("final stage has no test samples");
  return 100.0 * correct / total;
}

double forgetting(const AccuracyMatrix& m) {
  const std::size_t t = m.num_tasks();
  if (t < 2) throw ContractError("forgetting needs at least 2 tasks");
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < t; ++j) {
    double best = 0.0;
    for (std::size_t i = j; i < t; ++i) best = std::max(best, m.row(i)[j]);
    s += best - m.row(t - 1)[j];
  }
  return 100.0 * s / static_cast<double>(t - 1);
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

}  // namespace ldep
