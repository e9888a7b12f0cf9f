#pragma once

// Accuracy matrix a(i, j): accuracy on task j's test set after training tasks
// 0..i. Only j <= i is defined.

#include <optional>
#include <span>
#include <vector>

namespace ldep {

class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t num_tasks = 0) : rows_(num_tasks) {}

  // Stage i (0-based) takes exactly i + 1 values in [0, 1]; each stage is
  // recorded once.
  void record_row(std::size_t stage, std::span<const double> accuracies);

  std::size_t num_tasks() const { return rows_.size(); }
  bool has_row(std::size_t stage) const { return stage < rows_.size() && rows_[stage].has_value(); }
  const std::vector<double>& row(std::size_t stage) const;
  std::optional<double> at(std::size_t stage, std::size_t task) const;
  std::size_t defined_entries() const;

 private:
  std::vector<std::optional<std::vector<double>>> rows_;
};

// Sample-weighted accuracy over all seen test sets after each stage, in [0, 1].
std::vector<double> stage_accuracies(const AccuracyMatrix& m, std::span<const std::size_t> test_sizes);

// Mean of the stage accuracies, as a percentage.
double avg_accuracy(const AccuracyMatrix& m, std::span<const std::size_t> test_sizes);

// Final-stage accuracy over all classes, as a percentage.
double last_accuracy(const AccuracyMatrix& m, std::span<const std::size_t> test_sizes);

// Mean over earlier tasks of (best accuracy ever - final accuracy), as a percentage.
double forgetting(const AccuracyMatrix& m);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd mean_std(std::span<const double> values);

}  // namespace ldep
