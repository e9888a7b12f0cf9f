#pragma once

// Class-incremental task streams: B-m Inc-n splits, a seeded synthetic image
// generator, and a minimal on-disk image format.
//
// On-disk layout: <root>/index.csv with lines "relative_path,label", and one
// raw file per image: width, height, channels as 32-bit little-endian
// integers followed by width*height*channels row-major 8-bit pixels.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ldeprompt/tensor.hpp"

namespace ldep {

inline constexpr std::uint64_t kDefaultSeed = 1993;
inline constexpr std::array<std::uint64_t, 3> kDefaultSeeds{1991, 1993, 1995};

struct Dataset {
  RowMatrix<float> images;  // one sample per row, side*side*channels values (y, x, c)
  std::vector<int> labels;
  int side = 0;
  int channels = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Dataset subset(std::span<const Index> rows) const;
};

struct SplitSpec {
  int total_classes = 100;
  int base = 0;        // m
  int increment = 10;  // n
  std::uint64_t seed = kDefaultSeed;

  void validate() const;
};

// Class ids per task in a seeded permutation: a first task of m classes
// (omitted when m = 0) followed by tasks of n classes.
std::vector<std::vector<int>> make_splits(const SplitSpec& spec);

struct SyntheticSpec {
  int classes = 10;
  int train_per_class = 40;
  int test_per_class = 20;
  int image_side = 32;
  int channels = 3;
  double separation = 1.0;
  double noise = 0.5;
  std::uint64_t seed = kDefaultSeed;

  void validate() const;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  RowMatrix<float> templates;  // one class mean per row
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Throws IoError for a missing index or unreadable/truncated file and
// DataError when an image does not match side x side x channels.
Dataset load_image_dataset(const std::filesystem::path& root, int side, int channels);

// Pixels are clamped to [0, 1] and quantized to 8 bits.
void save_image_dataset(const Dataset& data, const std::filesystem::path& root);

struct Task {
  std::vector<int> classes;  // original class ids, in stream order
  int class_offset = 0;      // incremental label of classes[0]
  Dataset train;
  Dataset test;
};

struct TaskStream {
  std::vector<Task> tasks;
  int total_classes() const;
};

// Relabels class classes[t][i] to (number of classes in earlier tasks) + i so
// every task owns a contiguous label range.
TaskStream make_task_stream(const Dataset& train, const Dataset& test, const std::vector<std::vector<int>>& splits);

}  // namespace ldep
