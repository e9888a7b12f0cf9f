#pragma once

// Experiment configuration (JSON) with dotted-key overrides.
//
// {
//   "dataset":    {"kind": "synthetic", "classes": 10, "train_per_class": 40, "test_per_class": 20,
//                  "separation": 1.0, "noise": 0.5, "seed": 1993}
//              or {"kind": "disk", "train_root": "...", "test_root": "..."},
//   "split":      {"base": 0, "increment": 2},
//   "backbone":   {"num_layers": 6, "embed_dim": 64, "num_heads": 4, "image_side": 32,
//                  "patch_side": 8, "channels": 3, "mlp_ratio": 2.0},
//   "pool":       {"capacity": 4, "reuse": 2, "prefix_len": 4},
//   "importance": {"num_bins": 8, "num_samples": 256},
//   "train":      {"lr": 0.001, "weight_decay": 0.005, "epochs": 5, "batch_size": 24},
//   "seeds":      [1993],
//   "variant":    4,
//   "output_dir": "runs/default",
//   "parallel_seeds": false
// }
//
// Every key is optional; missing keys take the defaults above.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldeprompt/backbone.hpp"
#include "ldeprompt/data.hpp"
#include "ldeprompt/trainer.hpp"

namespace ldep {

struct DatasetConfig {
  std::string kind = "synthetic";
  SyntheticSpec synthetic;  // image_side/channels come from the backbone section
  std::string train_root;
  std::string test_root;
};

struct RunConfig {
  DatasetConfig dataset;
  int split_base = 0;
  int split_increment = 2;
  BackboneConfig backbone;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{kDefaultSeed};
  std::string output_dir = "runs/default";
  bool parallel_seeds = false;

  // Parses and validates; every problem found is reported in one ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  // Cross-field checks (exact class cover, s < S, head divisibility, ...).
  void validate() const;
};

// Applies "a.b.c=value". The value is parsed as JSON when possible, otherwise
// taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace ldep
