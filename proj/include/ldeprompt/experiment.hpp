#pragma once

// Seeded class-incremental runs, run reports, ablations and checkpoints.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldeprompt/config.hpp"
#include "ldeprompt/metrics.hpp"
#include "ldeprompt/trainer.hpp"

namespace ldep {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Task stream for one seed: the class order comes from the seed, the images
// from the dataset section.
TaskStream build_stream(const RunConfig& config, std::uint64_t seed);

// One seed's trip through the task stream, advanced a task at a time.
class SeedRun {
 public:
  SeedRun(const RunConfig& config, std::uint64_t seed);

  bool done() const { return next_task() >= stream_.tasks.size(); }
  std::size_t next_task() const { return static_cast<std::size_t>(learner_.state().tasks_done); }
  std::size_t num_tasks() const { return stream_.tasks.size(); }

  // Trains the next task and records its accuracy row.
  void step();
  void finish();

  std::uint64_t seed() const { return seed_; }
  const AccuracyMatrix& matrix() const { return matrix_; }
  const std::vector<TaskSession>& sessions() const { return sessions_; }
  const Learner<float>& learner() const { return learner_; }
  std::vector<std::size_t> test_sizes() const;

  // Per-seed section of report.json.
  nlohmann::json report() const;

  void save(std::ostream& os) const;
  static SeedRun load(std::istream& is, const RunConfig& config);

 private:
  SeedRun(const RunConfig& config, std::uint64_t seed, Learner<float> learner);

  RunConfig config_;
  std::uint64_t seed_;
  TaskStream stream_;
  Learner<float> learner_;
  AccuracyMatrix matrix_;
  std::vector<TaskSession> sessions_;
};

// Complete report.json document. timestamp may be empty to omit the value.
nlohmann::json build_report(const RunConfig& config, const std::vector<nlohmann::json>& seed_reports,
                            const std::string& timestamp);

std::string utc_timestamp();

// Runs every configured seed (in parallel threads when config.parallel_seeds).
std::vector<nlohmann::json> run_seeds(const RunConfig& config);

// Writes report.json, accuracy_matrix_<seed>.csv and curves.csv.
void write_run_outputs(const std::filesystem::path& dir, const nlohmann::json& report);

std::string accuracy_matrix_csv(const nlohmann::json& seed_report);
std::string curves_csv(const nlohmann::json& report);

// Variants 1..4 on the first configured seed.
nlohmann::json run_ablation(const RunConfig& config);
std::string ablation_table(const nlohmann::json& ablation);

// Human-readable Avg / Last / forgetting table for a report.
std::string report_table(const nlohmann::json& report);

// Whole-experiment checkpoint: config, finished seed reports and the state of
// the seed in progress.
struct ExperimentState {
  RunConfig config;
  std::vector<nlohmann::json> completed;
  std::optional<SeedRun> current;
};

// Container: "LDEPCKPT" magic, u32 version, payload, u32 CRC-32 of everything before it.
void save_checkpoint(const std::filesystem::path& path, const ExperimentState& state);
ExperimentState load_checkpoint(const std::filesystem::path& path);

// Runs seeds from the start until `after_tasks` tasks of seed `seed_index` are done.
ExperimentState run_until(const RunConfig& config, std::size_t seed_index, std::size_t after_tasks);

// Finishes the current seed and every remaining seed.
std::vector<nlohmann::json> resume(ExperimentState state);

}  // namespace ldep
