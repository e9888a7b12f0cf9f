#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "ldeprompt/errors.hpp"
#include "ldeprompt/experiment.hpp"

using namespace ldep;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig toy_config() {
  json j = {{"dataset", {{"classes", 10}, {"train_per_class", 8}, {"test_per_class", 4}}},
            {"split", {{"base", 0}, {"increment", 2}}},
            {"backbone", {{"num_layers", 3}, {"embed_dim", 16}, {"num_heads", 2}, {"image_side", 8}, {"patch_side", 4},
                          {"channels", 1}}},
            {"pool", {{"prefix_len", 2}}},
            {"importance", {{"num_samples", 16}}},
            {"train", {{"lr", 0.01}, {"epochs", 2}, {"batch_size", 8}}},
            {"seeds", {3, 4}}};
  return RunConfig::from_json(j);
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ldep_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

const std::vector<json>& toy_reports() {
  static const std::vector<json> reports = run_seeds(toy_config());
  return reports;
}

}  // namespace

TEST(SeedReport, FieldsAgreeWithTheMatrix) {
  const auto& reports = toy_reports();
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& r : reports) {
    ASSERT_EQ(r.at("num_tasks"), 5);
    const auto& m = r.at("accuracy_matrix");
    ASSERT_EQ(m.size(), 5u);
    AccuracyMatrix oracle(5);
    for (std::size_t i = 0; i < 5; ++i) {
      ASSERT_EQ(m[i].size(), i + 1);
      oracle.record_row(i, m[i].get<std::vector<double>>());
    }
    const auto sizes = r.at("test_sizes").get<std::vector<std::size_t>>();
    EXPECT_NEAR(r.at("avg").get<double>(), avg_accuracy(oracle, sizes), 1e-9);
    EXPECT_NEAR(r.at("last").get<double>(), last_accuracy(oracle, sizes), 1e-9);
    EXPECT_NEAR(r.at("forgetting").get<double>(), forgetting(oracle), 1e-9);
    const auto stages = r.at("stage_accuracy").get<std::vector<double>>();
    EXPECT_NEAR(stages.back(), r.at("last").get<double>(), 1e-9);
    ASSERT_EQ(r.at("tasks").size(), 5u);
    for (const auto& t : r.at("tasks")) {
      EXPECT_EQ(t.at("loss_history").size(), 2u);
      EXPECT_TRUE(t.at("importance").contains("alpha"));
    }
  }
}

TEST(RunReport, AggregateAndDeterminism) {
  const auto config = toy_config();
  const auto& seeds = toy_reports();
  const json report = build_report(config, seeds, "");
  EXPECT_EQ(report.at("format"), "ldeprompt-report");
  EXPECT_FALSE(report.contains("timestamp"));
  const std::vector<double> avgs{seeds[0].at("avg").get<double>(), seeds[1].at("avg").get<double>()};
  const auto ms = mean_std(avgs);
  EXPECT_DOUBLE_EQ(report.at("aggregate").at("avg").at("mean").get<double>(), ms.mean);
  EXPECT_DOUBLE_EQ(report.at("aggregate").at("avg").at("std").get<double>(), ms.std);
  EXPECT_EQ(build_report(config, run_seeds(config), "").dump(), report.dump());
  auto parallel = config;
  parallel.parallel_seeds = true;
  EXPECT_EQ(build_report(parallel, run_seeds(parallel), "").dump(), report.dump());
  EXPECT_NE(build_report(config, seeds, "2026-01-01T00:00:00Z").dump(), report.dump());
}

TEST(RunReport, CsvOutputs) {
  const auto& seeds = toy_reports();
  const std::string csv = accuracy_matrix_csv(seeds[0]);
  std::istringstream lines(csv);
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, "stage,task_1,task_2,task_3,task_4,task_5");
  EXPECT_EQ(std::count(first.begin(), first.end(), ','), 5);
  EXPECT_EQ(first.substr(first.size() - 4), ",,,,");
  const auto dir = scratch("outputs");
  write_run_outputs(dir, build_report(toy_config(), seeds, ""));
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "accuracy_matrix_3.csv"));
  EXPECT_TRUE(fs::exists(dir / "accuracy_matrix_4.csv"));
  EXPECT_EQ(read_bytes(dir / "curves.csv").substr(0, 24), "stage,seed_3,seed_4,mean");
  fs::remove_all(dir);
}

TEST(SeedRun, ReportBeforeFinishIsContractError) {
  SeedRun run(toy_config(), 3);
  run.step();
  EXPECT_THROW(run.report(), ContractError);
  run.finish();
  EXPECT_THROW(run.step(), ContractError);
}

TEST(Checkpoint, RoundTripIsByteStable) {
  const auto dir = scratch("ckpt");
  const auto state = run_until(toy_config(), 0, 2);
  save_checkpoint(dir / "a.ckpt", state);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  ASSERT_TRUE(loaded.current.has_value());
  EXPECT_EQ(loaded.current->next_task(), 2u);
  EXPECT_EQ(loaded.current->learner().state().global.sizes(), state.current->learner().state().global.sizes());
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));
  fs::remove_all(dir);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto config = toy_config();
  const auto dir = scratch("resume");
  for (std::size_t seed_index : {0u, 1u}) {
    save_checkpoint(dir / "s.ckpt", run_until(config, seed_index, 2));
    const auto resumed = resume(load_checkpoint(dir / "s.ckpt"));
    EXPECT_EQ(build_report(config, resumed, "").dump(), build_report(config, toy_reports(), "").dump())
        << "seed index " << seed_index;
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto dir = scratch("corrupt");
  save_checkpoint(dir / "c.ckpt", run_until(toy_config(), 0, 1));
  const std::string good = read_bytes(dir / "c.ckpt");

  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  write_bytes(dir / "x.ckpt", flipped);
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), IntegrityError);

  std::string bad_crc = good;
  bad_crc.back() ^= 0x01;
  write_bytes(dir / "x.ckpt", bad_crc);
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), IntegrityError);

  std::string version = good;
  version[8] = 2;
  write_bytes(dir / "x.ckpt", version);
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), VersionError);

  write_bytes(dir / "x.ckpt", good.substr(0, good.size() - 100));
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), IntegrityError);
  write_bytes(dir / "x.ckpt", "LDEP");
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), IntegrityError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, CursorBounds) {
  EXPECT_THROW(run_until(toy_config(), 2, 1), ContractError);
  EXPECT_THROW(run_until(toy_config(), 0, 6), ContractError);
}

TEST(Ablation, FourRowsAndFullRowMatchesRun) {
  auto config = toy_config();
  config.seeds = {3};
  const json ablation = run_ablation(config);
  ASSERT_EQ(ablation.at("rows").size(), 4u);
  for (int v = 1; v <= 4; ++v) EXPECT_EQ(ablation.at("rows")[v - 1].at("variant"), v);
  EXPECT_DOUBLE_EQ(ablation.at("rows")[3].at("avg").get<double>(), toy_reports()[0].at("avg").get<double>());
  const std::string table = ablation_table(ablation);
  EXPECT_NE(table.find("(4)"), std::string::npos);
}
