// ldeprompt: run, ablate, checkpoint/resume and summarize class-incremental experiments.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad usage or invalid config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ldeprompt/config.hpp"
#include "ldeprompt/data.hpp"
#include "ldeprompt/errors.hpp"
#include "ldeprompt/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::string state_path;
  std::string report_path;
  std::size_t seed_index = 0;
  std::size_t after_task = 1;
  bool curves = false;
  bool no_timestamp = false;
};

ldep::RunConfig load_config(const Options& o) {
  if (!o.config_path.empty()) return ldep::load_run_config(o.config_path, o.overrides);
  json j = json::object();
  for (const auto& ov : o.overrides) ldep::apply_override(j, ov);
  return ldep::RunConfig::from_json(j);
}

std::string timestamp(const Options& o) { return o.no_timestamp ? std::string() : ldep::utc_timestamp(); }

void finish_run(const ldep::RunConfig& config, const std::vector<json>& seeds, const Options& o) {
  const fs::path dir = o.output_dir.empty() ? fs::path(config.output_dir) : fs::path(o.output_dir);
  const json report = ldep::build_report(config, seeds, timestamp(o));
  ldep::write_run_outputs(dir, report);
  std::cout << ldep::report_table(report);
  std::cout << "wrote " << (dir / "report.json").string() << "\n";
}

int cmd_run(const Options& o) {
  const auto config = load_config(o);
  finish_run(config, ldep::run_seeds(config), o);
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto config = load_config(o);
  const json ablation = ldep::run_ablation(config);
  const fs::path dir = o.output_dir.empty() ? fs::path(config.output_dir) : fs::path(o.output_dir);
  fs::create_directories(dir);
  std::ofstream(dir / "ablation.json") << ablation.dump(2) << "\n";
  std::ofstream csv(dir / "ablation.csv");
  csv << "label,variant,avg,last,forgetting\n";
  for (const auto& r : ablation.at("rows")) {
    csv << r.at("label").get<std::string>() << ',' << r.at("variant").get<int>() << ',' << r.at("avg").get<double>()
        << ',' << r.at("last").get<double>() << ',';
    if (!r.at("forgetting").is_null()) csv << r.at("forgetting").get<double>();
    csv << '\n';
  }
  std::cout << ldep::ablation_table(ablation);
  std::cout << "wrote " << (dir / "ablation.json").string() << "\n";
  return 0;
}

int cmd_checkpoint(const Options& o) {
  const auto config = load_config(o);
  const auto state = ldep::run_until(config, o.seed_index, o.after_task);
  ldep::save_checkpoint(o.state_path, state);
  std::cout << "checkpoint after task " << o.after_task << " of seed " << config.seeds.at(o.seed_index) << " -> "
            << o.state_path << "\n";
  return 0;
}

int cmd_resume(const Options& o) {
  auto state = ldep::load_checkpoint(o.state_path);
  const auto config = state.config;
  finish_run(config, ldep::resume(std::move(state)), o);
  return 0;
}

int cmd_report(const Options& o) {
  std::ifstream in(o.report_path);
  if (!in) throw ldep::IoError("cannot open " + o.report_path);
  json report;
  try {
    report = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ldep::DataError(o.report_path + ": " + e.what());
  }
  std::cout << ldep::report_table(report);
  if (o.curves) std::cout << "\n" << ldep::curves_csv(report);
  return 0;
}

int cmd_export(const Options& o) {
  const auto config = load_config(o);
  if (config.dataset.kind != "synthetic") throw ldep::ConfigError("export-data needs dataset.kind=synthetic");
  if (o.output_dir.empty()) throw ldep::ConfigError("export-data needs --output-dir");
  const auto data = ldep::generate_synthetic(config.dataset.synthetic);
  ldep::save_image_dataset(data.train, fs::path(o.output_dir) / "train");
  ldep::save_image_dataset(data.test, fs::path(o.output_dir) / "test");
  std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test images under "
            << o.output_dir << "\n";
  return 0;
}

void add_config_options(CLI::App* cmd, Options& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file (defaults apply when omitted)")
      ->check(CLI::ExistingFile);
  cmd->add_option("overrides", o.overrides, "dotted.key=value overrides, e.g. train.epochs=3");
  cmd->add_option("-o,--output-dir", o.output_dir, "output directory (overrides output_dir)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-importance guided prompt insertion for class-incremental learning"};
  app.require_subcommand(1);
  Options o;

  auto* run = app.add_subcommand("run", "train and evaluate every configured seed");
  add_config_options(run, o);
  run->add_flag("--no-timestamp", o.no_timestamp, "omit the timestamp from report.json");

  auto* ablate = app.add_subcommand("ablate", "run variants (1)-(4) on the first seed");
  add_config_options(ablate, o);

  auto* ckpt = app.add_subcommand("checkpoint", "run until a task boundary and save the experiment state");
  add_config_options(ckpt, o);
  ckpt->add_option("--seed-index", o.seed_index, "index into seeds of the seed to stop in");
  ckpt->add_option("--after-task", o.after_task, "number of tasks of that seed to finish")->required();
  ckpt->add_option("--state", o.state_path, "checkpoint file to write")->required();

  auto* res = app.add_subcommand("resume", "finish an experiment from a checkpoint");
  res->add_option("--state", o.state_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  res->add_option("-o,--output-dir", o.output_dir, "output directory (overrides output_dir)");
  res->add_flag("--no-timestamp", o.no_timestamp, "omit the timestamp from report.json");

  auto* report = app.add_subcommand("report", "print the summary table of a report.json");
  report->add_option("--report", o.report_path, "report.json")->required();
  report->add_flag("--curves", o.curves, "also print the per-stage accuracy curves");

  auto* exp = app.add_subcommand("export-data", "write the synthetic dataset in the on-disk format");
  add_config_options(exp, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(o);
    if (*ablate) return cmd_ablate(o);
    if (*ckpt) return cmd_checkpoint(o);
    if (*res) return cmd_resume(o);
    if (*report) return cmd_report(o);
    if (*exp) return cmd_export(o);
  } catch (const ldep::ConfigError& e) {
    std::cerr << "config error:\n" << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
