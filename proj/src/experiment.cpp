#include "ldeprompt/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <zlib.h>

#include "ldeprompt/errors.hpp"

namespace ldep {

using nlohmann::json;

TaskStream build_stream(const RunConfig& config, std::uint64_t seed) {
  Dataset train, test;
  int classes = 0;
  if (config.dataset.kind == "synthetic") {
    auto data = generate_synthetic(config.dataset.synthetic);
    train = std::move(data.train);
    test = std::move(data.test);
    classes = config.dataset.synthetic.classes;
  } else {
    train = load_image_dataset(config.dataset.train_root, config.backbone.image_side, config.backbone.channels);
    test = load_image_dataset(config.dataset.test_root, config.backbone.image_side, config.backbone.channels);
    for (int l : train.labels) classes = std::max(classes, l + 1);
  }
  const auto splits = make_splits(SplitSpec{classes, config.split_base, config.split_increment, seed});
  return make_task_stream(train, test, splits);
}

// --- TaskSession <-> JSON ----------------------------------------------------

namespace {

json sizes_json(const std::map<int, std::size_t>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

std::map<int, std::size_t> sizes_from_json(const json& j) {
  std::map<int, std::size_t> m;
  for (const auto& [k, v] : j.items()) m[std::stoi(k)] = v.get<std::size_t>();
  return m;
}

json session_json(const TaskSession& s, const std::vector<int>& classes) {
  return json{
      {"task", s.task_id},
      {"classes", classes},
      {"class_offset", s.class_offset},
      {"class_count", s.class_count},
      {"importance",
       {{"ig", s.importance.ig},
        {"alpha", s.importance.alpha},
        {"selected", s.importance.selected},
        {"num_samples", s.importance.num_samples},
        {"num_bins", s.importance.num_bins}}},
      {"fresh_prompts", sizes_json(s.fresh_per_layer)},
      {"pool_sizes", sizes_json(s.pool_sizes)},
      {"loss_history", s.loss_history},
  };
}

TaskSession session_from_json(const json& j) {
  TaskSession s;
  s.task_id = j.at("task").get<int>();
  s.class_offset = j.at("class_offset").get<int>();
  s.class_count = j.at("class_count").get<int>();
  const auto& imp = j.at("importance");
  s.importance.ig = imp.at("ig").get<std::vector<double>>();
  s.importance.alpha = imp.at("alpha").get<std::vector<double>>();
  s.importance.selected = imp.at("selected").get<std::vector<int>>();
  s.importance.num_samples = imp.at("num_samples").get<int>();
  s.importance.num_bins = imp.at("num_bins").get<int>();
  s.fresh_per_layer = sizes_from_json(j.at("fresh_prompts"));
  s.pool_sizes = sizes_from_json(j.at("pool_sizes"));
  s.loss_history = j.at("loss_history").get<std::vector<double>>();
  return s;
}

// Report copy of the config without execution-only settings.
json report_config(const RunConfig& config) {
  json j = config.to_json();
  j.erase("output_dir");
  j.erase("parallel_seeds");
  return j;
}

// --- binary helpers ---------------------------------------------------------

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IntegrityError("checkpoint payload truncated");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ULL << 32)) throw IntegrityError("checkpoint string length out of range");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw IntegrityError("checkpoint payload truncated");
  return s;
}

void put_tensor(std::ostream& os, const Tensor<float>& t) {
  put<std::uint8_t>(os, t.defined() ? 1 : 0);
  if (!t.defined()) return;
  put<std::uint8_t>(os, t.requires_grad() ? 1 : 0);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) put<std::int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.value().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

Tensor<float> get_tensor(std::istream& is) {
  if (get<std::uint8_t>(is) == 0) return {};
  const bool requires_grad = get<std::uint8_t>(is) != 0;
  const auto rank = get<std::uint32_t>(is);
  if (rank > 8) throw IntegrityError("checkpoint tensor rank out of range");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get<std::int64_t>(is);
    if (d <= 0 || d > (1LL << 31)) throw IntegrityError("checkpoint tensor dimension out of range");
    shape.push_back(d);
  }
  Vector<float> values(shape_size(shape));
  if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)))) {
    throw IntegrityError("checkpoint payload truncated");
  }
  return Tensor<float>(std::move(shape), std::move(values), requires_grad);
}

// Overwrites dst's values in place so every shared handle sees the restored weights.
void restore_into(Tensor<float>& dst, const Tensor<float>& src) {
  if (dst.shape() != src.shape()) {
    throw IntegrityError("checkpoint tensor " + to_string(src.shape()) + " does not match " + to_string(dst.shape()));
  }
  dst.value() = src.value();
  dst.set_requires_grad(src.requires_grad());
}

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

// --- SeedRun ------------------------------------------------------------------

SeedRun::SeedRun(const RunConfig& config, std::uint64_t seed)
    : SeedRun(config, seed, Learner<float>(config.backbone, config.train, seed)) {}

SeedRun::SeedRun(const RunConfig& config, std::uint64_t seed, Learner<float> learner)
    : config_(config),
      seed_(seed),
      stream_(build_stream(config, seed)),
      learner_(std::move(learner)),
      matrix_(stream_.tasks.size()) {}

std::vector<std::size_t> SeedRun::test_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& t : stream_.tasks) out.push_back(static_cast<std::size_t>(t.test.size()));
  return out;
}

void SeedRun::step() {
  if (done()) throw ContractError("every task of the stream is already trained");
  const std::size_t t = next_task();
  const Task& task = stream_.tasks[t];
  sessions_.push_back(learner_.train_task(task.train, static_cast<int>(task.classes.size())));
  std::vector<Dataset> tests;
  for (std::size_t j = 0; j <= t; ++j) tests.push_back(stream_.tasks[j].test);
  const auto acc = learner_.evaluate(tests);
  matrix_.record_row(t, acc);
}

void SeedRun::finish() {
  while (!done()) step();
}

json SeedRun::report() const {
  if (!done()) throw ContractError("seed report requested before the stream finished");
  const auto sizes = test_sizes();
  json matrix = json::array();
  for (std::size_t i = 0; i < matrix_.num_tasks(); ++i) matrix.push_back(matrix_.row(i));
  json stage = json::array();
  for (double a : stage_accuracies(matrix_, sizes)) stage.push_back(100.0 * a);
  json tasks = json::array();
  for (std::size_t t = 0; t < sessions_.size(); ++t) tasks.push_back(session_json(sessions_[t], stream_.tasks[t].classes));
  return json{
      {"seed", seed_},
      {"variant", static_cast<int>(config_.train.variant)},
      {"num_tasks", matrix_.num_tasks()},
      {"test_sizes", sizes},
      {"accuracy_matrix", matrix},
      {"stage_accuracy", stage},
      {"avg", avg_accuracy(matrix_, sizes)},
      {"last", last_accuracy(matrix_, sizes)},
      {"forgetting", matrix_.num_tasks() >= 2 ? json(forgetting(matrix_)) : json(nullptr)},
      {"tasks", tasks},
  };
}

void SeedRun::save(std::ostream& os) const {
  const auto& st = learner_.state();
  json meta;
  meta["tasks_done"] = st.tasks_done;
  meta["seen_classes"] = st.seen_classes;
  meta["fixed_layers"] = st.fixed_layers;
  json rows = json::array();
  for (std::size_t i = 0; i < matrix_.num_tasks() && matrix_.has_row(i); ++i) rows.push_back(matrix_.row(i));
  meta["matrix"] = rows;
  json sessions = json::array();
  for (std::size_t t = 0; t < sessions_.size(); ++t) sessions.push_back(session_json(sessions_[t], stream_.tasks[t].classes));
  meta["sessions"] = sessions;

  put<std::uint64_t>(os, seed_);
  put_string(os, meta.dump());
  const auto params = st.backbone.parameters();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) put_tensor(os, p);
  put_tensor(os, st.classifier);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(st.global.total()));
  for (int layer : st.global.layers()) {
    for (const auto& e : st.global.layer(layer)) {
      put<std::int32_t>(os, e.layer_id);
      put<std::int32_t>(os, e.task_id);
      put<std::uint8_t>(os, e.frozen ? 1 : 0);
      put_tensor(os, e.key);
      put_tensor(os, e.p_k);
      put_tensor(os, e.p_v);
    }
  }
}

SeedRun SeedRun::load(std::istream& is, const RunConfig& config) {
  const auto seed = get<std::uint64_t>(is);
  json meta;
  try {
    meta = json::parse(get_string(is));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint metadata unreadable: ") + e.what());
  }

  LearnerState<float> state;
  state.backbone = Backbone<float>(config.backbone, seed);
  auto params = state.backbone.parameters();
  if (get<std::uint32_t>(is) != params.size()) throw IntegrityError("checkpoint backbone layout mismatch");
  for (auto& p : params) restore_into(p, get_tensor(is));
  state.classifier = get_tensor(is);
  const auto entries = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < entries; ++i) {
    PromptEntry<float> e;
    e.layer_id = get<std::int32_t>(is);
    e.task_id = get<std::int32_t>(is);
    e.frozen = get<std::uint8_t>(is) != 0;
    e.key = get_tensor(is);
    e.p_k = get_tensor(is);
    e.p_v = get_tensor(is);
    if (e.layer_id < 0 || e.layer_id >= config.backbone.num_layers) throw IntegrityError("checkpoint prompt layer out of range");
    state.global.append(std::move(e));
  }
  try {
    state.tasks_done = meta.at("tasks_done").get<int>();
    state.seen_classes = meta.at("seen_classes").get<int>();
    state.fixed_layers = meta.at("fixed_layers").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint metadata incomplete: ") + e.what());
  }

  SeedRun run(config, seed, Learner<float>(config.train, seed, std::move(state)));
  const auto& rows = meta.at("matrix");
  for (std::size_t i = 0; i < rows.size(); ++i) run.matrix_.record_row(i, rows[i].get<std::vector<double>>());
  for (const auto& s : meta.at("sessions")) run.sessions_.push_back(session_from_json(s));
  if (run.sessions_.size() != run.next_task() || rows.size() != run.next_task()) {
    throw IntegrityError("checkpoint task cursor disagrees with its history");
  }
  return run;
}

// --- reports ------------------------------------------------------------------

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json build_report(const RunConfig& config, const std::vector<json>& seed_reports, const std::string& timestamp) {
  std::vector<double> avg, last, forget;
  bool has_forgetting = true;
  for (const auto& s : seed_reports) {
    avg.push_back(s.at("avg").get<double>());
    last.push_back(s.at("last").get<double>());
    if (s.at("forgetting").is_null()) {
      has_forgetting = false;
    } else {
      forget.push_back(s.at("forgetting").get<double>());
    }
  }
  const auto stat = [](const std::vector<double>& v) {
    const auto ms = mean_std(v);
    return json{{"mean", ms.mean}, {"std", ms.std}};
  };
  json aggregate = {{"num_seeds", seed_reports.size()}, {"avg", stat(avg)}, {"last", stat(last)}};
  aggregate["forgetting"] = has_forgetting ? stat(forget) : json(nullptr);
  json report = {{"format", "ldeprompt-report"}, {"version", 1}};
  if (!timestamp.empty()) report["timestamp"] = timestamp;
  report["config"] = report_config(config);
  report["seeds"] = seed_reports;
  report["aggregate"] = aggregate;
  return report;
}

std::vector<json> run_seeds(const RunConfig& config) {
  std::vector<json> reports(config.seeds.size());
  const auto run_one = [&](std::size_t i) {
    SeedRun run(config, config.seeds[i]);
    run.finish();
    reports[i] = run.report();
  };
  if (!config.parallel_seeds || config.seeds.size() < 2) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) run_one(i);
    return reports;
  }
  std::vector<std::exception_ptr> failures(config.seeds.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < config.seeds.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        run_one(i);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
  return reports;
}

std::string accuracy_matrix_csv(const json& seed_report) {
  const auto& matrix = seed_report.at("accuracy_matrix");
  const std::size_t t = matrix.size();
  std::ostringstream os;
  os << "stage";
  for (std::size_t j = 0; j < t; ++j) os << ",task_" << j + 1;
  os << '\n';
  for (std::size_t i = 0; i < t; ++i) {
    os << i + 1;
    for (std::size_t j = 0; j < t; ++j) {
      os << ',';
      if (j < matrix[i].size()) os << fmt(matrix[i][j].get<double>(), 6);
    }
    os << '\n';
  }
  return os.str();
}

std::string curves_csv(const json& report) {
  const auto& seeds = report.at("seeds");
  std::ostringstream os;
  os << "stage";
  for (const auto& s : seeds) os << ",seed_" << s.at("seed").get<std::uint64_t>();
  os << ",mean\n";
  const std::size_t stages = seeds.empty() ? 0 : seeds[0].at("stage_accuracy").size();
  for (std::size_t i = 0; i < stages; ++i) {
    os << i + 1;
    double total = 0.0;
    for (const auto& s : seeds) {
      const double v = s.at("stage_accuracy").at(i).get<double>();
      total += v;
      os << ',' << fmt(v, 4);
    }
    os << ',' << fmt(total / static_cast<double>(seeds.size()), 4) << '\n';
  }
  return os.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void write_run_outputs(const std::filesystem::path& dir, const json& report) {
  std::filesystem::create_directories(dir);
  write_file(dir / "report.json", report.dump(2) + "\n");
  for (const auto& s : report.at("seeds")) {
    write_file(dir / ("accuracy_matrix_" + std::to_string(s.at("seed").get<std::uint64_t>()) + ".csv"),
               accuracy_matrix_csv(s));
  }
  write_file(dir / "curves.csv", curves_csv(report));
}

json run_ablation(const RunConfig& config) {
  const std::uint64_t seed = config.seeds.front();
  json rows = json::array();
  json runs = json::array();
  for (int v = 1; v <= 4; ++v) {
    RunConfig c = config;
    c.train.variant = variant_from_int(v);
    SeedRun run(c, seed);
    run.finish();
    const json r = run.report();
    rows.push_back(json{{"label", "(" + std::to_string(v) + ")"},
                        {"variant", v},
                        {"description", variant_name(c.train.variant)},
                        {"avg", r.at("avg")},
                        {"last", r.at("last")},
                        {"forgetting", r.at("forgetting")}});
    runs.push_back(r);
  }
  return json{{"seed", seed}, {"config", report_config(config)}, {"rows", rows}, {"runs", runs}};
}

std::string ablation_table(const json& ablation) {
  std::ostringstream os;
  os << "#    Avg      Last     variant\n";
  for (const auto& r : ablation.at("rows")) {
    os << std::left << std::setw(5) << r.at("label").get<std::string>() << std::setw(9)
       << fmt(r.at("avg").get<double>(), 2) << std::setw(9) << fmt(r.at("last").get<double>(), 2)
       << r.at("description").get<std::string>() << '\n';
  }
  return os.str();
}

std::string report_table(const json& report) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "seed" << std::setw(18) << "Avg" << std::setw(18) << "Last" << "Forgetting\n";
  for (const auto& s : report.at("seeds")) {
    const auto& f = s.at("forgetting");
    os << std::setw(12) << s.at("seed").get<std::uint64_t>() << std::setw(18) << fmt(s.at("avg").get<double>(), 2)
       << std::setw(18) << fmt(s.at("last").get<double>(), 2) << (f.is_null() ? "-" : fmt(f.get<double>(), 2)) << '\n';
  }
  const auto& agg = report.at("aggregate");
  const auto pm = [](const json& ms) {
    return fmt(ms.at("mean").get<double>(), 2) + " ± " + fmt(ms.at("std").get<double>(), 2);
  };
  os << std::setw(12) << "aggregate" << std::setw(19) << pm(agg.at("avg")) << std::setw(19) << pm(agg.at("last"))
     << (agg.at("forgetting").is_null() ? "-" : pm(agg.at("forgetting"))) << '\n';
  return os.str();
}

// --- checkpoint container ------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'L', 'D', 'E', 'P', 'C', 'K', 'P', 'T'};

std::uint32_t crc(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ExperimentState& state) {
  std::ostringstream payload(std::ios::binary);
  put_string(payload, state.config.to_json().dump());
  put<std::uint32_t>(payload, static_cast<std::uint32_t>(state.completed.size()));
  for (const auto& r : state.completed) put_string(payload, r.dump());
  put<std::uint8_t>(payload, state.current ? 1 : 0);
  if (state.current) state.current->save(payload);

  std::ostringstream body(std::ios::binary);
  body.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(body, kCheckpointVersion);
  put_string(body, payload.str());
  std::string bytes = body.str();
  const std::uint32_t sum = crc(bytes);
  bytes.append(reinterpret_cast<const char*>(&sum), sizeof sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, bytes);
}

ExperimentState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kMagic + 4 + 8 + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError(path.string() + " is not a checkpoint file");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + ", this build reads version " +
                       std::to_string(kCheckpointVersion));
  }
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  const std::string body = bytes.substr(0, bytes.size() - sizeof stored);
  if (crc(body) != stored) throw IntegrityError("checkpoint checksum mismatch in " + path.string());

  std::istringstream bis(body.substr(sizeof kMagic + 4), std::ios::binary);
  std::istringstream is(get_string(bis), std::ios::binary);
  ExperimentState state;
  try {
    state.config = RunConfig::from_json(json::parse(get_string(is)));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint config unreadable: ") + e.what());
  }
  const auto completed = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < completed; ++i) state.completed.push_back(json::parse(get_string(is)));
  if (get<std::uint8_t>(is) != 0) state.current.emplace(SeedRun::load(is, state.config));
  return state;
}

ExperimentState run_until(const RunConfig& config, std::size_t seed_index, std::size_t after_tasks) {
  if (seed_index >= config.seeds.size()) throw ContractError("checkpoint seed index out of range");
  ExperimentState state;
  state.config = config;
  for (std::size_t i = 0; i < seed_index; ++i) {
    SeedRun run(config, config.seeds[i]);
    run.finish();
    state.completed.push_back(run.report());
  }
  state.current.emplace(config, config.seeds[seed_index]);
  if (after_tasks > state.current->num_tasks()) {
    throw ContractError("checkpoint after " + std::to_string(after_tasks) + " tasks, but the stream has " +
                        std::to_string(state.current->num_tasks()));
  }
  while (state.current->next_task() < after_tasks) state.current->step();
  return state;
}

std::vector<json> resume(ExperimentState state) {
  std::vector<json> reports = std::move(state.completed);
  if (state.current) {
    state.current->finish();
    reports.push_back(state.current->report());
  }
  for (std::size_t i = reports.size(); i < state.config.seeds.size(); ++i) {
    SeedRun run(state.config, state.config.seeds[i]);
    run.finish();
    reports.push_back(run.report());
  }
  return reports;
}

}  // namespace ldep
