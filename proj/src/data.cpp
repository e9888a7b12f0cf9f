#include "ldeprompt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ldeprompt/errors.hpp"
#include "ldeprompt/random.hpp"

namespace ldep {

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  out.side = side;
  out.channels = channels;
  out.images.resize(static_cast<Index>(rows.size()), images.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.images.row(static_cast<Index>(i)) = images.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

void SplitSpec::validate() const {
  std::ostringstream err;
  if (total_classes <= 0) err << "split: total_classes must be positive; ";
  if (base < 0) err << "split.base must be >= 0; ";
  if (increment <= 0) err << "split.increment must be positive; ";
  if (total_classes > 0 && base >= 0 && increment > 0) {
    if (base > total_classes || (total_classes - base) % increment != 0) {
      err << "split B" << base << "-Inc" << increment << " does not exactly cover " << total_classes << " classes; ";
    }
  }
  if (!err.str().empty()) throw ConfigError(err.str());
}

std::vector<std::vector<int>> make_splits(const SplitSpec& spec) {
  spec.validate();
  std::vector<int> order(static_cast<std::size_t>(spec.total_classes));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(spec.seed, "class-order"));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<int>> tasks;
  auto it = order.begin();
  if (spec.base > 0) {
    tasks.emplace_back(it, it + spec.base);
    it += spec.base;
  }
  while (it != order.end()) {
    tasks.emplace_back(it, it + spec.increment);
    it += spec.increment;
  }
  return tasks;
}

void SyntheticSpec::validate() const {
  std::ostringstream err;
  if (classes <= 0) err << "dataset.classes must be positive; ";
  if (train_per_class <= 0) err << "dataset.train_per_class must be positive; ";
  if (test_per_class <= 0) err << "dataset.test_per_class must be positive; ";
  if (image_side <= 0) err << "dataset.image_side must be positive; ";
  if (channels <= 0) err << "dataset.channels must be positive; ";
  if (!(separation > 0)) err << "dataset.separation must be positive; ";
  if (!(noise >= 0)) err << "dataset.noise must be >= 0; ";
  if (!err.str().empty()) throw ConfigError(err.str());
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Index pixels = static_cast<Index>(spec.image_side) * spec.image_side * spec.channels;
  SyntheticData out;
  out.templates.resize(spec.classes, pixels);
  Rng template_rng(derive_seed(spec.seed, "synthetic-templates"));
  fill_normal(out.templates, static_cast<float>(spec.separation), template_rng);

  const auto sample = [&](int per_class, std::string_view purpose) {
    Dataset d;
    d.side = spec.image_side;
    d.channels = spec.channels;
    d.images.resize(static_cast<Index>(spec.classes) * per_class, pixels);
    Rng rng(derive_seed(spec.seed, purpose));
    RowMatrix<float> noise(1, pixels);
    for (int c = 0; c < spec.classes; ++c) {
      for (int i = 0; i < per_class; ++i) {
        fill_normal(noise, static_cast<float>(spec.noise), rng);
        d.images.row(static_cast<Index>(c) * per_class + i) = out.templates.row(c) + noise;
        d.labels.push_back(c);
      }
    }
    return d;
  };
  out.train = sample(spec.train_per_class, "synthetic-train");
  out.test = sample(spec.test_per_class, "synthetic-test");
  return out;
}

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

Dataset load_image_dataset(const std::filesystem::path& root, int side, int channels) {
  const auto index_path = root / "index.csv";
  std::ifstream index(index_path);
  if (!index) throw IoError("cannot open dataset index " + index_path.string());

  Dataset out;
  out.side = side;
  out.channels = channels;
  const Index pixels = static_cast<Index>(side) * side * channels;
  std::vector<std::vector<float>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(index, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw IoError(index_path.string() + ":" + std::to_string(line_no) + ": expected relative_path,label");
    }
    const std::string rel = trim(line.substr(0, comma));
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(line.substr(comma + 1), &used);
    } catch (const std::exception&) {
      throw IoError(index_path.string() + ":" + std::to_string(line_no) + ": bad label");
    }
    if (label < 0) throw DataError(index_path.string() + ":" + std::to_string(line_no) + ": negative label");

    const auto file = root / rel;
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open image " + file.string());
    unsigned char header[12];
    if (!in.read(reinterpret_cast<char*>(header), 12)) throw IoError("truncated image header in " + file.string());
    const std::uint32_t w = read_u32(header), h = read_u32(header + 4), c = read_u32(header + 8);
    if (w != static_cast<std::uint32_t>(side) || h != static_cast<std::uint32_t>(side) ||
        c != static_cast<std::uint32_t>(channels)) {
      throw DataError(file.string() + " is " + std::to_string(w) + "x" + std::to_string(h) + "x" + std::to_string(c) +
                      ", expected " + std::to_string(side) + "x" + std::to_string(side) + "x" +
                      std::to_string(channels));
    }
    std::vector<unsigned char> bytes(static_cast<std::size_t>(pixels));
    if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
      throw IoError("truncated pixel data in " + file.string());
    }
    std::vector<float> row(bytes.size());
    std::transform(bytes.begin(), bytes.end(), row.begin(), [](unsigned char b) { return static_cast<float>(b) / 255.0f; });
    rows.push_back(std::move(row));
    out.labels.push_back(label);
  }
  out.images.resize(static_cast<Index>(rows.size()), pixels);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.images.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(rows[i].data(), pixels);
  }
  return out;
}

void save_image_dataset(const Dataset& data, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  std::ofstream index(root / "index.csv");
  if (!index) throw IoError("cannot write " + (root / "index.csv").string());
  for (Index i = 0; i < data.size(); ++i) {
    const std::string name = "img_" + std::to_string(i) + ".raw";
    std::ofstream out(root / name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (root / name).string());
    write_u32(out, static_cast<std::uint32_t>(data.side));
    write_u32(out, static_cast<std::uint32_t>(data.side));
    write_u32(out, static_cast<std::uint32_t>(data.channels));
    std::vector<unsigned char> bytes(static_cast<std::size_t>(data.images.cols()));
    for (Index j = 0; j < data.images.cols(); ++j) {
      const float v = std::clamp(data.images(i, j), 0.0f, 1.0f);
      bytes[static_cast<std::size_t>(j)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    index << name << ',' << data.labels[static_cast<std::size_t>(i)] << '\n';
  }
}

int TaskStream::total_classes() const {
  int n = 0;
  for (const auto& t : tasks) n += static_cast<int>(t.classes.size());
  return n;
}

TaskStream make_task_stream(const Dataset& train, const Dataset& test, const std::vector<std::vector<int>>& splits) {
  std::map<int, int> relabel;
  TaskStream stream;
  int next = 0;
  for (const auto& classes : splits) {
    Task task;
    task.classes = classes;
    task.class_offset = next;
    for (int c : classes) {
      if (!relabel.emplace(c, next++).second) throw DataError("class " + std::to_string(c) + " appears in two tasks");
    }
    stream.tasks.push_back(std::move(task));
  }
  const auto fill = [&](const Dataset& src, auto member) {
    std::vector<std::vector<Index>> rows(stream.tasks.size());
    for (Index i = 0; i < src.size(); ++i) {
      const auto it = relabel.find(src.labels[static_cast<std::size_t>(i)]);
      if (it == relabel.end()) continue;
      const auto task = static_cast<std::size_t>(
          std::upper_bound(stream.tasks.begin(), stream.tasks.end(), it->second,
                           [](int label, const Task& t) { return label < t.class_offset; }) -
          stream.tasks.begin() - 1);
      rows[task].push_back(i);
    }
    for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
      Dataset d = src.subset(rows[t]);
      for (int& l : d.labels) l = relabel.at(l);
      stream.tasks[t].*member = std::move(d);
    }
  };
  fill(train, &Task::train);
  fill(test, &Task::test);
  return stream;
}

}  // namespace ldep
