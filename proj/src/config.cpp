#include "ldeprompt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ldeprompt/errors.hpp"

namespace ldep {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object, collecting every error.
class FieldReader {
 public:
  FieldReader(const json& root, std::string path, std::vector<std::string>& errors)
      : errors_(errors), path_(std::move(path)) {
    if (root.is_null()) return;
    if (!root.is_object()) {
      errors_.push_back(path_ + ": expected an object");
      return;
    }
    obj_ = &root;
  }

  ~FieldReader() {
    if (!obj_) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.count(key)) errors_.push_back(qualified(key) + ": unknown key");
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const json& v = obj_->at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return type_error(key, "a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return type_error(key, "an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return type_error(key, "a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return type_error(key, "a string");
    }
    out = v.get<T>();
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return nullptr;
    return &obj_->at(key);
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  void type_error(const std::string& key, const char* what) {
    errors_.push_back(qualified(key) + ": expected " + what);
  }

  std::vector<std::string>& errors_;
  std::string path_;
  const json* obj_ = nullptr;
  std::set<std::string> seen_;
};

const json kNull;

const json& or_null(const json* p) { return p ? *p : kNull; }

std::string join(const std::vector<std::string>& errors) {
  std::ostringstream os;
  for (std::size_t i = 0; i < errors.size(); ++i) os << (i ? "\n" : "") << errors[i];
  return os.str();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  std::vector<std::string> errors;
  {
    FieldReader root(j, "", errors);
    {
      FieldReader d(or_null(root.child("dataset")), "dataset", errors);
      d.read("kind", c.dataset.kind);
      d.read("classes", c.dataset.synthetic.classes);
      d.read("train_per_class", c.dataset.synthetic.train_per_class);
      d.read("test_per_class", c.dataset.synthetic.test_per_class);
      d.read("separation", c.dataset.synthetic.separation);
      d.read("noise", c.dataset.synthetic.noise);
      d.read("seed", c.dataset.synthetic.seed);
      d.read("train_root", c.dataset.train_root);
      d.read("test_root", c.dataset.test_root);
    }
    {
      FieldReader s(or_null(root.child("split")), "split", errors);
      s.read("base", c.split_base);
      s.read("increment", c.split_increment);
    }
    {
      FieldReader b(or_null(root.child("backbone")), "backbone", errors);
      b.read("num_layers", c.backbone.num_layers);
      b.read("embed_dim", c.backbone.embed_dim);
      b.read("num_heads", c.backbone.num_heads);
      b.read("image_side", c.backbone.image_side);
      b.read("patch_side", c.backbone.patch_side);
      b.read("channels", c.backbone.channels);
      b.read("mlp_ratio", c.backbone.mlp_ratio);
    }
    {
      FieldReader p(or_null(root.child("pool")), "pool", errors);
      p.read("capacity", c.train.pool.capacity);
      p.read("reuse", c.train.pool.reuse);
      p.read("prefix_len", c.backbone.prefix_len);
    }
    {
      FieldReader i(or_null(root.child("importance")), "importance", errors);
      i.read("num_bins", c.train.importance.num_bins);
      i.read("num_samples", c.train.importance.num_samples);
    }
    {
      FieldReader t(or_null(root.child("train")), "train", errors);
      t.read("lr", c.train.lr);
      t.read("weight_decay", c.train.weight_decay);
      t.read("epochs", c.train.epochs);
      t.read("batch_size", c.train.batch_size);
    }
    if (const json* seeds = root.child("seeds")) {
      if (!seeds->is_array() || seeds->empty()) {
        errors.push_back("seeds: expected a non-empty array of non-negative integers");
      } else {
        c.seeds.clear();
        for (const auto& s : *seeds) {
          if (!s.is_number_integer() || s.get<std::int64_t>() < 0) {
            errors.push_back("seeds: expected a non-empty array of non-negative integers");
            break;
          }
          c.seeds.push_back(s.get<std::uint64_t>());
        }
      }
    }
    int variant = static_cast<int>(c.train.variant);
    root.read("variant", variant);
    if (variant < 1 || variant > 4) {
      errors.push_back("variant: must be 1, 2, 3 or 4");
    } else {
      c.train.variant = static_cast<Variant>(variant);
    }
    root.read("output_dir", c.output_dir);
    root.read("parallel_seeds", c.parallel_seeds);
  }
  c.dataset.synthetic.image_side = c.backbone.image_side;
  c.dataset.synthetic.channels = c.backbone.channels;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  if (!errors.empty()) throw ConfigError(join(errors));
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> errors;
  const auto collect = [&](auto&& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      std::istringstream lines(e.what());
      std::string item;
      while (std::getline(lines, item, ';')) {
        const auto first = item.find_first_not_of(' ');
        if (first != std::string::npos) errors.push_back(item.substr(first));
      }
    }
  };
  collect([&] { backbone.validate(); });
  collect([&] { train.validate(); });
  if (dataset.kind == "synthetic") {
    collect([&] { dataset.synthetic.validate(); });
    collect([&] { SplitSpec{dataset.synthetic.classes, split_base, split_increment, 0}.validate(); });
  } else if (dataset.kind == "disk") {
    if (dataset.train_root.empty()) errors.push_back("dataset.train_root: required for kind=disk");
    if (dataset.test_root.empty()) errors.push_back("dataset.test_root: required for kind=disk");
    if (split_base < 0) errors.push_back("split.base must be >= 0");
    if (split_increment <= 0) errors.push_back("split.increment must be positive");
  } else {
    errors.push_back("dataset.kind: must be \"synthetic\" or \"disk\"");
  }
  if (seeds.empty()) errors.push_back("seeds: at least one seed is required");
  if (output_dir.empty()) errors.push_back("output_dir: must not be empty");
  if (!errors.empty()) throw ConfigError(join(errors));
}

json RunConfig::to_json() const {
  json d = {{"kind", dataset.kind}};
  if (dataset.kind == "synthetic") {
    d["classes"] = dataset.synthetic.classes;
    d["train_per_class"] = dataset.synthetic.train_per_class;
    d["test_per_class"] = dataset.synthetic.test_per_class;
    d["separation"] = dataset.synthetic.separation;
    d["noise"] = dataset.synthetic.noise;
    d["seed"] = dataset.synthetic.seed;
  } else {
    d["train_root"] = dataset.train_root;
    d["test_root"] = dataset.test_root;
  }
  return json{
      {"dataset", d},
      {"split", {{"base", split_base}, {"increment", split_increment}}},
      {"backbone",
       {{"num_layers", backbone.num_layers},
        {"embed_dim", backbone.embed_dim},
        {"num_heads", backbone.num_heads},
        {"image_side", backbone.image_side},
        {"patch_side", backbone.patch_side},
        {"channels", backbone.channels},
        {"mlp_ratio", backbone.mlp_ratio}}},
      {"pool", {{"capacity", train.pool.capacity}, {"reuse", train.pool.reuse}, {"prefix_len", backbone.prefix_len}}},
      {"importance", {{"num_bins", train.importance.num_bins}, {"num_samples", train.importance.num_samples}}},
      {"train",
       {{"lr", train.lr}, {"weight_decay", train.weight_decay}, {"epochs", train.epochs}, {"batch_size", train.batch_size}}},
      {"seeds", seeds},
      {"variant", static_cast<int>(train.variant)},
      {"output_dir", output_dir},
      {"parallel_seeds", parallel_seeds},
  };
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override \"" + assignment + "\": expected dotted.key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override \"" + assignment + "\": empty key component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override \"" + assignment + "\": " + part + " is not inside an object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

}  // namespace ldep
