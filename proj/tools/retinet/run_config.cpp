#include "run_config.hpp"

#include <set>

#include "retinet/error.hpp"
#include "retinet/fileio.hpp"

namespace retinet::cli {

using nlohmann::json;
using nlohmann::ordered_json;

void RunConfig::finalize() {
  model.num_classes = class_names.size();
  model.validate();
  train.augment = augment_enabled ? std::optional<AugmentConfig>(augment) : std::nullopt;
  train.validate();
}

namespace {

std::string fill_name(FillMode f) { return f == FillMode::nearest ? "nearest" : "zeros"; }

FillMode parse_fill(const std::string& s, const std::string& field) {
  if (s == "nearest") return FillMode::nearest;
  if (s == "zeros") return FillMode::zeros;
  throw ConfigError(field + ": unknown fill mode '" + s + "' (expected nearest or zeros)");
}

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& target) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      target = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  void read_path(const char* key, std::filesystem::path& target) {
    std::string s = target.string();
    read(key, s);
    target = s;
  }

  [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }
  [[nodiscard]] const json& at(const char* key) const { return j_.at(key); }
  void mark(const char* key) { seen_.insert(key); }

  void reject_unknown() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(path_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

ordered_json to_json(const RunConfig& cfg) {
  ordered_json j;
  j["model"] = {{"arch", to_string(cfg.model.arch)},
                {"class_names", cfg.class_names},
                {"input_size", cfg.model.input_h},
                {"dense_units", cfg.model.head.dense_units},
                {"dropout", cfg.model.head.dropout_rate},
                {"width_multiplier", cfg.model.width_multiplier}};
  j["train"] = {{"lr", cfg.train.lr},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"epsilon", cfg.train.epsilon},
                {"batch_size", cfg.train.batch_size},
                {"epochs", cfg.train.epochs},
                {"seed", cfg.train.seed},
                {"freeze_backbone", cfg.train.freeze_backbone},
                {"val_frac", cfg.train.val_frac}};
  j["augment"] = {{"enabled", cfg.augment_enabled},
                  {"rotation_deg", cfg.augment.rotation_deg},
                  {"shift_frac", cfg.augment.shift_frac},
                  {"shear_frac", cfg.augment.shear_frac},
                  {"zoom_frac", cfg.augment.zoom_frac},
                  {"horizontal_flip", cfg.augment.horizontal_flip},
                  {"fill", fill_name(cfg.augment.fill)}};
  j["data"] = {{"manifest", cfg.manifest.generic_string()},
               {"weights", cfg.weights ? ordered_json(cfg.weights->generic_string()) : ordered_json(nullptr)}};
  j["out"] = cfg.out_dir.generic_string();
  return j;
}

void merge_json(RunConfig& cfg, const json& j, const std::string& source) {
  Section root(j, source);
  if (root.has("model")) {
    Section s(root.at("model"), source + ":model");
    std::string arch = to_string(cfg.model.arch);
    s.read("arch", arch);
    cfg.model.arch = parse_arch(arch);
    s.read("class_names", cfg.class_names);
    std::size_t size = cfg.model.input_h;
    s.read("input_size", size);
    cfg.model.input_h = cfg.model.input_w = size;
    s.read("dense_units", cfg.model.head.dense_units);
    s.read("dropout", cfg.model.head.dropout_rate);
    s.read("width_multiplier", cfg.model.width_multiplier);
    s.reject_unknown();
  }
  if (root.has("train")) {
    Section s(root.at("train"), source + ":train");
    s.read("lr", cfg.train.lr);
    s.read("beta1", cfg.train.beta1);
    s.read("beta2", cfg.train.beta2);
    s.read("epsilon", cfg.train.epsilon);
    s.read("batch_size", cfg.train.batch_size);
    s.read("epochs", cfg.train.epochs);
    s.read("seed", cfg.train.seed);
    s.read("freeze_backbone", cfg.train.freeze_backbone);
    s.read("val_frac", cfg.train.val_frac);
    s.reject_unknown();
  }
  if (root.has("augment")) {
    Section s(root.at("augment"), source + ":augment");
    s.read("enabled", cfg.augment_enabled);
    s.read("rotation_deg", cfg.augment.rotation_deg);
    s.read("shift_frac", cfg.augment.shift_frac);
    s.read("shear_frac", cfg.augment.shear_frac);
    s.read("zoom_frac", cfg.augment.zoom_frac);
    s.read("horizontal_flip", cfg.augment.horizontal_flip);
    std::string fill = fill_name(cfg.augment.fill);
    s.read("fill", fill);
    cfg.augment.fill = parse_fill(fill, source + ":augment.fill");
    s.reject_unknown();
  }
  if (root.has("data")) {
    Section s(root.at("data"), source + ":data");
    s.read_path("manifest", cfg.manifest);
    s.mark("weights");
    if (s.has("weights")) {
      const json& w = s.at("weights");
      if (w.is_null()) {
        cfg.weights.reset();
      } else if (w.is_string()) {
        cfg.weights = w.get<std::string>();
      } else {
        throw ConfigError(source + ":data.weights: wrong type");
      }
    }
    s.reject_unknown();
  }
  for (const char* key : {"model", "train", "augment", "data"}) root.mark(key);
  root.read_path("out", cfg.out_dir);
  root.reject_unknown();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  json j;
  try {
    j = json::parse(read_file_text(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  RunConfig cfg;
  merge_json(cfg, j, path.string());
  return cfg;
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(cfg).dump(2) + "\n");
}

}  // namespace retinet::cli
