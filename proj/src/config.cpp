#include "clora/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "clora/errors.hpp"
#include "json.hpp"

namespace clora {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (allowed.find(key) == allowed.end()) {
      throw ConfigError("unknown config key '" + key + "' in " + where);
    }
  }
}

std::filesystem::path fs_path_from(const json& v) {
  if (!v.is_string()) throw ConfigError("paths must be JSON strings");
  return std::filesystem::path(v.get<std::string>());
}

template <typename T>
void take(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + std::string(key) +
                      "' has the wrong type: " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (schedule.empty()) throw ConfigError("config requires a schedule");
  if (datasets.empty()) {
    throw ConfigError("config requires 'dataset' or 'datasets'");
  }
  if (rank == 0) throw ConfigError("rank must be >= 1");
  if (epochs_per_task == 0) throw ConfigError("epochs_per_task must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (learning_rate_initial <= 0.0 || learning_rate_incremental <= 0.0 ||
      learning_rate_single_class <= 0.0) {
    throw ConfigError("learning rates must be > 0");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (loss.kd_weight < 0.0) throw ConfigError("kd_weight must be >= 0");
  if (loss.kd_temperature <= 0.0) {
    throw ConfigError("kd_temperature must be > 0");
  }
  if (loss.loss_hook != "mib" && loss.loss_hook != "none") {
    throw ConfigError("loss hook must be 'mib' or 'none', got '" +
                      loss.loss_hook + "'");
  }
  ModelSpec probe = model;
  probe.num_classes = 2;  // the runner derives the real width later
  probe.validate();
  if (jt_baseline_miou && !(*jt_baseline_miou > 0.0)) {
    throw ConfigError("jt_baseline_miou must be > 0 when given");
  }
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown_keys(
      j,
      {"mode", "schedule", "dataset", "datasets", "model", "rank", "seed",
       "epochs_per_task", "batch_size", "learning_rate_initial",
       "learning_rate_incremental", "learning_rate_single_class",
       "single_class_threshold", "momentum", "weight_decay", "loss", "out",
       "jt_baseline_miou"},
      "the top-level config");

  ExperimentConfig cfg;
  if (j.contains("mode")) {
    std::string name;
    take(j, "mode", name);
    cfg.mode = parse_train_mode(name);
  }
  take(j, "schedule", cfg.schedule);

  if (j.contains("dataset") && j.contains("datasets")) {
    throw ConfigError("give either 'dataset' or 'datasets', not both");
  }
  if (j.contains("dataset")) {
    cfg.datasets = {fs_path_from(j.at("dataset"))};
  } else if (j.contains("datasets")) {
    const json& ds = j.at("datasets");
    if (!ds.is_array() || ds.empty()) {
      throw ConfigError("'datasets' must be a non-empty array of paths");
    }
    for (const json& d : ds) cfg.datasets.push_back(fs_path_from(d));
  }

  if (j.contains("model")) {
    const json& mj = j.at("model");
    reject_unknown_keys(mj,
                        {"image_size", "patch_size", "embed_dim", "num_heads",
                         "num_layers", "mlp_ratio"},
                        "'model'");
    take(mj, "image_size", cfg.model.image_size);
    take(mj, "patch_size", cfg.model.patch_size);
    take(mj, "embed_dim", cfg.model.embed_dim);
    take(mj, "num_heads", cfg.model.num_heads);
    take(mj, "num_layers", cfg.model.num_layers);
    take(mj, "mlp_ratio", cfg.model.mlp_ratio);
  }

  take(j, "rank", cfg.rank);
  take(j, "seed", cfg.seed);
  take(j, "epochs_per_task", cfg.epochs_per_task);
  take(j, "batch_size", cfg.batch_size);
  take(j, "learning_rate_initial", cfg.learning_rate_initial);
  take(j, "learning_rate_incremental", cfg.learning_rate_incremental);
  take(j, "learning_rate_single_class", cfg.learning_rate_single_class);
  take(j, "single_class_threshold", cfg.single_class_threshold);
  take(j, "momentum", cfg.momentum);
  take(j, "weight_decay", cfg.weight_decay);

  if (j.contains("loss")) {
    const json& lj = j.at("loss");
    reject_unknown_keys(lj, {"kd_weight", "kd_temperature", "hook"}, "'loss'");
    take(lj, "kd_weight", cfg.loss.kd_weight);
    take(lj, "kd_temperature", cfg.loss.kd_temperature);
    take(lj, "hook", cfg.loss.loss_hook);
  }

  if (j.contains("out")) cfg.out = fs_path_from(j.at("out"));
  if (j.contains("jt_baseline_miou")) {
    double v = 0.0;
    take(j, "jt_baseline_miou", v);
    cfg.jt_baseline_miou = v;
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string ExperimentConfig::to_json() const {
  json datasets_j = json::array();
  for (const auto& d : datasets) datasets_j.push_back(d.string());
  json j = {
      {"mode", train_mode_name(mode)},
      {"schedule", schedule},
      {"datasets", datasets_j},
      {"model",
       {{"image_size", model.image_size},
        {"patch_size", model.patch_size},
        {"embed_dim", model.embed_dim},
        {"num_heads", model.num_heads},
        {"num_layers", model.num_layers},
        {"mlp_ratio", model.mlp_ratio}}},
      {"rank", rank},
      {"seed", seed},
      {"epochs_per_task", epochs_per_task},
      {"batch_size", batch_size},
      {"learning_rate_initial", learning_rate_initial},
      {"learning_rate_incremental", learning_rate_incremental},
      {"learning_rate_single_class", learning_rate_single_class},
      {"single_class_threshold", single_class_threshold},
      {"momentum", momentum},
      {"weight_decay", weight_decay},
      {"loss",
       {{"kd_weight", loss.kd_weight},
        {"kd_temperature", loss.kd_temperature},
        {"hook", loss.loss_hook}}},
      {"out", out.string()},
  };
  j["jt_baseline_miou"] =
      jt_baseline_miou ? json(*jt_baseline_miou) : json(nullptr);
  return j.dump(2);
}

}  // namespace clora
