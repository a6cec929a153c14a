#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clora/continual.hpp"
#include "clora/nn.hpp"

namespace clora {

// Everything one run needs, loadable from a JSON file (the layout is
// published in schema/config.schema.json). Unknown keys are rejected so a
// typo in a sweep script fails loudly instead of silently using a default.
struct ExperimentConfig {
  TrainMode mode = TrainMode::kClora;
  std::string schedule;  // "init-inc", e.g. "3-1"
  // One directory used for every step, or one per step.
  std::vector<std::filesystem::path> datasets;
  ModelSpec model;  // num_classes is derived from the schedule by the runner
  size_t rank = 8;
  uint64_t seed = 1;
  size_t epochs_per_task = 15;
  size_t batch_size = 6;
  double learning_rate_initial = 0.02;
  double learning_rate_incremental = 0.005;
  double learning_rate_single_class = 0.001;
  // Incremental steps introducing <= this many classes use the small rate.
  size_t single_class_threshold = 1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  LossConfig loss;
  std::filesystem::path out;
  // When present, the report gains a forget-score column against it.
  std::optional<double> jt_baseline_miou;

  void validate() const;

  // Full echo, defaults included, in the same key layout the loader accepts;
  // written into every results file.
  std::string to_json() const;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace clora
