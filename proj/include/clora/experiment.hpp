#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clora/config.hpp"
#include "clora/data.hpp"
#include "clora/metrics.hpp"
#include "clora/nn.hpp"

namespace clora {

struct EvalRange {
  std::string name;         // printed as the report column header
  std::vector<size_t> ids;  // class ids scored under this name
};

// The table layout for an "init-inc" run over ids 0..total: "0-N" covering
// background plus the initial classes, "(N+1)-(total)" for the incremental
// ones when any exist, and "All".
std::vector<EvalRange> default_ranges(size_t initial_classes,
                                      size_t total_classes);

// Comma list of "A-B" spans, single ids, or "All" (e.g. "0-3,4-5,All");
// bounds are checked against num_classes.
std::vector<EvalRange> parse_ranges(const std::string& csv,
                                    size_t num_classes);

// Worker count for evaluation: hardware concurrency capped by the
// CLORA_THREADS environment variable and by the number of work items.
size_t eval_threads(size_t work_items);

// Forward + argmax over every sample, accumulated into one confusion matrix
// of model.spec.num_classes classes. Ground-truth labels are used as-is.
ConfusionMatrix evaluate_model(const SegModel& model,
                               const std::vector<SegmentationSample>& samples,
                               size_t threads);

struct RunResult {
  MetricsReport report;
  std::filesystem::path out_dir;
};

// The full pipeline: schedule construction, per-step label remapping and
// training, checkpoints under out/checkpoints/step_t.clra, an epoch log at
// out/steps.jsonl, evaluation on the validation split, and report.json /
// report.csv. Every artifact except the timestamped run.log is a pure
// function of (config, seed).
RunResult run_experiment(const ExperimentConfig& cfg);

}  // namespace clora
