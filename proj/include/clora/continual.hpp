#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clora/labels.hpp"
#include "clora/lora.hpp"
#include "clora/nn.hpp"
#include "clora/tensor.hpp"

namespace clora {

// The eight training regimes. "Joint" modes see every class in one step;
// the others learn class groups incrementally.
enum class TrainMode {
  kFt,           // full fine-tuning, plain CE
  kCloraFt,      // adapter + decoder training, plain CE
  kJt,           // joint training over all classes (upper bound)
  kCloraJt,      // joint training through the adapter
  kMib,          // full fine-tuning + background-aware CE/KD
  kMibTl,        // decoder-only transfer learning + background-aware losses
  kClora,        // adapter + decoder + background-aware losses
  kCloraReinit,  // as kClora, but the adapter is folded in after every task
};

TrainMode parse_train_mode(const std::string& name);
std::string train_mode_name(TrainMode mode);

bool mode_uses_lora(TrainMode mode);
bool mode_uses_distillation(TrainMode mode);
bool mode_is_joint(TrainMode mode);
bool mode_freezes_encoder(TrainMode mode);

struct TaskStep {
  std::vector<int> classes;  // global ids learned at this step, ascending
  int dataset_id = 0;
};

// "init-inc" decomposition of {1..total-1}; background 0 is in no step.
struct TaskSchedule {
  std::string name;
  size_t total_classes = 0;  // background included
  std::vector<TaskStep> steps;

  // Union of step class sets for steps [0, step], ascending.
  std::vector<int> classes_up_to(size_t step) const;
};

// Parses "init-inc" (e.g. "15-5") and assigns contiguous ascending ids:
// step 0 gets {1..init}, each later step the next `inc` ids.
TaskSchedule build_schedule(const std::string& spec, size_t total_classes);

// Background shift: ids outside current_classes become 0; the ignore
// sentinel survives untouched.
LabelMap remap_labels(const LabelMap& labels, const std::vector<int>& current_classes);

// Pixel cross-entropy where background-labeled pixels are credited with
// q(0) + sum over old_classes of q(c): the background absorbs classes that
// are no longer annotated. Empty old set = standard CE. Mean over
// non-ignored pixels of the whole batch; 0 if none.
Tensor task_ce_loss(const Tensor& logits, const std::vector<LabelMap>& labels,
                    const std::vector<int>& old_classes);

// Background-aware distillation: the student's new-class probability mass is
// folded into its background before cross-entropy against the teacher's
// temperature-softened distribution. Gradients flow into the student only.
// When ignore_from is given, pixels labeled 255 there are excluded.
Tensor unbiased_kd_loss(const Tensor& student_logits,
                        const Tensor& teacher_logits,
                        const std::vector<int>& new_classes, double temperature,
                        const std::vector<LabelMap>* ignore_from = nullptr);

struct LossConfig {
  double kd_weight = 10.0;
  double kd_temperature = 1.0;
  // "mib" = background-aware CE + KD (in modes that distill); "none" = plain
  // CE everywhere. Kept as a name so other regularizers can slot in.
  std::string loss_hook = "mib";
};

struct TrainSample {
  Tensor image;     // [3 x H x W], values in [-1, 1]
  LabelMap labels;  // remapped for the current step by the caller
};

struct EpochLog {
  size_t task = 0;
  size_t epoch = 0;
  double ce = 0.0;
  double kd = 0.0;
  double total = 0.0;
  double learning_rate = 0.0;
  size_t batches = 0;
};

struct TrainTaskConfig {
  size_t epochs = 1;
  size_t batch_size = 8;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  size_t lora_rank = 8;
  uint64_t seed = 0;
  LossConfig loss;
  std::function<void(const EpochLog&)> on_epoch;  // may be empty
};

struct IncrementalState {
  size_t step = 0;
  SegModel model;
  // Frozen copy of the previous-step model (adapters folded in); present
  // only while a distillation mode is past its first step.
  std::optional<SegModel> teacher;
  std::vector<int> seen_classes;  // learned before the current step
  AdapterSet adapters;            // persists across steps in adapter modes
};

// One incremental step, in place: snapshots the teacher if the mode
// distills, widens the classifier to cover step_classes, applies the mode's
// freezing contract, runs the epoch loop, then advances step bookkeeping.
// Throws ConfigError for mode/step mismatches (joint mode past step 0),
// NumericError if a loss goes non-finite.
void train_task(IncrementalState& state, TrainMode mode,
                const std::vector<int>& step_classes,
                const std::vector<TrainSample>& data,
                const TrainTaskConfig& cfg);

// Combines independently trained task outputs by concatenating their
// non-background channels behind the first task's background channel and
// taking the per-pixel winner (softmax omitted: it never changes the
// argmax). task_class_ids[i] lists the global ids behind channels 1.. of
// logits i.
std::vector<LabelMap> merge_task_predictions(
    const std::vector<Tensor>& per_task_logits,
    const std::vector<std::vector<int>>& task_class_ids);

}  // namespace clora
