#include "clora/continual.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

#include "clora/errors.hpp"
#include "clora/optim.hpp"

namespace clora {

TrainMode parse_train_mode(const std::string& name) {
  if (name == "FT") return TrainMode::kFt;
  if (name == "CLORA_FT") return TrainMode::kCloraFt;
  if (name == "JT") return TrainMode::kJt;
  if (name == "CLORA_JT") return TrainMode::kCloraJt;
  if (name == "MIB") return TrainMode::kMib;
  if (name == "MIB_TL") return TrainMode::kMibTl;
  if (name == "CLORA") return TrainMode::kClora;
  if (name == "CLORA_REINIT") return TrainMode::kCloraReinit;
  throw ConfigError("unknown train mode \"" + name + "\"");
}

std::string train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::kFt: return "FT";
    case TrainMode::kCloraFt: return "CLORA_FT";
    case TrainMode::kJt: return "JT";
    case TrainMode::kCloraJt: return "CLORA_JT";
    case TrainMode::kMib: return "MIB";
    case TrainMode::kMibTl: return "MIB_TL";
    case TrainMode::kClora: return "CLORA";
    case TrainMode::kCloraReinit: return "CLORA_REINIT";
  }
  throw ContractError("unhandled train mode");
}

bool mode_uses_lora(TrainMode mode) {
  return mode == TrainMode::kCloraFt || mode == TrainMode::kCloraJt ||
         mode == TrainMode::kClora || mode == TrainMode::kCloraReinit;
}

bool mode_uses_distillation(TrainMode mode) {
  return mode == TrainMode::kMib || mode == TrainMode::kMibTl ||
         mode == TrainMode::kClora || mode == TrainMode::kCloraReinit;
}

bool mode_is_joint(TrainMode mode) {
  return mode == TrainMode::kJt || mode == TrainMode::kCloraJt;
}

bool mode_freezes_encoder(TrainMode mode) {
  return mode_uses_lora(mode) || mode == TrainMode::kMibTl;
}

std::vector<int> TaskSchedule::classes_up_to(size_t step) const {
  if (step >= steps.size()) {
    throw ContractError("step " + std::to_string(step) + " out of range for " +
                        std::to_string(steps.size()) + "-step schedule");
  }
  std::vector<int> out;
  for (size_t i = 0; i <= step; ++i) {
    out.insert(out.end(), steps[i].classes.begin(), steps[i].classes.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

TaskSchedule build_schedule(const std::string& spec, size_t total_classes) {
  const size_t dash = spec.find('-');
  size_t init = 0, inc = 0;
  try {
    if (dash == std::string::npos) throw std::invalid_argument(spec);
    size_t used = 0;
    init = std::stoul(spec.substr(0, dash), &used);
    if (used != dash) throw std::invalid_argument(spec);
    inc = std::stoul(spec.substr(dash + 1), &used);
    if (used != spec.size() - dash - 1) throw std::invalid_argument(spec);
  } catch (const std::logic_error&) {
    throw ConfigError("schedule \"" + spec + "\" is not of the form init-inc");
  }
  if (init < 1 || inc < 1) {
    throw ConfigError("schedule \"" + spec + "\": init and inc must be >= 1");
  }
  if (total_classes < 2 || init > total_classes - 1) {
    throw ConfigError("schedule \"" + spec + "\" does not fit " +
                      std::to_string(total_classes) + " classes");
  }
  const size_t rest = total_classes - 1 - init;
  if (rest % inc != 0) {
    throw ConfigError("schedule \"" + spec + "\": " + std::to_string(rest) +
                      " remaining classes not divisible by " +
                      std::to_string(inc));
  }
  TaskSchedule sched;
  sched.name = spec;
  sched.total_classes = total_classes;
  int next = 1;
  TaskStep first;
  for (size_t i = 0; i < init; ++i) first.classes.push_back(next++);
  sched.steps.push_back(std::move(first));
  for (size_t s = 0; s < rest / inc; ++s) {
    TaskStep step;
    step.dataset_id = static_cast<int>(s + 1);
    for (size_t i = 0; i < inc; ++i) step.classes.push_back(next++);
    sched.steps.push_back(std::move(step));
  }
  return sched;
}

LabelMap remap_labels(const LabelMap& labels,
                      const std::vector<int>& current_classes) {
  std::vector<char> keep(256, 0);
  keep[kIgnoreLabel] = 1;
  for (int c : current_classes) {
    if (c < 0 || c > 254) {
      throw ContractError("class id " + std::to_string(c) + " out of range");
    }
    keep[static_cast<size_t>(c)] = 1;
  }
  LabelMap out = labels;
  for (uint8_t& id : out.ids) {
    if (!keep[id]) id = 0;
  }
  return out;
}

namespace {

SegModel snapshot_teacher(const SegModel& model) {
  SegModel t = model.clone();
  AdapterSet attached = collect_adapters(t);
  if (!attached.empty()) merge(t, attached);
  t.set_all_trainable(false);
  return t;
}

Tensor assemble_batch(const std::vector<TrainSample>& data,
                      const std::vector<size_t>& order, size_t lo, size_t hi,
                      size_t image_size) {
  const size_t per = 3 * image_size * image_size;
  Tensor images = Tensor::zeros({hi - lo, 3, image_size, image_size});
  for (size_t i = lo; i < hi; ++i) {
    const Tensor& img = data[order[i]].image;
    if (img.shape() != std::vector<size_t>{3, image_size, image_size}) {
      throw DimensionError("sample image shape " + shape_str(img.shape()) +
                           " does not match model input");
    }
    std::copy(img.data().begin(), img.data().end(),
              images.data_mut().begin() + static_cast<ptrdiff_t>((i - lo) * per));
  }
  return images;
}

}  // namespace

void train_task(IncrementalState& state, TrainMode mode,
                const std::vector<int>& step_classes,
                const std::vector<TrainSample>& data,
                const TrainTaskConfig& cfg) {
  if (step_classes.empty()) throw ConfigError("step with no classes");
  if (mode_is_joint(mode) && state.step > 0) {
    throw ConfigError(train_mode_name(mode) +
                      " is single-step; schedule has more");
  }
  if (!mode_uses_lora(mode) && !state.adapters.empty()) {
    throw ContractError(train_mode_name(mode) +
                        " does not use adapters but some are attached");
  }
  if (cfg.loss.loss_hook != "mib" && cfg.loss.loss_hook != "none") {
    throw ConfigError("unknown loss hook \"" + cfg.loss.loss_hook + "\"");
  }
  if (cfg.loss.kd_weight < 0) throw ConfigError("kd_weight must be >= 0");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (data.empty()) throw DataError("empty training slice");
  std::set<int> seen(state.seen_classes.begin(), state.seen_classes.end());
  int widest = 0;
  for (int c : step_classes) {
    if (c < 1 || c > 254) {
      throw ConfigError("class id " + std::to_string(c) + " out of range");
    }
    if (seen.count(c)) {
      throw ConfigError("class " + std::to_string(c) + " already learned");
    }
    widest = std::max(widest, c);
  }

  const bool unbiased =
      mode_uses_distillation(mode) && cfg.loss.loss_hook == "mib";
  if (mode_uses_distillation(mode) && state.step >= 1) {
    state.teacher = snapshot_teacher(state.model);
  } else {
    state.teacher.reset();
  }

  const size_t width = static_cast<size_t>(widest) + 1;
  if (width > state.model.spec.num_classes) {
    extend_classifier(state.model, width - state.model.spec.num_classes);
  }

  switch (mode) {
    case TrainMode::kFt:
    case TrainMode::kJt:
    case TrainMode::kMib:
      state.model.set_all_trainable(true);
      break;
    case TrainMode::kMibTl:
      state.model.set_all_trainable(true);
      state.model.set_encoder_trainable(false);
      break;
    case TrainMode::kCloraFt:
    case TrainMode::kCloraJt:
    case TrainMode::kClora:
    case TrainMode::kCloraReinit:
      if (state.adapters.empty()) {
        state.adapters = create_adapters(state.model, cfg.lora_rank, cfg.seed);
      } else {
        state.model.set_encoder_trainable(false);
      }
      state.model.set_decoder_trainable(true);
      break;
  }

  std::vector<Tensor> trainable;
  for (const NamedParam& p : state.model.all_parameters()) {
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  }
  SgdConfig opt_cfg;
  opt_cfg.learning_rate = cfg.learning_rate;
  opt_cfg.momentum = cfg.momentum;
  opt_cfg.weight_decay = cfg.weight_decay;
  SgdOptimizer opt(trainable, opt_cfg);

  const std::vector<int> no_old;
  const std::vector<int>& old_for_ce = unbiased ? state.seen_classes : no_old;
  const bool distill = unbiased && state.teacher.has_value() &&
                       cfg.loss.kd_weight > 0.0;
  const size_t image_size = state.model.spec.image_size;

  Rng shuffle_rng =
      Rng::stream(cfg.seed, "shuffle.step" + std::to_string(state.step));
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    EpochLog log;
    log.task = state.step;
    log.epoch = epoch;
    log.learning_rate = cfg.learning_rate;
    for (size_t lo = 0; lo < data.size(); lo += cfg.batch_size) {
      const size_t hi = std::min(lo + cfg.batch_size, data.size());
      Tensor images = assemble_batch(data, order, lo, hi, image_size);
      std::vector<LabelMap> labels;
      labels.reserve(hi - lo);
      for (size_t i = lo; i < hi; ++i) labels.push_back(data[order[i]].labels);

      Tensor logits = forward_segmentation(state.model, images);
      Tensor ce = task_ce_loss(logits, labels, old_for_ce);
      Tensor loss = ce;
      double kd_value = 0.0;
      if (distill) {
        Tensor teacher_logits;
        {
          NoGradGuard ng;
          teacher_logits = forward_segmentation(*state.teacher, images);
        }
        Tensor kd = unbiased_kd_loss(logits, teacher_logits, step_classes,
                                     cfg.loss.kd_temperature, &labels);
        kd_value = kd.item();
        loss = add(ce, scale(kd, cfg.loss.kd_weight));
      }
      const double ce_value = ce.item();
      const double total_value = loss.item();
      if (!std::isfinite(total_value)) {
        throw NumericError("non-finite loss at task " +
                           std::to_string(state.step) + " epoch " +
                           std::to_string(epoch));
      }
      backward(loss);
      opt.step();
      log.ce += ce_value;
      log.kd += kd_value;
      log.total += total_value;
      log.batches += 1;
    }
    if (log.batches > 0) {
      log.ce /= static_cast<double>(log.batches);
      log.kd /= static_cast<double>(log.batches);
      log.total /= static_cast<double>(log.batches);
    }
    if (cfg.on_epoch) cfg.on_epoch(log);
  }

  if (mode == TrainMode::kCloraReinit) {
    const uint64_t reinit_seed =
        Rng::stream(cfg.seed, "reinit.step" + std::to_string(state.step))
            .next_u64();
    state.adapters = reinit(state.model, state.adapters, reinit_seed);
  }

  state.seen_classes.insert(state.seen_classes.end(), step_classes.begin(),
                            step_classes.end());
  std::sort(state.seen_classes.begin(), state.seen_classes.end());
  state.step += 1;
}

std::vector<LabelMap> merge_task_predictions(
    const std::vector<Tensor>& per_task_logits,
    const std::vector<std::vector<int>>& task_class_ids) {
  if (per_task_logits.empty()) {
    throw ContractError("merge needs at least one task output");
  }
  if (task_class_ids.size() != per_task_logits.size()) {
    throw ContractError("class id list count does not match task count");
  }
  const auto& sh0 = per_task_logits[0].shape();
  if (sh0.size() != 4) {
    throw DimensionError("task logits must be [B x C x H x W]");
  }
  const size_t batch = sh0[0], height = sh0[2], width = sh0[3];
  std::set<int> all_ids;
  for (size_t t = 0; t < per_task_logits.size(); ++t) {
    const auto& sh = per_task_logits[t].shape();
    if (sh.size() != 4 || sh[0] != batch || sh[2] != height || sh[3] != width) {
      throw DimensionError("task logits shapes disagree");
    }
    if (sh[1] != task_class_ids[t].size() + 1) {
      throw DimensionError("task " + std::to_string(t) + " has " +
                           std::to_string(sh[1]) + " channels for " +
                           std::to_string(task_class_ids[t].size()) +
                           " classes plus background");
    }
    for (int c : task_class_ids[t]) {
      if (c < 1 || c > 254) {
        throw ContractError("class id " + std::to_string(c) + " out of range");
      }
      if (!all_ids.insert(c).second) {
        throw ContractError("class id " + std::to_string(c) +
                            " appears in two tasks");
      }
    }
  }

  const size_t plane = height * width;
  std::vector<LabelMap> out;
  out.reserve(batch);
  for (size_t b = 0; b < batch; ++b) {
    LabelMap m = LabelMap::filled(height, width, 0);
    for (size_t px = 0; px < plane; ++px) {
      // shared background channel comes from the first task; softmax over
      // the concatenation is monotone, so compare raw logits directly
      double best = per_task_logits[0].data()[b * sh0[1] * plane + px];
      uint8_t label = 0;
      for (size_t t = 0; t < per_task_logits.size(); ++t) {
        const size_t channels = per_task_logits[t].shape()[1];
        const double* base =
            per_task_logits[t].data().data() + b * channels * plane + px;
        for (size_t c = 1; c < channels; ++c) {
          const double score = base[c * plane];
          if (score > best) {
            best = score;
            label = static_cast<uint8_t>(task_class_ids[t][c - 1]);
          }
        }
      }
      m.ids[px] = label;
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace clora
