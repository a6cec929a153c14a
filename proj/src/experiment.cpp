#include "clora/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "clora/continual.hpp"
#include "clora/errors.hpp"
#include "clora/lora.hpp"
#include "json.hpp"

namespace clora {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<EvalRange> default_ranges(size_t initial_classes,
                                      size_t total_classes) {
  if (initial_classes == 0 || initial_classes > total_classes) {
    throw ContractError("initial class count must lie in [1, total]");
  }
  std::vector<EvalRange> ranges;
  EvalRange head{"0-" + std::to_string(initial_classes), {}};
  for (size_t id = 0; id <= initial_classes; ++id) head.ids.push_back(id);
  ranges.push_back(std::move(head));
  if (total_classes > initial_classes) {
    EvalRange tail{std::to_string(initial_classes + 1) + "-" +
                       std::to_string(total_classes),
                   {}};
    for (size_t id = initial_classes + 1; id <= total_classes; ++id) {
      tail.ids.push_back(id);
    }
    ranges.push_back(std::move(tail));
  }
  EvalRange all{"All", {}};
  for (size_t id = 0; id <= total_classes; ++id) all.ids.push_back(id);
  ranges.push_back(std::move(all));
  return ranges;
}

namespace {

size_t parse_id(const std::string& text, size_t num_classes) {
  size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(text, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad class id in range spec: '" + text + "'");
  }
  if (pos != text.size()) {
    throw ConfigError("bad class id in range spec: '" + text + "'");
  }
  if (v >= num_classes) {
    throw ConfigError("class id " + text + " outside the model's " +
                      std::to_string(num_classes) + " classes");
  }
  return static_cast<size_t>(v);
}

}  // namespace

std::vector<EvalRange> parse_ranges(const std::string& csv,
                                    size_t num_classes) {
  std::vector<EvalRange> ranges;
  std::stringstream ss(csv);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (token.empty()) continue;
    EvalRange r{token, {}};
    if (token == "All" || token == "all") {
      for (size_t id = 0; id < num_classes; ++id) r.ids.push_back(id);
    } else if (const size_t dash = token.find('-');
               dash != std::string::npos) {
      const size_t lo = parse_id(token.substr(0, dash), num_classes);
      const size_t hi = parse_id(token.substr(dash + 1), num_classes);
      if (lo > hi) throw ConfigError("descending range: '" + token + "'");
      for (size_t id = lo; id <= hi; ++id) r.ids.push_back(id);
    } else {
      r.ids.push_back(parse_id(token, num_classes));
    }
    ranges.push_back(std::move(r));
  }
  if (ranges.empty()) throw ConfigError("empty range spec");
  return ranges;
}

size_t eval_threads(size_t work_items) {
  size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("CLORA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw ConfigError("CLORA_THREADS must be a positive integer, got '" +
                        std::string(env) + "'");
    }
    n = std::min(n, static_cast<size_t>(v));
  }
  if (work_items > 0) n = std::min(n, work_items);
  return std::max<size_t>(1, n);
}

ConfusionMatrix evaluate_model(const SegModel& model,
                               const std::vector<SegmentationSample>& samples,
                               size_t threads) {
  if (samples.empty()) throw DataError("no samples to evaluate");
  const size_t classes = model.spec.num_classes;
  threads = std::max<size_t>(1, std::min(threads, samples.size()));

  std::vector<ConfusionMatrix> parts(threads, ConfusionMatrix(classes));
  std::vector<std::exception_ptr> errors(threads);

  auto worker = [&](size_t k) {
    try {
      NoGradGuard guard;
      const size_t hw =
          model.spec.image_size * model.spec.image_size;
      for (size_t i = k; i < samples.size(); i += threads) {
        const SegmentationSample& s = samples[i];
        if (s.height != model.spec.image_size ||
            s.width != model.spec.image_size) {
          throw DimensionError("sample size does not match the model input");
        }
        const Tensor logits = forward_one(model, to_model_input(s));
        const std::vector<double>& d = logits.data();
        LabelMap pred = LabelMap::filled(s.height, s.width, 0);
        for (size_t p = 0; p < hw; ++p) {
          size_t best = 0;
          double best_v = d[p];
          for (size_t c = 1; c < classes; ++c) {
            const double v = d[c * hw + p];
            if (v > best_v) {
              best_v = v;
              best = c;
            }
          }
          pred.ids[p] = static_cast<uint8_t>(best);
        }
        parts[k].accumulate(pred, s.labels);
      }
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (size_t k = 0; k < threads; ++k) pool.emplace_back(worker, k);
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (size_t k = 1; k < threads; ++k) parts[0].merge(parts[k]);
  return parts[0];
}

namespace {

std::string wall_clock() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm_buf{};
  localtime_r(&now, &tm_buf);
  std::strftime(buf, sizeof(buf), "%Y-%m-%d %H:%M:%S", &tm_buf);
  return buf;
}

struct LoadedDataset {
  Manifest manifest;
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> val;
};

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.out.empty()) {
    throw ConfigError("a run needs an output directory ('out' or --out)");
  }

  std::vector<LoadedDataset> sets;
  for (const fs::path& dir : cfg.datasets) {
    LoadedDataset ds;
    ds.manifest = read_manifest(dir);
    ds.train = load_split(dir, "train");
    ds.val = load_split(dir, "val");
    if (ds.train.empty() || ds.val.empty()) {
      throw DataError("dataset has an empty split: " + dir.string());
    }
    sets.push_back(std::move(ds));
  }
  const size_t num_classes = sets[0].manifest.spec.num_classes;
  for (const LoadedDataset& ds : sets) {
    if (ds.manifest.spec.num_classes != num_classes) {
      throw DataError("per-step datasets disagree on class count");
    }
    if (ds.manifest.spec.image_size != cfg.model.image_size) {
      throw ConfigError("dataset image size " +
                        std::to_string(ds.manifest.spec.image_size) +
                        " does not match the model's " +
                        std::to_string(cfg.model.image_size));
    }
  }

  const TaskSchedule schedule = build_schedule(cfg.schedule, num_classes);
  if (cfg.datasets.size() != 1 &&
      cfg.datasets.size() != schedule.steps.size()) {
    throw ConfigError("need one dataset, or exactly one per schedule step (" +
                      std::to_string(schedule.steps.size()) + ")");
  }
  if (mode_is_joint(cfg.mode) && schedule.steps.size() != 1) {
    throw ConfigError("mode " + train_mode_name(cfg.mode) +
                      " trains jointly and needs a single-step schedule; '" +
                      cfg.schedule + "' has " +
                      std::to_string(schedule.steps.size()) + " steps");
  }

  std::error_code ec;
  fs::create_directories(cfg.out / "checkpoints", ec);
  if (ec) throw IoError("cannot create output directory: " + cfg.out.string());
  std::ofstream steps_log(cfg.out / "steps.jsonl", std::ios::trunc);
  if (!steps_log) {
    throw IoError("cannot write " + (cfg.out / "steps.jsonl").string());
  }
  std::ofstream run_log(cfg.out / "run.log", std::ios::trunc);
  run_log << wall_clock() << " start mode=" << train_mode_name(cfg.mode)
          << " schedule=" << cfg.schedule << " seed=" << cfg.seed << "\n";

  Rng init_rng = Rng::stream(cfg.seed, "init");
  ModelSpec ms = cfg.model;
  ms.num_classes = 1 + schedule.steps[0].classes.size();
  IncrementalState state;
  state.model = SegModel::init(ms, init_rng);

  uint64_t initial_trainable = 0;
  uint64_t incremental_trainable = 0;
  double macs_total = 0.0;

  for (size_t t = 0; t < schedule.steps.size(); ++t) {
    const TaskStep& step = schedule.steps[t];
    const LoadedDataset& ds = sets[cfg.datasets.size() == 1 ? 0 : t];

    std::vector<TrainSample> slice;
    slice.reserve(ds.train.size());
    for (const SegmentationSample& s : ds.train) {
      slice.push_back(
          {to_model_input(s), remap_labels(s.labels, step.classes)});
    }

    TrainTaskConfig tcfg;
    tcfg.epochs = cfg.epochs_per_task;
    tcfg.batch_size = cfg.batch_size;
    tcfg.learning_rate =
        t == 0 ? cfg.learning_rate_initial
               : (step.classes.size() <= cfg.single_class_threshold
                      ? cfg.learning_rate_single_class
                      : cfg.learning_rate_incremental);
    tcfg.momentum = cfg.momentum;
    tcfg.weight_decay = cfg.weight_decay;
    tcfg.lora_rank = cfg.rank;
    tcfg.seed = cfg.seed;
    tcfg.loss = cfg.loss;
    tcfg.on_epoch = [&steps_log](const EpochLog& log) {
      const json line = {{"step", log.task},
                         {"epoch", log.epoch},
                         {"ce", log.ce},
                         {"kd", log.kd},
                         {"total", log.total},
                         {"learning_rate", log.learning_rate},
                         {"batches", log.batches}};
      steps_log << line.dump() << "\n";
    };

    train_task(state, cfg.mode, step.classes, slice, tcfg);

    const uint64_t trainable_now = count_params(state.model, true);
    if (t == 0) initial_trainable = trainable_now;
    incremental_trainable = trainable_now;

    double step_macs =
        static_cast<double>(count_macs(state.model, 1, MacPhase::kTraining)) *
        static_cast<double>(slice.size()) *
        static_cast<double>(cfg.epochs_per_task);
    if (state.teacher) {
      step_macs += static_cast<double>(
                       count_macs(*state.teacher, 1, MacPhase::kForward)) *
                   static_cast<double>(slice.size()) *
                   static_cast<double>(cfg.epochs_per_task);
    }
    macs_total += step_macs;

    save_checkpoint(state.model, state.adapters,
                    cfg.out / "checkpoints" /
                        ("step_" + std::to_string(t) + ".clra"));
    run_log << wall_clock() << " step " << t << " done\n";
  }
  steps_log.close();

  std::vector<SegmentationSample> val;
  for (const LoadedDataset& ds : sets) {
    val.insert(val.end(), ds.val.begin(), ds.val.end());
  }
  const ConfusionMatrix cm =
      evaluate_model(state.model, val, eval_threads(val.size()));

  MetricsReport report;
  report.mode = train_mode_name(cfg.mode);
  report.schedule = cfg.schedule;
  report.seed = cfg.seed;
  std::optional<double> all_miou;
  for (const EvalRange& r :
       default_ranges(schedule.steps[0].classes.size(), num_classes - 1)) {
    const std::optional<double> v = miou(cm, r.ids);
    report.ranges.push_back({r.name, v});
    if (r.name == "All") all_miou = v;
  }
  if (cfg.jt_baseline_miou && all_miou) {
    report.forget = forget_score(*cfg.jt_baseline_miou, *all_miou);
  }
  report.trainable_params = count_params(state.model, true);
  report.total_params = count_params(state.model, false);
  report.averaged_params_m =
      averaged_params(initial_trainable, incremental_trainable);
  report.training_macs_m = macs_total / 1e6;
  if (all_miou && *all_miou > 0.0 && report.training_macs_m > 0.0) {
    NetScoreInput ns;
    ns.a_n = *all_miou;
    ns.p_n = report.averaged_params_m;
    ns.m_n = report.training_macs_m;
    report.net = netscore(ns);
  }

  const json full = {{"config", json::parse(cfg.to_json())},
                     {"metrics", json::parse(report.to_json())}};
  {
    std::ofstream f(cfg.out / "report.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (cfg.out / "report.json").string());
    f << full.dump(2) << "\n";
  }
  {
    std::ofstream f(cfg.out / "report.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (cfg.out / "report.csv").string());
    f << report.csv_header() << "\n" << report.csv_row() << "\n";
  }
  run_log << wall_clock() << " end\n";
  return {report, cfg.out};
}

}  // namespace clora
