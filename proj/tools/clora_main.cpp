#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clora/config.hpp"
#include "clora/continual.hpp"
#include "clora/data.hpp"
#include "clora/errors.hpp"
#include "clora/experiment.hpp"
#include "clora/metrics.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;  // usage / config errors
constexpr int kExitData = 2;   // unreadable or malformed data files
constexpr int kExitNumeric = 3;  // NaN watchdog tripped

std::string fmt1(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
};

int cmd_synth(const SynthArgs& args) {
  clora::SynthSpec spec = args.config.empty()
                              ? clora::SynthSpec::desk_default(6, 20, 1)
                              : clora::load_synth_spec(args.config);
  if (args.seed) spec.seed = *args.seed;
  clora::generate(spec, args.out);

  const clora::Manifest m = clora::read_manifest(args.out);
  const size_t total = spec.samples_per_class * (spec.num_classes - 1);
  std::printf("wrote %s: %zu images (%zu train / %zu val), %zu classes\n",
              args.out.c_str(), total, m.train.size(), m.val.size(),
              spec.num_classes);
  std::printf("%4s  %-14s %12s\n", "id", "class", "pixels");
  for (size_t c = 0; c < m.class_names.size(); ++c) {
    std::printf("%4zu  %-14s %12llu\n", c, m.class_names[c].c_str(),
                static_cast<unsigned long long>(m.pixel_counts[c]));
  }
  return kExitOk;
}

// --- run --------------------------------------------------------------------

struct RunArgs {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  std::optional<size_t> rank;
  std::string mode;
};

int cmd_run(const RunArgs& args) {
  clora::ExperimentConfig cfg = clora::load_experiment_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (!args.out.empty()) cfg.out = args.out;
  if (args.rank) cfg.rank = *args.rank;
  if (!args.mode.empty()) cfg.mode = clora::parse_train_mode(args.mode);
  cfg.validate();

  const clora::RunResult res = clora::run_experiment(cfg);
  const clora::MetricsReport& r = res.report;
  std::printf("mode=%s schedule=%s seed=%llu\n", r.mode.c_str(),
              r.schedule.c_str(), static_cast<unsigned long long>(r.seed));
  std::string line = " ";
  for (const clora::RangeMiou& range : r.ranges) {
    line += " miou[" + range.name + "]=" +
            (range.value ? fmt1(*range.value) : std::string("undefined"));
  }
  std::printf("%s\n", line.c_str());
  std::printf("  trainable=%llu total=%llu params_avg_m=%s macs_m=%s\n",
              static_cast<unsigned long long>(r.trainable_params),
              static_cast<unsigned long long>(r.total_params),
              fmt1(r.averaged_params_m).c_str(),
              fmt1(r.training_macs_m).c_str());
  if (r.forget) std::printf("  forget_score=%s\n", fmt1(*r.forget).c_str());
  if (r.net) std::printf("  netscore=%s\n", fmt1(*r.net).c_str());
  std::printf("report: %s\n", (res.out_dir / "report.json").string().c_str());
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "val";
  std::string ranges = "All";
  std::optional<double> jt_miou;
  std::string out;
};

int cmd_eval(const EvalArgs& args) {
  clora::Checkpoint ckpt = clora::load_checkpoint(args.checkpoint);
  const std::vector<clora::SegmentationSample> samples =
      clora::load_split(args.data, args.split);
  const size_t classes = ckpt.model.spec.num_classes;
  const std::vector<clora::EvalRange> ranges =
      clora::parse_ranges(args.ranges, classes);

  const clora::ConfusionMatrix cm = clora::evaluate_model(
      ckpt.model, samples, clora::eval_threads(samples.size()));

  clora::MetricsReport report;
  report.mode = "eval";
  report.schedule = "-";
  report.seed = 0;
  std::optional<double> all_value;
  for (const clora::EvalRange& r : ranges) {
    const std::optional<double> v = clora::miou(cm, r.ids);
    report.ranges.push_back({r.name, v});
    if ((r.name == "All" || r.name == "all") && v) all_value = v;
  }
  if (args.jt_miou && all_value) {
    report.forget = clora::forget_score(*args.jt_miou, *all_value);
  }
  report.trainable_params = clora::count_params(ckpt.model, true);
  report.total_params = clora::count_params(ckpt.model, false);
  report.averaged_params_m = static_cast<double>(report.total_params) / 1e6;
  report.training_macs_m = 0.0;  // evaluation alone spends no training MACs

  std::printf("%s\n", report.to_json().c_str());
  if (!args.out.empty()) {
    std::error_code ec;
    fs::create_directories(args.out, ec);
    if (ec) throw clora::IoError("cannot create " + args.out);
    std::ofstream jf(fs::path(args.out) / "report.json", std::ios::trunc);
    if (!jf) throw clora::IoError("cannot write report.json under " + args.out);
    jf << report.to_json() << "\n";
    std::ofstream cf(fs::path(args.out) / "report.csv", std::ios::trunc);
    if (!cf) throw clora::IoError("cannot write report.csv under " + args.out);
    cf << report.csv_header() << "\n" << report.csv_row() << "\n";
  }
  return kExitOk;
}

// --- report readers for netscore / pareto -----------------------------------

struct ReportSummary {
  std::string file;
  std::string mode;
  std::string schedule;
  uint64_t seed = 0;
  std::optional<double> miou_all;
  double trainable_params = 0.0;
  double averaged_params_m = 0.0;
  double macs_m = 0.0;
  bool units_ok = true;
};

ReportSummary read_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw clora::IoError("cannot open report: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw clora::ParseError("report is not valid JSON: " + path + ": " +
                            e.what());
  }
  const json& m = j.contains("metrics") ? j.at("metrics") : j;
  ReportSummary s;
  s.file = path;
  try {
    s.mode = m.at("mode").get<std::string>();
    s.schedule = m.at("schedule").get<std::string>();
    s.seed = m.at("seed").get<uint64_t>();
    const json& miou = m.at("miou");
    for (const auto& [name, value] : miou.items()) {
      if ((name == "All" || name == "all") && !value.is_null()) {
        s.miou_all = value.get<double>();
      }
    }
    s.trainable_params = m.at("params").at("trainable").get<double>();
    s.averaged_params_m = m.at("params").at("averaged_millions").get<double>();
    s.macs_m = m.at("macs").at("training_millions").get<double>();
    const json expected_units = {{"miou", "percent"},
                                 {"params", "count"},
                                 {"averaged_params", "millions"},
                                 {"macs", "millions"}};
    s.units_ok = m.contains("units") && m.at("units") == expected_units;
  } catch (const json::exception& e) {
    throw clora::ParseError("report " + path +
                            " is missing a required field: " + e.what());
  }
  return s;
}

struct TableArgs {
  std::vector<std::string> reports;
  std::string out;
};

int cmd_netscore(const TableArgs& args) {
  std::vector<std::pair<ReportSummary, std::optional<double>>> rows;
  for (const std::string& path : args.reports) {
    ReportSummary s = read_report(path);
    std::optional<double> omega;
    if (s.units_ok && s.miou_all && *s.miou_all > 0.0 &&
        s.averaged_params_m > 0.0 && s.macs_m > 0.0) {
      clora::NetScoreInput in;
      in.a_n = *s.miou_all;
      in.p_n = s.averaged_params_m;
      in.m_n = s.macs_m;
      omega = clora::netscore(in);
    }
    if (!s.units_ok) {
      std::fprintf(stderr, "warning: %s declares unexpected units; skipped\n",
                   path.c_str());
    }
    rows.emplace_back(std::move(s), omega);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.second.has_value() != b.second.has_value()) {
      return a.second.has_value();  // scored rows first
    }
    if (a.second && b.second) return *a.second > *b.second;
    return false;
  });

  std::ostringstream csv;
  csv << "file,mode,schedule,seed,miou_all,averaged_params_millions,"
         "training_macs_millions,netscore,units_ok\n";
  std::printf("%-11s %-8s %6s %9s %10s %12s %10s  %s\n", "mode", "schedule",
              "seed", "miou_all", "params_m", "macs_m", "netscore", "file");
  for (const auto& [s, omega] : rows) {
    csv << s.file << ',' << s.mode << ',' << s.schedule << ',' << s.seed << ','
        << (s.miou_all ? fmt1(*s.miou_all) : "") << ',' << s.averaged_params_m
        << ',' << s.macs_m << ',' << (omega ? fmt1(*omega) : "") << ','
        << (s.units_ok ? "yes" : "no") << "\n";
    std::printf("%-11s %-8s %6llu %9s %10s %12s %10s  %s%s\n", s.mode.c_str(),
                s.schedule.c_str(), static_cast<unsigned long long>(s.seed),
                (s.miou_all ? fmt1(*s.miou_all) : "-").c_str(),
                fmt1(s.averaged_params_m).c_str(), fmt1(s.macs_m).c_str(),
                (omega ? fmt1(*omega) : "-").c_str(), s.file.c_str(),
                s.units_ok ? "" : "  [units-mismatch]");
  }
  if (!args.out.empty()) {
    std::ofstream f(args.out, std::ios::trunc);
    if (!f) throw clora::IoError("cannot write " + args.out);
    f << csv.str();
  }
  return kExitOk;
}

int cmd_pareto(const TableArgs& args) {
  std::vector<clora::ParetoPoint> points;
  for (const std::string& path : args.reports) {
    const ReportSummary s = read_report(path);
    if (!s.miou_all) {
      throw clora::DataError("report " + path +
                             " has no defined all-class mIoU");
    }
    clora::ParetoPoint p;
    p.params = s.trainable_params / 1e6;  // the trade-off's cost axis
    p.miou = *s.miou_all;
    p.label = s.mode + "/" + s.schedule + "/s" + std::to_string(s.seed);
    points.push_back(std::move(p));
  }
  const std::vector<clora::ParetoPoint> front = clora::pareto_front(points);

  std::ostringstream csv;
  csv << "label,trainable_params_millions,miou_all\n";
  for (const clora::ParetoPoint& p : front) {
    csv << p.label << ',' << p.params << ',' << p.miou << "\n";
  }
  std::printf("%s", csv.str().c_str());
  if (!args.out.empty()) {
    std::ofstream f(args.out, std::ios::trunc);
    if (!f) throw clora::IoError("cannot write " + args.out);
    f << csv.str();
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clora — continual-learning segmentation laboratory"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  uint64_t synth_seed = 0;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", synth_args.config,
                    "Generation spec JSON (preset + overrides)");
  synth->add_option("--out", synth_args.out, "Dataset directory")->required();
  CLI::Option* synth_seed_opt =
      synth->add_option("--seed", synth_seed, "Override the generation seed");

  RunArgs run_args;
  uint64_t run_seed = 0;
  size_t run_rank = 0;
  CLI::App* run = app.add_subcommand("run", "Execute one experiment config");
  run->add_option("--config", run_args.config, "Experiment config JSON")
      ->required();
  CLI::Option* run_seed_opt =
      run->add_option("--seed", run_seed, "Override the config seed");
  run->add_option("--out", run_args.out, "Override the output directory");
  CLI::Option* run_rank_opt =
      run->add_option("--rank", run_rank, "Override the adapter rank");
  run->add_option("--mode", run_args.mode, "Override the training mode");

  EvalArgs eval_args;
  double eval_jt = 0.0;
  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Model checkpoint")
      ->required();
  eval->add_option("--data", eval_args.data, "Dataset directory")->required();
  eval->add_option("--split", eval_args.split, "train or val (default val)");
  eval->add_option("--ranges", eval_args.ranges,
                   "Comma list of id spans or All (default All)");
  CLI::Option* eval_jt_opt = eval->add_option(
      "--jt-miou", eval_jt, "Joint-training baseline for the forget score");
  eval->add_option("--out", eval_args.out, "Also write report files here");

  TableArgs net_args;
  CLI::App* net = app.add_subcommand(
      "netscore", "Efficiency score table from report.json files");
  net->add_option("reports", net_args.reports, "report.json files")
      ->required()
      ->expected(-1);
  net->add_option("--out", net_args.out, "Write the table as CSV here");

  TableArgs pareto_args;
  CLI::App* pareto = app.add_subcommand(
      "pareto", "Params/mIoU front from report.json files");
  pareto->add_option("reports", pareto_args.reports, "report.json files")
      ->required()
      ->expected(-1);
  pareto->add_option("--out", pareto_args.out, "Write the front as CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      if (*synth_seed_opt) synth_args.seed = synth_seed;
      return cmd_synth(synth_args);
    }
    if (run->parsed()) {
      if (*run_seed_opt) run_args.seed = run_seed;
      if (*run_rank_opt) run_args.rank = run_rank;
      return cmd_run(run_args);
    }
    if (eval->parsed()) {
      if (*eval_jt_opt) eval_args.jt_miou = eval_jt;
      return cmd_eval(eval_args);
    }
    if (net->parsed()) return cmd_netscore(net_args);
    if (pareto->parsed()) return cmd_pareto(pareto_args);
  } catch (const clora::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const clora::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const clora::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const clora::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return kExitData;
  } catch (const clora::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitData;
  } catch (const clora::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
