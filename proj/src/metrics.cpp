#include "clora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "clora/errors.hpp"
#include "json.hpp"

namespace clora {

ConfusionMatrix::ConfusionMatrix(size_t class_count)
    : classes_(class_count), counts_(class_count * class_count, 0) {
  if (class_count == 0) throw ContractError("confusion matrix needs classes");
}

uint64_t ConfusionMatrix::at(size_t gt, size_t pred) const {
  if (gt >= classes_ || pred >= classes_) {
    throw ContractError("confusion matrix index out of range");
  }
  return counts_[gt * classes_ + pred];
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("prediction and ground truth sizes differ");
  }
  for (size_t i = 0; i < gt.ids.size(); ++i) {
    const uint8_t g = gt.ids[i];
    const uint8_t p = pred.ids[i];
    if (g == kIgnoreLabel) continue;
    if (g >= classes_) {
      throw DataError("ground-truth id " + std::to_string(g) + " >= " +
                      std::to_string(classes_) + " classes");
    }
    if (p >= classes_) {
      throw DataError("predicted id " + std::to_string(p) + " >= " +
                      std::to_string(classes_) + " classes");
    }
    counts_[static_cast<size_t>(g) * classes_ + p] += 1;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) {
    throw DimensionError("cannot merge confusion matrices of different sizes");
  }
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

uint64_t ConfusionMatrix::total() const {
  uint64_t t = 0;
  for (uint64_t c : counts_) t += c;
  return t;
}

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const size_t n = cm.class_count();
  std::vector<std::optional<double>> out(n);
  for (size_t c = 0; c < n; ++c) {
    const uint64_t tp = cm.at(c, c);
    uint64_t fp = 0, fn = 0;
    for (size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const uint64_t un = tp + fp + fn;
    if (un > 0) {
      out[c] = static_cast<double>(tp) / static_cast<double>(un);
    }
  }
  return out;
}

std::optional<double> miou(const ConfusionMatrix& cm,
                           const std::vector<size_t>& class_range) {
  if (class_range.empty()) throw ContractError("empty class range");
  const auto ious = per_class_iou(cm);
  double sum = 0.0;
  size_t counted = 0;
  for (size_t c : class_range) {
    if (c >= cm.class_count()) {
      throw ContractError("class " + std::to_string(c) +
                          " outside confusion matrix");
    }
    if (ious[c].has_value()) {
      sum += *ious[c];
      ++counted;
    }
  }
  if (counted == 0) return std::nullopt;
  return 100.0 * sum / static_cast<double>(counted);
}

double forget_score(double jt_miou_all, double method_miou_all) {
  if (!std::isfinite(jt_miou_all) || !std::isfinite(method_miou_all)) {
    throw ContractError("forget score needs finite mIoU values");
  }
  return jt_miou_all - method_miou_all;
}

double netscore(const NetScoreInput& input) {
  if (!(input.a_n > 0.0) || input.a_n > 100.0) {
    throw ContractError("a_N must be a percentage in (0, 100]");
  }
  if (!(input.p_n > 0.0) || !(input.m_n > 0.0)) {
    throw ContractError("p_N and m_N must be positive");
  }
  const double num = std::pow(input.a_n, input.alpha);
  const double den =
      std::pow(input.p_n, input.beta) * std::pow(input.m_n, input.gamma);
  return 20.0 * std::log10(num / den);
}

double averaged_params(uint64_t initial_step_params,
                       uint64_t incremental_step_params) {
  if (initial_step_params == 0 || incremental_step_params == 0) {
    throw ContractError("parameter counts must be positive");
  }
  return (static_cast<double>(initial_step_params) +
          static_cast<double>(incremental_step_params)) /
         2.0 / 1e6;
}

std::vector<ParetoPoint> pareto_front(const std::vector<ParetoPoint>& points) {
  if (points.empty()) throw ContractError("empty point list");
  std::vector<ParetoPoint> sorted = points;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ParetoPoint& a, const ParetoPoint& b) {
                     if (a.params != b.params) return a.params < b.params;
                     return a.miou > b.miou;
                   });
  std::vector<ParetoPoint> front;
  double best_miou = -std::numeric_limits<double>::infinity();
  double best_params = 0.0;
  for (const ParetoPoint& p : sorted) {
    if (p.miou > best_miou) {
      front.push_back(p);
      best_miou = p.miou;
      best_params = p.params;
    } else if (p.miou == best_miou && p.params == best_params) {
      // equal on both axes: neither dominates the other
      front.push_back(p);
    }
  }
  return front;
}

std::vector<LabelMap> argmax_labels(const Tensor& logits) {
  const auto& sh = logits.shape();
  if (sh.size() != 4) {
    throw DimensionError("argmax_labels expects [B x C x H x W], got " +
                         shape_str(sh));
  }
  const size_t batch = sh[0], channels = sh[1], plane = sh[2] * sh[3];
  if (channels > 255) throw ContractError("more channels than label ids");
  std::vector<LabelMap> out;
  out.reserve(batch);
  const double* src = logits.data().data();
  for (size_t b = 0; b < batch; ++b) {
    LabelMap m = LabelMap::filled(sh[2], sh[3], 0);
    const double* base = src + b * channels * plane;
    for (size_t px = 0; px < plane; ++px) {
      size_t best = 0;
      double best_v = base[px];
      for (size_t c = 1; c < channels; ++c) {
        const double v = base[c * plane + px];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      m.ids[px] = static_cast<uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["mode"] = mode;
  j["schedule"] = schedule;
  j["seed"] = seed;
  nlohmann::json m = nlohmann::json::object();
  for (const RangeMiou& r : ranges) {
    if (r.value.has_value()) {
      m[r.name] = *r.value;
    } else {
      m[r.name] = nullptr;
    }
  }
  j["miou"] = m;
  j["forget_score"] = forget.has_value() ? nlohmann::json(*forget)
                                         : nlohmann::json(nullptr);
  j["params"] = {{"trainable", trainable_params},
                 {"total", total_params},
                 {"averaged_millions", averaged_params_m}};
  j["macs"] = {{"training_millions", training_macs_m}};
  j["netscore"] = net.has_value() ? nlohmann::json(*net)
                                  : nlohmann::json(nullptr);
  j["units"] = {{"miou", "percent"},
                {"params", "count"},
                {"averaged_params", "millions"},
                {"macs", "millions"}};
  return j.dump(2);
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

std::string MetricsReport::csv_header() const {
  std::ostringstream os;
  os << "mode,schedule,seed";
  for (const RangeMiou& r : ranges) os << ",miou_" << r.name;
  os << ",forget_score,trainable_params,total_params,"
        "averaged_params_millions,training_macs_millions,netscore";
  return os.str();
}

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os << mode << ',' << schedule << ',' << seed;
  for (const RangeMiou& r : ranges) {
    os << ',';
    if (r.value.has_value()) os << fmt(*r.value);
  }
  os << ',';
  if (forget.has_value()) os << fmt(*forget);
  os << ',' << trainable_params << ',' << total_params << ','
     << fmt(averaged_params_m) << ',' << fmt(training_macs_m) << ',';
  if (net.has_value()) os << fmt(*net);
  return os.str();
}

}  // namespace clora
