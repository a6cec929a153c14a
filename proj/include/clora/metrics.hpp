#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clora/labels.hpp"
#include "clora/tensor.hpp"

namespace clora {

// Rows are ground truth, columns are predictions; the ignore sentinel scores
// nowhere. Matrices over the same classes merge by addition, so per-thread
// accumulation followed by a merge is the sanctioned parallel pattern.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(size_t class_count);

  size_t class_count() const { return classes_; }
  uint64_t at(size_t gt, size_t pred) const;
  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);
  uint64_t total() const;

 private:
  size_t classes_;
  std::vector<uint64_t> counts_;
};

// TP / (TP + FP + FN) per class; a class with zero union (absent from both
// prediction and truth) has no defined IoU.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);

// Mean IoU over class_range, in percent. Classes with no defined IoU are
// excluded from the mean; if that excludes every class the metric itself is
// undefined and nullopt comes back (never a made-up number).
std::optional<double> miou(const ConfusionMatrix& cm,
                           const std::vector<size_t>& class_range);

// How much of the joint-training ceiling was lost: JT minus the method,
// both scored on every class. Negative means the method beat JT.
double forget_score(double jt_miou_all, double method_miou_all);

struct NetScoreInput {
  double a_n = 0.0;    // final mIoU over all classes, percent
  double p_n = 0.0;    // parameters, millions (averaged across phases)
  double m_n = 0.0;    // training MACs, millions
  double alpha = 2.0;
  double beta = 0.5;
  double gamma = 0.5;
};

// 20 * log10(a^alpha / (p^beta * m^gamma)); higher is better.
double netscore(const NetScoreInput& input);

// Mean of the initial-phase and incremental-phase trainable counts, in
// millions. A method that trains everything in both phases just gets its
// full count back.
double averaged_params(uint64_t initial_step_params,
                       uint64_t incremental_step_params);

struct ParetoPoint {
  double params = 0.0;  // millions
  double miou = 0.0;    // percent
  std::string label;
};

// Non-dominated subset: a point is dominated when another needs no more
// parameters, scores at least as well, and is strictly better on one axis.
// Output is sorted by params ascending.
std::vector<ParetoPoint> pareto_front(const std::vector<ParetoPoint>& points);

// Per-pixel winning channel of [B x C x H x W] logits (ties to the lowest
// channel id).
std::vector<LabelMap> argmax_labels(const Tensor& logits);

struct RangeMiou {
  std::string name;             // e.g. "0-15", "16-20", "All"
  std::optional<double> value;  // percent; nullopt when undefined
};

struct MetricsReport {
  std::string mode;
  std::string schedule;
  uint64_t seed = 0;
  std::vector<RangeMiou> ranges;
  std::optional<double> forget;  // vs the JT baseline, "All" range only
  uint64_t trainable_params = 0;
  uint64_t total_params = 0;
  double averaged_params_m = 0.0;  // millions
  double training_macs_m = 0.0;    // millions, summed over all steps
  std::optional<double> net;

  std::string to_json() const;  // pretty-printed object with units spelled out
  // Column order: mode, schedule, seed, one column per range, forget_score,
  // trainable_params, total_params, averaged_params_millions,
  // training_macs_millions, netscore. Undefined values print empty.
  std::string csv_header() const;
  std::string csv_row() const;
};

}  // namespace clora
