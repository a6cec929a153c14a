#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <vector>

#include "clora/continual.hpp"
#include "clora/errors.hpp"

namespace clora {

namespace {

struct PixelShape {
  size_t batch, channels, height, width;
};

PixelShape check_logits(const Tensor& logits, const char* who) {
  const auto& sh = logits.shape();
  if (sh.size() != 4) {
    throw DimensionError(std::string(who) + " expects [B x C x H x W], got " +
                         shape_str(sh));
  }
  return {sh[0], sh[1], sh[2], sh[3]};
}

void check_labels(const PixelShape& ps, const std::vector<LabelMap>& labels,
                  const char* who) {
  if (labels.size() != ps.batch) {
    throw DimensionError(std::string(who) + ": " + std::to_string(labels.size()) +
                         " label maps for batch " + std::to_string(ps.batch));
  }
  for (const LabelMap& m : labels) {
    if (m.height != ps.height || m.width != ps.width) {
      throw DimensionError(std::string(who) + ": label map size mismatch");
    }
  }
}

// log-softmax over the channel axis at one pixel; fills logq[C]
void pixel_log_softmax(const double* base, size_t channels, size_t plane,
                       double* logq) {
  double mx = base[0];
  for (size_t c = 1; c < channels; ++c) mx = std::max(mx, base[c * plane]);
  double sum = 0.0;
  for (size_t c = 0; c < channels; ++c) sum += std::exp(base[c * plane] - mx);
  const double lse = mx + std::log(sum);
  for (size_t c = 0; c < channels; ++c) logq[c] = base[c * plane] - lse;
}

}  // namespace

Tensor task_ce_loss(const Tensor& logits, const std::vector<LabelMap>& labels,
                    const std::vector<int>& old_classes) {
  const PixelShape ps = check_logits(logits, "task_ce_loss");
  check_labels(ps, labels, "task_ce_loss");
  std::set<int> absorbed{0};
  for (int c : old_classes) {
    if (c < 1 || static_cast<size_t>(c) >= ps.channels) {
      throw ContractError("old class id " + std::to_string(c) +
                          " outside logit channels");
    }
    absorbed.insert(c);
  }

  const size_t plane = ps.height * ps.width;
  const double* src = logits.data().data();
  // Cache per non-ignored pixel: flat offset, label, softmax probs.
  auto cache = std::make_shared<std::vector<std::pair<size_t, uint8_t>>>();
  auto probs = std::make_shared<std::vector<double>>();
  double total = 0.0;
  std::vector<double> logq(ps.channels);
  for (size_t b = 0; b < ps.batch; ++b) {
    for (size_t px = 0; px < plane; ++px) {
      const uint8_t label = labels[b].ids[px];
      if (label == kIgnoreLabel) continue;
      if (label >= ps.channels) {
        throw DataError("label " + std::to_string(label) + " >= " +
                        std::to_string(ps.channels) + " channels");
      }
      const size_t off = b * ps.channels * plane + px;
      pixel_log_softmax(src + off, ps.channels, plane, logq.data());
      if (label == 0) {
        double mass = 0.0;
        for (int c : absorbed) mass += std::exp(logq[static_cast<size_t>(c)]);
        total -= std::log(mass);
      } else {
        total -= logq[label];
      }
      cache->emplace_back(off, label);
      for (size_t c = 0; c < ps.channels; ++c)
        probs->push_back(std::exp(logq[c]));
    }
  }

  const size_t n = cache->size();
  if (n == 0) return Tensor::scalar(0.0);
  Tensor out = Tensor::scalar(total / static_cast<double>(n));

  const size_t channels = ps.channels;
  std::vector<int> absorbed_v(absorbed.begin(), absorbed.end());
  autograd::record(out, {logits}, [cache, probs, n, channels, plane,
                                   absorbed_v](TensorImpl& o) {
    // d/dz_i of one pixel's term: q_i - t_i, where t is one-hot for a
    // foreground label and t_i = [i in S] q_i / q_S for a background label.
    TensorImpl& in = *o.node->inputs[0];
    if (!in.requires_grad) return;
    const double g = o.grad[0] / static_cast<double>(n);
    for (size_t k = 0; k < n; ++k) {
      const size_t off = (*cache)[k].first;
      const uint8_t label = (*cache)[k].second;
      const double* q = probs->data() + k * channels;
      if (label == 0) {
        double mass = 0.0;
        for (int c : absorbed_v) mass += q[static_cast<size_t>(c)];
        for (size_t c = 0; c < channels; ++c) {
          double t = 0.0;
          for (int a : absorbed_v) {
            if (static_cast<size_t>(a) == c) {
              t = q[c] / mass;
              break;
            }
          }
          in.grad[off + c * plane] += g * (q[c] - t);
        }
      } else {
        for (size_t c = 0; c < channels; ++c) {
          const double t = (c == label) ? 1.0 : 0.0;
          in.grad[off + c * plane] += g * (q[c] - t);
        }
      }
    }
  });
  return out;
}

Tensor unbiased_kd_loss(const Tensor& student_logits,
                        const Tensor& teacher_logits,
                        const std::vector<int>& new_classes, double temperature,
                        const std::vector<LabelMap>* ignore_from) {
  const PixelShape sp = check_logits(student_logits, "unbiased_kd_loss");
  const PixelShape tp = check_logits(teacher_logits, "unbiased_kd_loss");
  if (sp.batch != tp.batch || sp.height != tp.height || sp.width != tp.width) {
    throw DimensionError("student/teacher batch or spatial size mismatch");
  }
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
  // Student channels must be exactly the teacher's plus the new classes.
  std::set<int> fresh(new_classes.begin(), new_classes.end());
  if (fresh.size() != new_classes.size()) {
    throw ContractError("duplicate new class ids");
  }
  if (sp.channels != tp.channels + fresh.size()) {
    throw DimensionError("student has " + std::to_string(sp.channels) +
                         " channels, teacher " + std::to_string(tp.channels) +
                         " + " + std::to_string(fresh.size()) + " new");
  }
  for (int c : fresh) {
    if (c < static_cast<int>(tp.channels) ||
        static_cast<size_t>(c) >= sp.channels) {
      throw DimensionError("new class id " + std::to_string(c) +
                           " does not extend teacher channels");
    }
  }
  if (ignore_from) check_labels(sp, *ignore_from, "unbiased_kd_loss");

  const size_t plane = sp.height * sp.width;
  const size_t cs = sp.channels, ct = tp.channels;
  const double* s_src = student_logits.data().data();
  const double* t_src = teacher_logits.data().data();

  // Per-pixel caches for the backward pass: student probs q and the teacher
  // ratios p_k / qhat_k.
  auto offsets = std::make_shared<std::vector<size_t>>();
  auto q_cache = std::make_shared<std::vector<double>>();
  auto ratio_cache = std::make_shared<std::vector<double>>();
  std::vector<double> logq(cs), logp(ct), scaled(std::max(cs, ct));
  double total = 0.0;
  for (size_t b = 0; b < sp.batch; ++b) {
    for (size_t px = 0; px < plane; ++px) {
      if (ignore_from && (*ignore_from)[b].ids[px] == kIgnoreLabel) continue;
      const size_t s_off = b * cs * plane + px;
      const size_t t_off = b * ct * plane + px;
      for (size_t c = 0; c < cs; ++c)
        scaled[c] = s_src[s_off + c * plane] / temperature;
      pixel_log_softmax(scaled.data(), cs, 1, logq.data());
      for (size_t c = 0; c < ct; ++c)
        scaled[c] = t_src[t_off + c * plane] / temperature;
      pixel_log_softmax(scaled.data(), ct, 1, logp.data());

      // qhat: background absorbs the student's new-class mass
      double qhat0 = std::exp(logq[0]);
      for (int c : fresh) qhat0 += std::exp(logq[static_cast<size_t>(c)]);
      double px_loss = -std::exp(logp[0]) * std::log(qhat0);
      for (size_t k = 1; k < ct; ++k)
        px_loss -= std::exp(logp[k]) * logq[k];
      total += px_loss;

      offsets->push_back(s_off);
      for (size_t c = 0; c < cs; ++c) q_cache->push_back(std::exp(logq[c]));
      ratio_cache->push_back(std::exp(logp[0]) / qhat0);
      for (size_t k = 1; k < ct; ++k)
        ratio_cache->push_back(std::exp(logp[k] - logq[k]));
    }
  }

  const size_t n = offsets->size();
  if (n == 0) return Tensor::scalar(0.0);
  Tensor out = Tensor::scalar(total / static_cast<double>(n));

  std::vector<int> fresh_v(fresh.begin(), fresh.end());
  autograd::record(out, {student_logits}, [offsets, q_cache, ratio_cache, n,
                                           cs, ct, plane, fresh_v,
                                           temperature](TensorImpl& o) {
    // d/du_i = q_i (1 - p_m(i)/qhat_m(i)), with u = z/T and m() folding new
    // classes into the background; see the aggregation partition.
    TensorImpl& in = *o.node->inputs[0];
    if (!in.requires_grad) return;
    const double g = o.grad[0] / (static_cast<double>(n) * temperature);
    for (size_t k = 0; k < n; ++k) {
      const size_t off = (*offsets)[k];
      const double* q = q_cache->data() + k * cs;
      const double* r = ratio_cache->data() + k * ct;
      for (size_t c = 0; c < cs; ++c) {
        size_t m = c;
        if (c >= ct) m = 0;  // new class -> background bucket
        in.grad[off + c * plane] += g * q[c] * (1.0 - r[m]);
      }
    }
  });
  return out;
}

}  // namespace clora
