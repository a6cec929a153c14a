#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "clora/errors.hpp"
#include "clora/rng.hpp"

namespace clora {

struct TensorImpl;
class Tensor;

// One recorded operation. The graph is whatever is reachable from a loss
// through these nodes; backward replays them in decreasing seq order, which
// is a reverse topological order because every op is created after its inputs.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
  uint64_t seq = 0;
};

struct TensorImpl {
  std::vector<size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // same size as data iff requires_grad
  std::shared_ptr<Node> node;
  bool backward_done = false;
};

// Dense row-major tensor of 64-bit floats, a value handle onto shared storage.
// Copying a Tensor aliases; clone() copies.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<size_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  // Gaussian(0, stddev) entries drawn from rng.
  static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<size_t>& shape() const { return impl().shape; }
  size_t numel() const { return impl().data.size(); }
  size_t rows() const;  // 2-D only
  size_t cols() const;

  const std::vector<double>& data() const { return impl().data; }
  std::vector<double>& data_mut() { return impl().data; }
  const std::vector<double>& grad() const;
  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !impl().grad.empty(); }
  void zero_grad();

  double item() const;  // scalar tensors only
  double at(size_t i, size_t j) const;
  double& at_mut(size_t i, size_t j);

  // Deep copy, detached from any graph.
  Tensor clone() const;
  // Copies values from src (same shape) without touching grad or graph state.
  void copy_values_from(const Tensor& src);

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<TensorImpl> ptr() const { return impl_; }
  TensorImpl& impl() const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor wrap_impl(std::shared_ptr<TensorImpl> impl);
};

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl);

// While alive on a thread, ops on that thread do not record graph nodes.
// Inference and gradient-free evaluation run inside one of these.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace autograd {
bool recording_enabled();
// Attaches a node to `out` capturing `inputs` if recording is on and any
// input participates in the graph. `backward` reads out.grad and accumulates
// into the inputs' grads via accum(). Custom fused ops use this directly.
void record(Tensor& out, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> backward);
// Adds delta into t's grad when t wants one; no-op for frozen tensors.
void accum(TensorImpl& t, const double* delta, size_t n);
}  // namespace autograd

// --- differentiable ops -----------------------------------------------------

// opA(a) * opB(b) where opX transposes when the flag is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor add_rowvec(const Tensor& x, const Tensor& bias);  // [N x k] + [k]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& x);  // exact erf form
// Max-shifted softmax along `axis`. Throws NumericError on non-finite input.
Tensor softmax(const Tensor& logits, size_t axis);
// Row-wise layer norm over the last axis of a 2-D tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor slice_cols(const Tensor& x, size_t col0, size_t col1);  // [col0, col1)
Tensor concat_cols(const std::vector<Tensor>& parts);
// Stacks same-shape tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
Tensor sum(const Tensor& x);  // scalar

// Spreads per-token scores [T x C] onto the pixel grid [C x H x W] by
// nearest-neighbor replication of each patch cell.
Tensor tokens_to_grid(const Tensor& token_scores, size_t image_size,
                      size_t patch_size);

// --- backward ---------------------------------------------------------------

// Populates grad for every requires_grad leaf reachable from `loss`, then
// frees the intermediate graph. A second call without a new forward throws.
void backward(const Tensor& loss);

// Max over coordinates of |autodiff - central_diff| / max(1, |central_diff|),
// with f re-evaluated at point +/- eps per coordinate.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& point, double eps = 1e-5);

bool all_finite(const Tensor& t);

std::string shape_str(const std::vector<size_t>& shape);

}  // namespace clora
