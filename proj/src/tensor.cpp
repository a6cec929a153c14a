#include "clora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace clora {

namespace {

thread_local bool g_recording = true;
thread_local uint64_t g_seq = 0;

size_t product(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t s : shape) {
    if (s == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
    n *= s;
  }
  return n;
}

void check_2d(const Tensor& t, const char* what) {
  if (t.shape().size() != 2)
    throw DimensionError(std::string(what) + ": expected 2-D tensor, got " +
                         shape_str(t.shape()));
}

// C += opA(A) * opB(B); C is m x n, inner dimension k. Loop orders are chosen
// per flag combination so the innermost loop walks contiguous memory.
void mm_accum(double* c, const double* a, const double* b, size_t m, size_t n,
              size_t k, bool ta, bool tb) {
  if (!ta && !tb) {  // A[m x k] * B[k x n]
    for (size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = b + p * n;
        for (size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else if (!ta && tb) {  // A[m x k] * B[n x k]^T
    for (size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      double* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {  // A[k x m]^T * B[k x n]
    for (size_t p = 0; p < k; ++p) {
      const double* arow = a + p * m;
      const double* brow = b + p * n;
      for (size_t i = 0; i < m; ++i) {
        const double api = arow[i];
        if (api == 0.0) continue;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
      }
    }
  } else {  // A[k x m]^T * B[n x k]^T
    for (size_t p = 0; p < k; ++p) {
      const double* arow = a + p * m;
      for (size_t j = 0; j < n; ++j) {
        const double bjp = b[j * k + p];
        if (bjp == 0.0) continue;
        for (size_t i = 0; i < m; ++i) c[i * n + j] += arow[i] * bjp;
      }
    }
  }
}

}  // namespace

std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// --- Tensor -----------------------------------------------------------------

TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) {
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  size_t n = product(shape);
  impl->shape = std::move(shape);
  impl->data.assign(n, 0.0);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(n, 0.0);
  return wrap_impl(std::move(impl));
}

Tensor Tensor::full(std::vector<size_t> shape, double value,
                    bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data_mut().begin(), t.data_mut().end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<size_t> shape, std::vector<double> data,
                         bool requires_grad) {
  if (product(shape) != data.size())
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return wrap_impl(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data_mut()) v = rng.gaussian(0.0, stddev);
  return t;
}

size_t Tensor::rows() const {
  check_2d(*this, "rows");
  return shape()[0];
}

size_t Tensor::cols() const {
  check_2d(*this, "cols");
  return shape()[1];
}

const std::vector<double>& Tensor::grad() const {
  if (!impl().requires_grad)
    throw ContractError("grad requested on a tensor that does not require it");
  return impl().grad;
}

void Tensor::set_requires_grad(bool on) {
  auto& im = impl();
  im.requires_grad = on;
  if (on && im.grad.size() != im.data.size()) im.grad.assign(im.data.size(), 0.0);
  if (!on) im.grad.clear();
}

void Tensor::zero_grad() {
  auto& im = impl();
  std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1)
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

double Tensor::at(size_t i, size_t j) const {
  check_2d(*this, "at");
  return impl().data[i * shape()[1] + j];
}

double& Tensor::at_mut(size_t i, size_t j) {
  check_2d(*this, "at");
  return impl().data[i * shape()[1] + j];
}

Tensor Tensor::clone() const {
  auto& im = impl();
  Tensor t = from_data(im.shape, im.data, im.requires_grad);
  return t;
}

void Tensor::copy_values_from(const Tensor& src) {
  if (src.shape() != shape())
    throw DimensionError("copy_values_from: " + shape_str(src.shape()) +
                         " into " + shape_str(shape()));
  impl().data = src.data();
}

// --- recording --------------------------------------------------------------

NoGradGuard::NoGradGuard() : prev_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = prev_; }

namespace autograd {

bool recording_enabled() { return g_recording; }

void record(Tensor& out, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> backward) {
  if (!g_recording) return;
  bool any = false;
  for (const Tensor& in : inputs)
    if (in.impl().requires_grad) any = true;
  if (!any) return;
  auto node = std::make_shared<Node>();
  node->inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) node->inputs.push_back(in.ptr());
  node->backward = std::move(backward);
  node->seq = ++g_seq;
  auto& im = out.impl();
  im.node = std::move(node);
  im.requires_grad = true;
  im.grad.assign(im.data.size(), 0.0);
}

void accum(TensorImpl& t, const double* delta, size_t n) {
  if (!t.requires_grad) return;
  for (size_t i = 0; i < n; ++i) t.grad[i] += delta[i];
}

}  // namespace autograd

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_2d(a, "matmul lhs");
  check_2d(b, "matmul rhs");
  const size_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const size_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb)
    throw DimensionError("matmul inner dimensions differ: " +
                         shape_str(a.shape()) + (trans_a ? "^T" : "") + " * " +
                         shape_str(b.shape()) + (trans_b ? "^T" : ""));
  Tensor out = Tensor::zeros({m, n});
  mm_accum(out.data_mut().data(), a.data().data(), b.data().data(), m, n, ka,
           trans_a, trans_b);

  auto ai = a.ptr();
  auto bi = b.ptr();
  autograd::record(out, {a, b}, [ai, bi, m, n, ka, trans_a, trans_b](TensorImpl& o) {
    const double* dC = o.grad.data();
    if (ai->requires_grad) {
      std::vector<double> dA(ai->data.size(), 0.0);
      if (!trans_a) {
        // dA = dC * opB(B)^T
        mm_accum(dA.data(), dC, bi->data.data(), m, ka, n, false, !trans_b);
      } else {
        // A stored [k x m]: dA = opB(B) * dC^T
        mm_accum(dA.data(), bi->data.data(), dC, ka, m, n, trans_b, true);
      }
      autograd::accum(*ai, dA.data(), dA.size());
    }
    if (bi->requires_grad) {
      std::vector<double> dB(bi->data.size(), 0.0);
      if (!trans_b) {
        // dB = opA(A)^T * dC
        mm_accum(dB.data(), ai->data.data(), dC, ka, n, m, !trans_a, false);
      } else {
        // B stored [n x k]: dB = dC^T * opA(A)
        mm_accum(dB.data(), dC, ai->data.data(), n, ka, m, true, trans_a);
      }
      autograd::accum(*bi, dB.data(), dB.size());
    }
  });
  return out;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.data_mut()[i] = a.data()[i] + b.data()[i];
  auto ai = a.ptr();
  auto bi = b.ptr();
  autograd::record(out, {a, b}, [ai, bi, n](TensorImpl& o) {
    autograd::accum(*ai, o.grad.data(), n);
    autograd::accum(*bi, o.grad.data(), n);
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  check_2d(x, "add_rowvec");
  if (bias.shape().size() != 1 || bias.shape()[0] != x.shape()[1])
    throw DimensionError("add_rowvec: bias " + shape_str(bias.shape()) +
                         " does not match " + shape_str(x.shape()));
  const size_t r = x.shape()[0], c = x.shape()[1];
  Tensor out = Tensor::zeros(x.shape());
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j)
      out.data_mut()[i * c + j] = x.data()[i * c + j] + bias.data()[j];
  auto xi = x.ptr();
  auto bi = bias.ptr();
  autograd::record(out, {x, bias}, [xi, bi, r, c](TensorImpl& o) {
    autograd::accum(*xi, o.grad.data(), r * c);
    if (bi->requires_grad) {
      std::vector<double> db(c, 0.0);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) db[j] += o.grad[i * c + j];
      autograd::accum(*bi, db.data(), c);
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.data_mut()[i] = a.data()[i] - b.data()[i];
  auto ai = a.ptr();
  auto bi = b.ptr();
  autograd::record(out, {a, b}, [ai, bi, n](TensorImpl& o) {
    autograd::accum(*ai, o.grad.data(), n);
    if (bi->requires_grad) {
      std::vector<double> db(n);
      for (size_t i = 0; i < n; ++i) db[i] = -o.grad[i];
      autograd::accum(*bi, db.data(), n);
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.data_mut()[i] = a.data()[i] * b.data()[i];
  auto ai = a.ptr();
  auto bi = b.ptr();
  autograd::record(out, {a, b}, [ai, bi, n](TensorImpl& o) {
    if (ai->requires_grad) {
      std::vector<double> d(n);
      for (size_t i = 0; i < n; ++i) d[i] = o.grad[i] * bi->data[i];
      autograd::accum(*ai, d.data(), n);
    }
    if (bi->requires_grad) {
      std::vector<double> d(n);
      for (size_t i = 0; i < n; ++i) d[i] = o.grad[i] * ai->data[i];
      autograd::accum(*bi, d.data(), n);
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.data_mut()[i] = a.data()[i] * s;
  auto ai = a.ptr();
  autograd::record(out, {a}, [ai, s, n](TensorImpl& o) {
    std::vector<double> d(n);
    for (size_t i = 0; i < n; ++i) d[i] = o.grad[i] * s;
    autograd::accum(*ai, d.data(), n);
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const size_t n = x.numel();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data_mut()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  auto xi = x.ptr();
  autograd::record(out, {x}, [xi, n](TensorImpl& o) {
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> d(n);
    for (size_t i = 0; i < n; ++i) {
      const double v = xi->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      d[i] = o.grad[i] * (cdf + v * pdf);
    }
    autograd::accum(*xi, d.data(), n);
  });
  return out;
}

Tensor softmax(const Tensor& logits, size_t axis) {
  const auto& shape = logits.shape();
  if (axis >= shape.size())
    throw DimensionError("softmax axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
  if (!all_finite(logits)) throw NumericError("softmax: non-finite input");
  const size_t c = shape[axis];
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  Tensor out = Tensor::zeros(shape);
  const double* in = logits.data().data();
  double* y = out.data_mut().data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t s = 0; s < inner; ++s) {
      const size_t base = o * c * inner + s;
      double mx = in[base];
      for (size_t j = 1; j < c; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (size_t j = 0; j < c; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (size_t j = 0; j < c; ++j) y[base + j * inner] /= z;
    }
  }

  auto xi = logits.ptr();
  auto yi = out.ptr();
  autograd::record(out, {logits}, [xi, yi, outer, inner, c](TensorImpl& o) {
    std::vector<double> d(xi->data.size(), 0.0);
    const double* yv = yi->data.data();
    for (size_t ou = 0; ou < outer; ++ou) {
      for (size_t s = 0; s < inner; ++s) {
        const size_t base = ou * c * inner + s;
        double dot = 0.0;
        for (size_t j = 0; j < c; ++j)
          dot += o.grad[base + j * inner] * yv[base + j * inner];
        for (size_t j = 0; j < c; ++j) {
          const size_t idx = base + j * inner;
          d[idx] = yv[idx] * (o.grad[idx] - dot);
        }
      }
    }
    autograd::accum(*xi, d.data(), d.size());
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  check_2d(x, "layer_norm");
  const size_t r = x.shape()[0], c = x.shape()[1];
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: gamma/beta must have " +
                         std::to_string(c) + " entries");
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto inv_std = std::make_shared<std::vector<double>>(r);
  for (size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    double mean = 0.0;
    for (size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mean) * is;
      (*xhat)[i * c + j] = xh;
      out.data_mut()[i * c + j] = xh * gamma.data()[j] + beta.data()[j];
    }
  }
  auto xi = x.ptr();
  auto gi = gamma.ptr();
  auto bi = beta.ptr();
  autograd::record(out, {x, gamma, beta},
                   [xi, gi, bi, xhat, inv_std, r, c](TensorImpl& o) {
    if (gi->requires_grad) {
      std::vector<double> dg(c, 0.0);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j)
          dg[j] += o.grad[i * c + j] * (*xhat)[i * c + j];
      autograd::accum(*gi, dg.data(), c);
    }
    if (bi->requires_grad) {
      std::vector<double> db(c, 0.0);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) db[j] += o.grad[i * c + j];
      autograd::accum(*bi, db.data(), c);
    }
    if (xi->requires_grad) {
      std::vector<double> dx(r * c);
      for (size_t i = 0; i < r; ++i) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (size_t j = 0; j < c; ++j) {
          const double g = o.grad[i * c + j] * gi->data[j];
          mean_g += g;
          mean_gx += g * (*xhat)[i * c + j];
        }
        mean_g /= static_cast<double>(c);
        mean_gx /= static_cast<double>(c);
        for (size_t j = 0; j < c; ++j) {
          const double g = o.grad[i * c + j] * gi->data[j];
          dx[i * c + j] =
              (*inv_std)[i] * (g - mean_g - (*xhat)[i * c + j] * mean_gx);
        }
      }
      autograd::accum(*xi, dx.data(), dx.size());
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, size_t col0, size_t col1) {
  check_2d(x, "slice_cols");
  const size_t r = x.shape()[0], c = x.shape()[1];
  if (col0 >= col1 || col1 > c)
    throw DimensionError("slice_cols [" + std::to_string(col0) + "," +
                         std::to_string(col1) + ") of " + shape_str(x.shape()));
  const size_t w = col1 - col0;
  Tensor out = Tensor::zeros({r, w});
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < w; ++j)
      out.data_mut()[i * w + j] = x.data()[i * c + col0 + j];
  auto xi = x.ptr();
  autograd::record(out, {x}, [xi, r, c, w, col0](TensorImpl& o) {
    std::vector<double> dx(r * c, 0.0);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < w; ++j)
        dx[i * c + col0 + j] = o.grad[i * w + j];
    autograd::accum(*xi, dx.data(), dx.size());
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty list");
  const size_t r = parts[0].rows();
  size_t total = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_cols");
    if (p.shape()[0] != r)
      throw DimensionError("concat_cols: row counts differ");
    total += p.shape()[1];
  }
  Tensor out = Tensor::zeros({r, total});
  size_t off = 0;
  for (const Tensor& p : parts) {
    const size_t w = p.shape()[1];
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < w; ++j)
        out.data_mut()[i * total + off + j] = p.data()[i * w + j];
    off += w;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<size_t> widths;
  for (const Tensor& p : parts) {
    impls.push_back(p.ptr());
    widths.push_back(p.shape()[1]);
  }
  autograd::record(out, parts, [impls, widths, r, total](TensorImpl& o) {
    size_t off = 0;
    for (size_t pi = 0; pi < impls.size(); ++pi) {
      const size_t w = widths[pi];
      if (impls[pi]->requires_grad) {
        std::vector<double> d(r * w);
        for (size_t i = 0; i < r; ++i)
          for (size_t j = 0; j < w; ++j)
            d[i * w + j] = o.grad[i * total + off + j];
        autograd::accum(*impls[pi], d.data(), d.size());
      }
      off += w;
    }
  });
  return out;
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("stack: empty list");
  const auto& s0 = parts[0].shape();
  for (const Tensor& p : parts)
    if (p.shape() != s0) throw DimensionError("stack: shapes differ");
  std::vector<size_t> shape;
  shape.push_back(parts.size());
  shape.insert(shape.end(), s0.begin(), s0.end());
  Tensor out = Tensor::zeros(shape);
  const size_t n = parts[0].numel();
  for (size_t b = 0; b < parts.size(); ++b)
    std::copy(parts[b].data().begin(), parts[b].data().end(),
              out.data_mut().begin() + b * n);
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) impls.push_back(p.ptr());
  autograd::record(out, parts, [impls, n](TensorImpl& o) {
    for (size_t b = 0; b < impls.size(); ++b)
      autograd::accum(*impls[b], o.grad.data() + b * n, n);
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  auto xi = x.ptr();
  autograd::record(out, {x}, [xi](TensorImpl& o) {
    std::vector<double> d(xi->data.size(), o.grad[0]);
    autograd::accum(*xi, d.data(), d.size());
  });
  return out;
}

Tensor tokens_to_grid(const Tensor& token_scores, size_t image_size,
                      size_t patch_size) {
  check_2d(token_scores, "tokens_to_grid");
  const size_t grid = image_size / patch_size;
  const size_t t = token_scores.shape()[0], c = token_scores.shape()[1];
  if (image_size % patch_size != 0 || grid * grid != t)
    throw DimensionError("tokens_to_grid: " + std::to_string(t) +
                         " tokens do not tile a " + std::to_string(image_size) +
                         "px image with patch " + std::to_string(patch_size));
  const size_t hw = image_size * image_size;
  Tensor out = Tensor::zeros({c, image_size, image_size});
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < image_size; ++i)
      for (size_t j = 0; j < image_size; ++j) {
        const size_t tok = (i / patch_size) * grid + j / patch_size;
        out.data_mut()[ch * hw + i * image_size + j] =
            token_scores.data()[tok * c + ch];
      }
  auto xi = token_scores.ptr();
  autograd::record(out, {token_scores},
                   [xi, image_size, patch_size, grid, c, hw](TensorImpl& o) {
    std::vector<double> d(xi->data.size(), 0.0);
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t i = 0; i < image_size; ++i)
        for (size_t j = 0; j < image_size; ++j) {
          const size_t tok = (i / patch_size) * grid + j / patch_size;
          d[tok * c + ch] += o.grad[ch * hw + i * image_size + j];
        }
    autograd::accum(*xi, d.data(), d.size());
  });
  return out;
}

// --- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  auto& li = loss.impl();
  if (li.data.size() != 1)
    throw ContractError("backward: loss must be scalar, got " +
                        shape_str(li.shape));
  if (li.backward_done)
    throw ContractError("backward: graph already consumed; run a new forward");

  // gather recorded impls reachable from the loss
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::shared_ptr<TensorImpl>> stack_;
  stack_.push_back(loss.ptr());
  while (!stack_.empty()) {
    auto cur = stack_.back();
    stack_.pop_back();
    if (!cur->node || seen.count(cur.get())) continue;
    seen.insert(cur.get());
    order.push_back(cur);
    for (const auto& in : cur->node->inputs) stack_.push_back(in);
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a->node->seq > b->node->seq;
  });

  if (li.requires_grad) li.grad.assign(1, 1.0);
  for (const auto& im : order) im->node->backward(*im);

  // free intermediates: they stop being graph participants entirely
  for (const auto& im : order) {
    im->node.reset();
    im->grad.clear();
    im->grad.shrink_to_fit();
    im->requires_grad = false;
  }
  li.backward_done = true;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& point, double eps) {
  Tensor x = point.clone();
  x.set_requires_grad(true);
  Tensor loss = f(x);
  backward(loss);
  std::vector<double> g_ad = x.grad();

  Tensor probe = point.clone();
  probe.set_requires_grad(false);
  double max_err = 0.0;
  NoGradGuard ng;
  for (size_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    const double fp = f(probe).item();
    probe.data_mut()[i] = orig - eps;
    const double fm = f(probe).item();
    probe.data_mut()[i] = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(g_ad[i] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace clora
