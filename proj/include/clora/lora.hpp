#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "clora/nn.hpp"
#include "clora/tensor.hpp"

namespace clora {

// Rank-r factor pair attached beside a frozen projection. The adapted layer
// computes W x + bias + scaling * up(down(x)); only down/up train.
// down is the Gaussian-initialized factor (serialized as ".A"), up is the
// zero-initialized one (".B"), so the delta is exactly zero at creation.
struct LoRAAdapter {
  std::string target_name;
  size_t rank = 0;
  Tensor down;  // [in x r]
  Tensor up;    // [r x out]
  double scaling = 1.0;
};

struct AdapterSet {
  std::vector<std::shared_ptr<LoRAAdapter>> adapters;
  bool merged = false;

  bool empty() const { return adapters.empty(); }
  size_t size() const { return adapters.size(); }
};

// Attaches fresh adapters to the query and value projections of every block
// and freezes the base encoder. Base weights are untouched (up factor is
// zero, so forward outputs are unchanged until training moves it).
AdapterSet create_adapters(SegModel& model, size_t rank, uint64_t seed);

// W x + bias, plus the adapter contribution when one is attached. Gradients
// reach only the adapter factors (and bias/weight if unfrozen), never a
// frozen base weight.
Tensor lora_forward(const LinearLayer& layer, const Tensor& x);

// Folds each adapter delta into its target weight (W' = W + s * down * up)
// and detaches the adapters. Forward outputs are preserved.
void merge(SegModel& model, AdapterSet& adapters);

// Merge into the current weights, then attach fresh adapters on the same
// targets. Forward outputs are preserved across the whole operation.
AdapterSet reinit(SegModel& model, AdapterSet& adapters, uint64_t seed);

// Sum over adapters of r * (d_in + d_out).
size_t lora_param_count(const AdapterSet& adapters);

// Rebuilds an AdapterSet view of whatever is currently attached (used after
// model cloning or checkpoint load).
AdapterSet collect_adapters(SegModel& model);

}  // namespace clora
