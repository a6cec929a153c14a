#include "clora/lora.hpp"

#include <algorithm>
#include <string>

#include "clora/errors.hpp"

namespace clora {

namespace {
constexpr double kAdapterInitStd = 0.02;
}

AdapterSet create_adapters(SegModel& model, size_t rank, uint64_t seed) {
  if (rank < 1) throw ContractError("adapter rank must be >= 1");
  AdapterSet set;
  Rng rng = Rng::stream(seed, "lora.init");
  for (LinearLayer* l : model.adapter_targets()) {
    if (l->lora) {
      throw ContractError("layer " + l->name + " already has an adapter");
    }
    const size_t in = l->in_dim();
    const size_t out = l->out_dim();
    if (rank > std::min(in, out)) {
      throw ContractError("rank " + std::to_string(rank) +
                          " exceeds min dimension " +
                          std::to_string(std::min(in, out)) + " of " + l->name);
    }
    auto ad = std::make_shared<LoRAAdapter>();
    ad->target_name = l->name;
    ad->rank = rank;
    ad->down = Tensor::randn({in, rank}, rng, kAdapterInitStd, true);
    ad->up = Tensor::zeros({rank, out}, true);
    l->lora = ad;
    set.adapters.push_back(std::move(ad));
  }
  model.set_encoder_trainable(false);
  return set;
}

Tensor lora_forward(const LinearLayer& layer, const Tensor& x) {
  if (x.shape().size() != 2 || x.cols() != layer.in_dim()) {
    throw DimensionError("input to " + layer.name + " must be [N x " +
                         std::to_string(layer.in_dim()) + "], got " +
                         shape_str(x.shape()));
  }
  Tensor h = add_rowvec(matmul(x, layer.weight), layer.bias);
  if (layer.lora) {
    Tensor delta = matmul(matmul(x, layer.lora->down), layer.lora->up);
    if (layer.lora->scaling != 1.0) delta = scale(delta, layer.lora->scaling);
    h = add(h, delta);
  }
  return h;
}

void merge(SegModel& model, AdapterSet& adapters) {
  if (adapters.merged) throw ContractError("adapter set already merged");
  if (adapters.empty()) throw ContractError("no adapters to merge");
  NoGradGuard ng;
  std::vector<LinearLayer*> targets = model.adapter_targets();
  for (auto& ad : adapters.adapters) {
    LinearLayer* target = nullptr;
    for (LinearLayer* l : targets) {
      if (l->lora == ad) {
        target = l;
        break;
      }
    }
    if (!target) {
      throw ContractError("adapter for " + ad->target_name +
                          " is not attached to this model");
    }
    Tensor delta = matmul(ad->down, ad->up);
    const size_t in = target->in_dim();
    const size_t out = target->out_dim();
    for (size_t i = 0; i < in; ++i) {
      for (size_t j = 0; j < out; ++j) {
        target->weight.at_mut(i, j) += ad->scaling * delta.at(i, j);
      }
    }
    target->lora.reset();
  }
  adapters.merged = true;
}

AdapterSet reinit(SegModel& model, AdapterSet& adapters, uint64_t seed) {
  if (adapters.empty() || adapters.merged) {
    throw ContractError("reinit needs an attached adapter set");
  }
  const size_t rank = adapters.adapters.front()->rank;
  merge(model, adapters);
  return create_adapters(model, rank, seed);
}

size_t lora_param_count(const AdapterSet& adapters) {
  size_t total = 0;
  for (const auto& ad : adapters.adapters) {
    total += ad->rank * (ad->down.shape()[0] + ad->up.shape()[1]);
  }
  return total;
}

AdapterSet collect_adapters(SegModel& model) {
  AdapterSet set;
  for (LinearLayer* l : model.adapter_targets()) {
    if (l->lora) set.adapters.push_back(l->lora);
  }
  return set;
}

}  // namespace clora
