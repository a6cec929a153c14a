#include "clora/optim.hpp"

namespace clora {

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, SgdConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.learning_rate >= 0.0))
    throw ContractError("sgd: learning rate must be non-negative");
  if (cfg_.momentum < 0.0 || cfg_.momentum >= 1.0)
    throw ContractError("sgd: momentum must be in [0, 1)");
  if (cfg_.weight_decay < 0.0)
    throw ContractError("sgd: weight decay must be non-negative");
  velocity_.resize(params_.size());
}

void SgdOptimizer::step() {
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    if (!p.requires_grad() || !p.has_grad())
      throw ContractError("sgd: parameter without grad buffer");
    auto& v = velocity_[pi];
    if (v.empty()) v.assign(p.numel(), 0.0);
    const auto& g = p.impl().grad;
    auto& d = p.data_mut();
    for (size_t i = 0; i < d.size(); ++i) {
      const double eff = g[i] + cfg_.weight_decay * d[i];
      v[i] = cfg_.momentum * v[i] + eff;
      d[i] -= cfg_.learning_rate * v[i];
    }
    p.zero_grad();
  }
}

}  // namespace clora
