#pragma once

#include <vector>

#include "clora/tensor.hpp"

namespace clora {

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.0;      // in [0, 1)
  double weight_decay = 0.0;  // L2 coefficient, >= 0
};

// p <- p - lr * v, where v <- momentum * v + (grad + wd * p).
// Grads are zeroed after each step.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, SgdConfig cfg);

  void step();
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  const SgdConfig& config() const { return cfg_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  SgdConfig cfg_;
};

}  // namespace clora
