#pragma once

// Adam with decoupled weight decay.

#include <cstddef>
#include <vector>

#include "structlm/parameters.hpp"

namespace structlm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct AdamState {
  std::size_t t = 0;  // updates applied so far
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // Zero moments shaped like params.
  static AdamState zeros_like(const std::vector<NamedParameter>& params);
  bool matches(const std::vector<NamedParameter>& params) const;
};

// p <- p - lr * wd * p (decay-flagged parameters only), then
// p <- p - lr * m_hat / (sqrt(v_hat) + eps), using the accumulated grads.
void adamw_step(const std::vector<NamedParameter>& params, AdamState& state, const AdamWConfig& cfg, double lr);

}  // namespace structlm
