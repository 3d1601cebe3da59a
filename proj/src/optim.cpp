#include "structlm/optim.hpp"

#include <cmath>

#include "structlm/errors.hpp"

namespace structlm {

AdamState AdamState::zeros_like(const std::vector<NamedParameter>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

bool AdamState::matches(const std::vector<NamedParameter>& params) const {
  if (m.size() != params.size() || v.size() != params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (m[i].size() != params[i].tensor.numel() || v[i].size() != params[i].tensor.numel()) return false;
  return true;
}

void adamw_step(const std::vector<NamedParameter>& params, AdamState& state, const AdamWConfig& cfg, double lr) {
  if (!state.matches(params)) throw DimensionError("adamw_step: optimizer state does not match parameters");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].tensor;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const double decay = params[k].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      if (decay != 0.0) w[i] -= decay * w[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

}  // namespace structlm
