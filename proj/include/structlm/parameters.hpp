#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "structlm/rng.hpp"
#include "structlm/tensor.hpp"

namespace structlm {

enum class Init { kNormal, kZeros, kOnes };

// Declaration of one trainable buffer. Models are built by materializing a
// spec list in order, so the spec list alone fixes names, shapes, counts and
// the initialization draw order.
inline constexpr double kInitStd = 0.02;

struct ParamSpec {
  std::string name;
  std::string submodule;
  Shape shape;
  Init init = Init::kNormal;
  bool decay = true;
  double stddev = kInitStd;  // kNormal only
};

// 1/sqrt(fan_in), the usual scale for convolution and projection weights.
inline double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

inline Tensor materialize(const ParamSpec& spec, Rng& rng) {
  std::vector<double> v(shape_numel(spec.shape));
  switch (spec.init) {
    case Init::kNormal:
      for (double& x : v) x = rng.normal(0.0, spec.stddev);
      break;
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(v.begin(), v.end(), 1.0);
      break;
  }
  return Tensor::from_data(spec.shape, std::move(v), true);
}

struct NamedParameter {
  std::string name;
  std::string submodule;
  Tensor tensor;
  bool decay = true;
};

}  // namespace structlm
