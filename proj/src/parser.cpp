#include "structlm/parser.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "structlm/errors.hpp"

namespace structlm {

namespace {

// Additive mask for excluded logits; exp underflows to exactly zero after the
// max shift while staying finite.
constexpr double kMaskedLogit = -1e300;

bool is_valid(ValidMask valid, std::size_t i) { return valid.empty() || valid[i] != 0; }

void check_mask(ValidMask valid, std::size_t len, const char* op) {
  if (!valid.empty() && valid.size() != len) {
    throw DimensionError(std::string(op) + ": validity mask of length " + std::to_string(valid.size()) +
                         " for sequence of length " + std::to_string(len));
  }
}

}  // namespace

void ParserConfig::validate() const {
  if (n_conv_layers < 1) throw ConfigError("parser.n_conv_layers must be at least 1");
  if (kernel_size % 2 == 0) throw ConfigError("parser.kernel_size must be odd");
  if (hidden_width < 1) throw ConfigError("parser.hidden_width must be positive");
  if (!(tau_scope > 0.0)) throw ConfigError("parser.tau_scope must be positive");
  if (!(tau_height > 0.0)) throw ConfigError("parser.tau_height must be positive");
}

std::vector<ParamSpec> ParserWeights::specs(const ParserConfig& cfg, std::size_t d_model, std::size_t n_heads) {
  cfg.validate();
  const std::size_t hw = cfg.hidden_width;
  const std::string sub = "parser";
  std::vector<ParamSpec> out;
  for (std::size_t l = 0; l < cfg.n_conv_layers; ++l) {
    const std::string p = "conv" + std::to_string(l);
    const std::size_t in = l == 0 ? d_model : hw;
    out.push_back({p + ".weight", sub, {hw, cfg.kernel_size, in}, Init::kNormal, true, fan_in_std(cfg.kernel_size * in)});
    out.push_back({p + ".bias", sub, {hw}, Init::kZeros, false});
  }
  out.push_back({"distance.left", sub, {hw, hw}, Init::kNormal, true, fan_in_std(2 * hw)});
  out.push_back({"distance.right", sub, {hw, hw}, Init::kNormal, true, fan_in_std(2 * hw)});
  out.push_back({"distance.bias", sub, {hw}, Init::kZeros, false});
  out.push_back({"distance.out", sub, {hw, 1}, Init::kNormal, true, fan_in_std(hw)});
  out.push_back({"distance.out_bias", sub, {1}, Init::kZeros, false});
  out.push_back({"height.proj", sub, {hw, hw}, Init::kNormal, true, fan_in_std(hw)});
  out.push_back({"height.bias", sub, {hw}, Init::kZeros, false});
  out.push_back({"height.out", sub, {hw, 1}, Init::kNormal, true, fan_in_std(hw)});
  out.push_back({"height.out_bias", sub, {1}, Init::kZeros, false});
  out.push_back({"relation_logits", sub, {n_heads, 3}, Init::kZeros, false});
  return out;
}

ParserWeights ParserWeights::bind(const ParserConfig& cfg, const std::vector<Tensor>& tensors) {
  const std::size_t expected = 2 * cfg.n_conv_layers + 10;
  if (tensors.size() != expected) {
    throw ConfigError("parser expects " + std::to_string(expected) + " tensors, got " + std::to_string(tensors.size()));
  }
  ParserWeights w;
  std::size_t i = 0;
  for (std::size_t l = 0; l < cfg.n_conv_layers; ++l) {
    w.conv_weights.push_back(tensors[i++]);
    w.conv_biases.push_back(tensors[i++]);
  }
  w.distance_left = tensors[i++];
  w.distance_right = tensors[i++];
  w.distance_bias = tensors[i++];
  w.distance_out = tensors[i++];
  w.distance_out_bias = tensors[i++];
  w.height_proj = tensors[i++];
  w.height_bias = tensors[i++];
  w.height_out = tensors[i++];
  w.height_out_bias = tensors[i++];
  w.relation_logits = tensors[i++];
  return w;
}

ParserWeights ParserWeights::init(const ParserConfig& cfg, std::size_t d_model, std::size_t n_heads, Rng& rng) {
  std::vector<Tensor> tensors;
  for (const auto& spec : specs(cfg, d_model, n_heads)) tensors.push_back(materialize(spec, rng));
  return bind(cfg, tensors);
}

std::vector<std::pair<std::string, Tensor>> ParserWeights::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < conv_weights.size(); ++l) {
    out.emplace_back("conv" + std::to_string(l) + ".weight", conv_weights[l]);
    out.emplace_back("conv" + std::to_string(l) + ".bias", conv_biases[l]);
  }
  out.emplace_back("distance.left", distance_left);
  out.emplace_back("distance.right", distance_right);
  out.emplace_back("distance.bias", distance_bias);
  out.emplace_back("distance.out", distance_out);
  out.emplace_back("distance.out_bias", distance_out_bias);
  out.emplace_back("height.proj", height_proj);
  out.emplace_back("height.bias", height_bias);
  out.emplace_back("height.out", height_out);
  out.emplace_back("height.out_bias", height_out_bias);
  out.emplace_back("relation_logits", relation_logits);
  return out;
}

std::pair<Tensor, Tensor> compute_distances_heights(const Tensor& reps, const ParserWeights& weights,
                                                    const ParserConfig& cfg, ValidMask valid) {
  if (reps.rank() != 2) throw DimensionError("parser input must be [L x d_model], got " + shape_str(reps.shape()));
  const std::size_t len = reps.dim(0);
  if (len == 0) throw DimensionError("parser input has no tokens");
  check_mask(valid, len, "compute_distances_heights");
  const std::size_t pad = (cfg.kernel_size - 1) / 2;
  // Padded rows are zeroed before every convolution, so real tokens see the
  // same zero padding as in an unpadded sequence.
  Tensor keep;
  if (!valid.empty()) {
    std::vector<double> k(len);
    for (std::size_t i = 0; i < len; ++i) k[i] = valid[i] ? 1.0 : 0.0;
    keep = Tensor::from_data({len, 1}, std::move(k));
  }
  Tensor x = reps;
  for (std::size_t l = 0; l < weights.conv_weights.size(); ++l) {
    if (keep.defined()) x = mul(x, keep);
    x = tanh(layer_norm(conv1d(x, weights.conv_weights[l], weights.conv_biases[l], pad), Tensor(), Tensor()));
  }

  Tensor hz = tanh(layer_norm(add(matmul(x, weights.height_proj), weights.height_bias), Tensor(), Tensor()));
  Tensor heights = reshape(add(matmul(hz, weights.height_out), weights.height_out_bias), {len});

  Tensor distances;
  if (len == 1) {
    distances = Tensor::zeros({0});
  } else {
    Tensor left = matmul(slice(x, 0, 0, len - 1), weights.distance_left);
    Tensor right = matmul(slice(x, 0, 1, len), weights.distance_right);
    Tensor dz = tanh(layer_norm(add(add(left, right), weights.distance_bias), Tensor(), Tensor()));
    distances = reshape(add(matmul(dz, weights.distance_out), weights.distance_out_bias), {len - 1});
  }
  return {distances, heights};
}

Tensor scope_log_matrix(const Tensor& distances, const Tensor& heights, double tau_scope) {
  if (!(tau_scope > 0.0)) throw ConfigError("tau_scope must be positive");
  const std::size_t len = heights.numel();
  if (len == 0) throw DimensionError("scope over an empty sentence");
  if (distances.numel() + 1 != len) {
    throw DimensionError("scope: " + std::to_string(distances.numel()) + " distances for " + std::to_string(len) +
                         " heights");
  }
  if (len == 1) return Tensor::zeros({1, 1});

  // log(1 - blocking) for every (token, boundary) pair.
  Tensor z = scale(sub(reshape(distances, {1, len - 1}), reshape(heights, {len, 1})), 1.0 / tau_scope);
  Tensor log_open = neg(softplus(z));
  // prefix[i][j] = sum of log_open[i][k] for k < j.
  Tensor prefix = concat({Tensor::zeros({len, 1}), cumsum(log_open, 1)}, 1);

  std::vector<double> eye(len * len, 0.0), side(len * len, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    eye[i * len + i] = 1.0;
    for (std::size_t j = 0; j < len; ++j) side[i * len + j] = j > i ? 1.0 : (j < i ? -1.0 : 0.0);
  }
  Tensor anchor = sum_axis(mul(prefix, Tensor::from_data({len, len}, std::move(eye))), 1);
  return mul(sub(prefix, anchor), Tensor::from_data({len, len}, std::move(side)));
}

Tensor scope_matrix(const Tensor& distances, const Tensor& heights, double tau_scope, ValidMask valid) {
  const std::size_t len = heights.numel();
  check_mask(valid, len, "scope_matrix");
  Tensor scope = exp(scope_log_matrix(distances, heights, tau_scope));
  if (valid.empty()) return scope;
  std::vector<double> keep(len * len);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j) keep[i * len + j] = is_valid(valid, i) && is_valid(valid, j) ? 1.0 : 0.0;
  return mul(scope, Tensor::from_data({len, len}, std::move(keep)));
}

Tensor dependency_distribution(const Tensor& scope_log, const Tensor& heights, double tau_height, ValidMask valid,
                               std::vector<std::size_t>* fallback_rows) {
  if (!(tau_height > 0.0)) throw ConfigError("tau_height must be positive");
  const std::size_t len = heights.numel();
  if (scope_log.shape() != Shape{len, len}) {
    throw DimensionError("dependency_distribution: scope " + shape_str(scope_log.shape()) + " for " +
                         std::to_string(len) + " heights");
  }
  check_mask(valid, len, "dependency_distribution");

  std::vector<double> mask(len * len, 0.0), keep(len * len, 0.0), fallback(len * len, 0.0);
  const auto sl = scope_log.data();
  bool trivial_keep = true;
  for (std::size_t i = 0; i < len; ++i) {
    std::size_t candidates = 0;
    double best = -INFINITY;
    for (std::size_t j = 0; j < len; ++j) {
      const bool ok = j != i && is_valid(valid, j);
      if (!ok) mask[i * len + j] = kMaskedLogit;
      if (ok) {
        ++candidates;
        best = std::max(best, sl[i * len + j]);
      }
    }
    const bool row_real = is_valid(valid, i) && candidates > 0;
    // Zero linear-domain scope mass everywhere: uniform over candidates.
    const bool underflow = row_real && std::exp(best) == 0.0;
    if (underflow) {
      if (fallback_rows) fallback_rows->push_back(i);
      for (std::size_t j = 0; j < len; ++j)
        if (j != i && is_valid(valid, j)) fallback[i * len + j] = 1.0 / static_cast<double>(candidates);
    }
    const double k = row_real && !underflow ? 1.0 : 0.0;
    if (k != 1.0) trivial_keep = false;
    for (std::size_t j = 0; j < len; ++j) keep[i * len + j] = k;
  }

  Tensor logits = add(add(scope_log, scale(reshape(heights, {1, len}), 1.0 / tau_height)),
                      Tensor::from_data({len, len}, std::move(mask)));
  Tensor dep = softmax(logits, 1);
  if (trivial_keep) return dep;
  return add(mul(dep, Tensor::from_data({len, len}, std::move(keep))), Tensor::from_data({len, len}, std::move(fallback)));
}

std::vector<Tensor> attention_gates(const Tensor& dep, const Tensor& relation_logits) {
  if (dep.rank() != 2 || dep.dim(0) != dep.dim(1)) throw DimensionError("attention_gates: dep must be square");
  if (relation_logits.rank() != 2 || relation_logits.dim(1) != 3) {
    throw DimensionError("attention_gates: relation logits must be [n_heads x 3], got " +
                         shape_str(relation_logits.shape()));
  }
  const Tensor dep_t = transpose(dep);
  std::vector<Tensor> gates;
  for (std::size_t head = 0; head < relation_logits.dim(0); ++head) {
    Tensor w = softmax(slice(relation_logits, 0, head, head + 1), 1);
    Tensor gate = add(add(mul(dep, slice(w, 1, kParent, kParent + 1)), mul(dep_t, slice(w, 1, kChild, kChild + 1))),
                      slice(w, 1, kResidual, kResidual + 1));
    gates.push_back(std::move(gate));
  }
  return gates;
}

ParserOutputs run_parser(const Tensor& reps, const ParserWeights& weights, const ParserConfig& cfg,
                         ValidMask valid) {
  ParserOutputs out;
  std::tie(out.distances, out.heights) = compute_distances_heights(reps, weights, cfg, valid);
  Tensor scope_log = scope_log_matrix(out.distances, out.heights, cfg.tau_scope);
  out.dep = dependency_distribution(scope_log, out.heights, cfg.tau_height, valid, &out.fallback_rows);
  {
    // The exported scope is diagnostic only and stays off the tape.
    NoGradGuard guard;
    Tensor s = exp(scope_log.detach());
    const std::size_t len = out.heights.numel();
    auto sd = s.mutable_data();
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j)
        if (!is_valid(valid, i) || !is_valid(valid, j)) sd[i * len + j] = 0.0;
    out.scope = s;
  }
  return out;
}

Edge make_edge(std::size_t i, std::size_t j) { return i < j ? Edge{i, j} : Edge{j, i}; }

std::vector<Edge> extract_hard_tree(const Tensor& dep, ValidMask valid) {
  if (dep.rank() != 2 || dep.dim(0) != dep.dim(1)) throw DimensionError("extract_hard_tree: dep must be square");
  const std::size_t len = dep.dim(0);
  check_mask(valid, len, "extract_hard_tree");
  std::vector<Edge> edges;
  if (len < 2) return edges;
  const auto d = dep.data();
  for (std::size_t i = 0; i < len; ++i) {
    if (!is_valid(valid, i)) continue;
    std::size_t best = len;
    for (std::size_t j = 0; j < len; ++j) {
      if (j == i || !is_valid(valid, j)) continue;
      if (best == len) {
        best = j;
        continue;
      }
      const double v = d[i * len + j], bv = d[i * len + best];
      const std::size_t dist = j > i ? j - i : i - j;
      const std::size_t best_dist = best > i ? best - i : i - best;
      if (v > bv || (v == bv && (dist < best_dist || (dist == best_dist && j < best)))) best = j;
    }
    if (best != len) edges.push_back(make_edge(i, best));
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

std::vector<Edge> extract_hard_tree(const ParserOutputs& outputs, ValidMask valid) {
  return extract_hard_tree(outputs.dep, valid);
}

void write_parse_dump(std::ostream& out, const std::vector<std::string>& tokens, const ParserOutputs& outputs,
                      const std::vector<Edge>& edges) {
  out << "tokens";
  for (const auto& t : tokens) out << '\t' << t;
  out << "\nd";
  const auto old_precision = out.precision(9);
  for (double v : outputs.distances.data()) out << '\t' << v;
  out << "\nh";
  for (double v : outputs.heights.data()) out << '\t' << v;
  out << "\nedges";
  for (const auto& e : edges) out << '\t' << e.a << '-' << e.b;
  out << "\n\n";
  out.precision(old_precision);
}

}  // namespace structlm
