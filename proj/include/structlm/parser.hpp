#pragma once

// Convolutional parser network: token representations -> syntactic distances
// and heights -> soft dependency scopes -> parent distributions -> per-head
// attention gates.
//
// Conventions for a sentence of length L:
//   d[k], k < L-1   distance at the boundary between tokens k and k+1
//   h[i]            height of token i
//   scope[i][j]     probability that j lies inside i's dependency scope
//   dep[i][j]       probability that j is i's parent

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "structlm/parameters.hpp"
#include "structlm/rng.hpp"
#include "structlm/tensor.hpp"

namespace structlm {

struct ParserConfig {
  std::size_t n_conv_layers = 4;
  std::size_t kernel_size = 9;
  std::size_t hidden_width = 768;
  double tau_scope = 1.0;
  double tau_height = 1.0;

  // Throws ConfigError naming the violated rule.
  void validate() const;
};

// Index of each gate component in the per-head relation logits.
enum Relation : std::size_t { kParent = 0, kChild = 1, kResidual = 2 };

struct ParserWeights {
  std::vector<Tensor> conv_weights;  // [hidden x k x in]
  std::vector<Tensor> conv_biases;   // [hidden]
  // Boundary features from the two adjacent tokens.
  Tensor distance_left;   // [hidden x hidden]
  Tensor distance_right;  // [hidden x hidden]
  Tensor distance_bias;   // [hidden]
  Tensor distance_out;    // [hidden x 1]
  Tensor distance_out_bias;  // [1]
  Tensor height_proj;     // [hidden x hidden]
  Tensor height_bias;     // [hidden]
  Tensor height_out;      // [hidden x 1]
  Tensor height_out_bias;    // [1]
  // [n_heads x 3] logits over (parent, child, residual).
  Tensor relation_logits;

  // Declaration order of every buffer; named() follows the same order.
  static std::vector<ParamSpec> specs(const ParserConfig& cfg, std::size_t d_model, std::size_t n_heads);
  // Adopts tensors given in specs() order.
  static ParserWeights bind(const ParserConfig& cfg, const std::vector<Tensor>& tensors);
  static ParserWeights init(const ParserConfig& cfg, std::size_t d_model, std::size_t n_heads, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named() const;
};

// Token validity mask: 1 for real tokens, 0 for padding. Empty means all real.
using ValidMask = std::span<const std::uint8_t>;

struct ParserOutputs {
  Tensor distances;  // [L-1]
  Tensor heights;    // [L]
  Tensor scope;      // [L x L]
  Tensor dep;        // [L x L]
  // Rows whose scope mass underflowed to zero and fell back to uniform.
  std::vector<std::size_t> fallback_rows;

  std::size_t length() const { return heights.numel(); }
};

// Convolution stack (conv -> layer norm -> tanh, n_conv_layers times), then
// the height head per token and the distance head per adjacent pair.
std::pair<Tensor, Tensor> compute_distances_heights(const Tensor& reps, const ParserWeights& weights,
                                                    const ParserConfig& cfg, ValidMask valid = {});

// log scope[i][j]: sum over the boundaries k between i and j of
// log(1 - sigmoid((d[k] - h[i]) / tau)). Zero on the diagonal.
Tensor scope_log_matrix(const Tensor& distances, const Tensor& heights, double tau_scope);

// exp(scope_log) with padded rows and columns zeroed.
Tensor scope_matrix(const Tensor& distances, const Tensor& heights, double tau_scope, ValidMask valid = {});

// dep[i][j] proportional to scope[i][j] * exp(h[j] / tau_height) over non-pad
// j != i. Takes log-scope so that hard limits stay finite.
Tensor dependency_distribution(const Tensor& scope_log, const Tensor& heights, double tau_height,
                               ValidMask valid = {}, std::vector<std::size_t>* fallback_rows = nullptr);

// One [L x L] gate per head: w_parent * dep + w_child * dep^T + w_residual,
// with the weights a softmax of the head's relation logits.
std::vector<Tensor> attention_gates(const Tensor& dep, const Tensor& relation_logits);

// Full pipeline from representations to outputs.
ParserOutputs run_parser(const Tensor& reps, const ParserWeights& weights, const ParserConfig& cfg,
                         ValidMask valid = {});

struct Edge {
  std::size_t a = 0;  // a < b
  std::size_t b = 0;
  auto operator<=>(const Edge&) const = default;
};

Edge make_edge(std::size_t i, std::size_t j);

// Undirected edges {i, argmax_j dep[i][j]} over real tokens, deduplicated and
// sorted. Ties go to the nearer token, then the left one.
std::vector<Edge> extract_hard_tree(const Tensor& dep, ValidMask valid = {});
std::vector<Edge> extract_hard_tree(const ParserOutputs& outputs, ValidMask valid = {});

// Line-oriented dump for one sentence:
//   tokens\t<t0>\t<t1>...
//   d\t<d0>...
//   h\t<h0>...
//   edges\t<a>-<b>...
// followed by a blank line.
void write_parse_dump(std::ostream& out, const std::vector<std::string>& tokens, const ParserOutputs& outputs,
                      const std::vector<Edge>& edges);

}  // namespace structlm
