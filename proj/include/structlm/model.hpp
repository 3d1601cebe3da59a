#pragma once

// Masked-language-model encoder in three placements of the parser network:
//
//   vanilla  embeddings -> N ungated layers -> output head
//   s1       embeddings -> parser -> N gated layers -> output head
//   s2       embeddings -> n_front ungated layers -> parser
//                       -> (N - n_front) gated layers -> output head
//
// Two layer flavors share one parameter inventory. The default is pre-norm
// (layer norm in front of each sublayer, final norm before the head). With
// embed_norm_dropout the embeddings are normalized and dropped out and each
// sublayer is followed by a residual add and layer norm.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "structlm/bpe.hpp"
#include "structlm/parameters.hpp"
#include "structlm/parser.hpp"
#include "structlm/tensor.hpp"

namespace structlm {

enum class Variant { kVanilla, kS1, kS2 };

std::string to_string(Variant v);
// Throws ConfigError naming model.variant on unknown strings.
Variant parse_variant(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::kVanilla;
  std::size_t n_layers = 12;
  std::size_t n_front = 4;  // s2 only
  std::size_t n_heads = 12;
  std::size_t d_model = 768;
  std::size_t d_ffn = 3072;
  double dropout = 0.1;
  std::size_t max_seq_len = 128;
  std::size_t vocab_size = 32000;
  std::optional<ParserConfig> parser;
  bool embed_norm_dropout = false;
  bool tie_output = true;

  // Throws ConfigError listing every violated rule.
  void validate() const;
  std::size_t n_gated_layers() const;
};

// Full-size reference configurations: 12 layers, 12 heads, width 768, FFN 3072,
// parser with kernel 9 and conv_layers convolutions.
ModelConfig reference_config(Variant variant, bool roberta_flavor = false, std::size_t conv_layers = 4);

struct ParameterReport {
  struct Row {
    std::string name;
    std::size_t count = 0;
  };
  std::vector<Row> submodules;  // embeddings, encoder, parser, output
  std::vector<Row> groups;      // finer: embeddings.token, encoder.layer3, parser.conv0, ...
  std::size_t total = 0;

  std::size_t submodule(const std::string& name) const;
  void write_tsv(std::ostream& out) const;
};

// Full parameter inventory in declaration order.
std::vector<ParamSpec> model_parameter_specs(const ModelConfig& cfg);
ParameterReport count_parameters(const ModelConfig& cfg);

enum class Mode { kTrain, kEval };

struct ForwardOptions {
  Mode mode = Mode::kEval;
  std::uint64_t dropout_seed = 0;
  // Runs the parser-bearing variants with every gate removed.
  bool detach_parser = false;
  bool keep_hidden = false;
  bool keep_attention = false;
};

struct ForwardResult {
  Tensor logits;  // [L x vocab_size]
  std::optional<ParserOutputs> parser_outputs;
  // Detached copies: embedding output, then the output of every layer.
  std::vector<Tensor> hidden_states;
  Tensor parser_input;
  // Detached mixing weights per layer and head, after gating.
  std::vector<std::vector<Tensor>> attention;
};

class Model;

// ids: one sequence; valid marks real tokens (empty = all real).
ForwardResult forward(const Model& model, std::span<const TokenId> ids, ValidMask valid = {},
                      const ForwardOptions& options = {});

class Model {
 public:
  // Materializes every parameter from the "init" stream of seed.
  static Model build(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  Tensor parameter(const std::string& name) const;
  bool has_parser() const { return cfg_.variant != Variant::kVanilla; }
  const ParserWeights& parser_weights() const { return parser_; }

  // Pins every head's gate to the residual component (weights 0, 0, 1).
  void fix_residual_gate();
  void zero_grad();

 private:
  struct Layer {
    Tensor norm1_gain, norm1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor norm2_gain, norm2_bias;
    Tensor w_in, b_in, w_out, b_out;
  };

  friend struct ForwardPass;
  friend ForwardResult forward(const Model&, std::span<const TokenId>, ValidMask, const ForwardOptions&);

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<NamedParameter> params_;
  Tensor token_embedding, position_embedding, embed_norm_gain, embed_norm_bias;
  std::vector<Layer> layers_;
  ParserWeights parser_;
  Tensor final_norm_gain, final_norm_bias, output_weight;
};

ParameterReport count_parameters(const Model& model);

}  // namespace structlm
