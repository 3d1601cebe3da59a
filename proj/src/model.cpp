#include "structlm/model.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include "structlm/errors.hpp"

namespace structlm {

namespace {

constexpr double kMaskedLogit = -1e300;
// Keeps the renormalization finite when a gate zeroes a whole row.
constexpr double kGateEps = 1e-30;

std::string group_of(const std::string& name) {
  const auto first = name.find('.');
  if (first == std::string::npos) return name;
  const auto second = name.find('.', first + 1);
  return second == std::string::npos ? name : name.substr(0, second);
}

ParameterReport report_from(const std::vector<std::pair<ParamSpec, std::size_t>>& entries) {
  ParameterReport r;
  for (const char* sub : {"embeddings", "encoder", "parser", "output"}) r.submodules.push_back({sub, 0});
  for (const auto& [spec, count] : entries) {
    for (auto& row : r.submodules)
      if (row.name == spec.submodule) row.count += count;
    const std::string g = group_of(spec.name);
    if (r.groups.empty() || r.groups.back().name != g) r.groups.push_back({g, 0});
    r.groups.back().count += count;
    r.total += count;
  }
  return r;
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kVanilla: return "vanilla";
    case Variant::kS1: return "s1";
    case Variant::kS2: return "s2";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "vanilla") return Variant::kVanilla;
  if (s == "s1") return Variant::kS1;
  if (s == "s2") return Variant::kS2;
  throw ConfigError("model.variant must be one of vanilla, s1, s2 (got '" + s + "')");
}

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (variant == Variant::kS2 && !(n_front >= 1 && n_front < n_layers))
    bad.push_back("s2 requires 1 <= n_front < n_layers");
  if (variant == Variant::kVanilla && parser) bad.push_back("vanilla requires the parser to be absent");
  if (variant != Variant::kVanilla && !parser) bad.push_back(to_string(variant) + " requires a parser");
  if (variant == Variant::kS1 && n_layers < 1) bad.push_back("s1 requires at least one layer to gate");
  if (n_heads < 1) bad.push_back("n_heads must be positive");
  else if (d_model % n_heads != 0) bad.push_back("d_model must be divisible by n_heads");
  if (d_model < 1) bad.push_back("d_model must be positive");
  if (d_ffn < 1) bad.push_back("d_ffn must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad.push_back("dropout must lie in [0, 1)");
  if (max_seq_len < 1) bad.push_back("max_seq_len must be positive");
  if (vocab_size < 1) bad.push_back("vocab_size must be positive");
  if (parser) {
    try {
      parser->validate();
    } catch (const ConfigError& e) {
      bad.push_back(e.what());
    }
  }
  if (bad.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ConfigError(msg);
}

std::size_t ModelConfig::n_gated_layers() const {
  switch (variant) {
    case Variant::kVanilla: return 0;
    case Variant::kS1: return n_layers;
    case Variant::kS2: return n_layers - n_front;
  }
  return 0;
}

ModelConfig reference_config(Variant variant, bool roberta_flavor, std::size_t conv_layers) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.embed_norm_dropout = roberta_flavor;
  if (variant != Variant::kVanilla) {
    ParserConfig p;
    p.n_conv_layers = conv_layers;
    p.hidden_width = cfg.d_model;
    cfg.parser = p;
  }
  return cfg;
}

std::size_t ParameterReport::submodule(const std::string& name) const {
  for (const auto& row : submodules)
    if (row.name == name) return row.count;
  return 0;
}

void ParameterReport::write_tsv(std::ostream& out) const {
  out << "level\tname\tcount\n";
  for (const auto& row : submodules) out << "submodule\t" << row.name << '\t' << row.count << '\n';
  for (const auto& row : groups) out << "group\t" << row.name << '\t' << row.count << '\n';
  out << "total\t-\t" << total << '\n';
}

std::vector<ParamSpec> model_parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  std::vector<ParamSpec> out;
  auto add = [&](std::string name, std::string sub, Shape shape, Init init, bool decay) {
    out.push_back({std::move(name), std::move(sub), std::move(shape), init, decay});
  };
  add("embeddings.token", "embeddings", {cfg.vocab_size, d}, Init::kNormal, true);
  add("embeddings.position", "embeddings", {cfg.max_seq_len, d}, Init::kNormal, true);
  if (cfg.embed_norm_dropout) {
    add("embeddings.norm.gain", "embeddings", {d}, Init::kOnes, false);
    add("embeddings.norm.bias", "embeddings", {d}, Init::kZeros, false);
  }
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i) + ".";
    add(p + "norm1.gain", "encoder", {d}, Init::kOnes, false);
    add(p + "norm1.bias", "encoder", {d}, Init::kZeros, false);
    for (const char* m : {"query", "key", "value", "out"}) {
      add(p + "attn." + m + ".weight", "encoder", {d, d}, Init::kNormal, true);
      add(p + "attn." + m + ".bias", "encoder", {d}, Init::kZeros, false);
    }
    add(p + "norm2.gain", "encoder", {d}, Init::kOnes, false);
    add(p + "norm2.bias", "encoder", {d}, Init::kZeros, false);
    add(p + "ffn.in.weight", "encoder", {d, cfg.d_ffn}, Init::kNormal, true);
    add(p + "ffn.in.bias", "encoder", {cfg.d_ffn}, Init::kZeros, false);
    add(p + "ffn.out.weight", "encoder", {cfg.d_ffn, d}, Init::kNormal, true);
    add(p + "ffn.out.bias", "encoder", {d}, Init::kZeros, false);
  }
  if (!cfg.embed_norm_dropout && cfg.n_layers > 0) {
    add("encoder.final_norm.gain", "encoder", {d}, Init::kOnes, false);
    add("encoder.final_norm.bias", "encoder", {d}, Init::kZeros, false);
  }
  if (cfg.parser) {
    for (auto spec : ParserWeights::specs(*cfg.parser, d, cfg.n_heads)) {
      spec.name = "parser." + spec.name;
      out.push_back(std::move(spec));
    }
  }
  if (!cfg.tie_output) add("output.weight", "output", {cfg.vocab_size, d}, Init::kNormal, true);
  return out;
}

ParameterReport count_parameters(const ModelConfig& cfg) {
  std::vector<std::pair<ParamSpec, std::size_t>> entries;
  for (auto& spec : model_parameter_specs(cfg)) {
    const std::size_t n = shape_numel(spec.shape);
    entries.emplace_back(std::move(spec), n);
  }
  return report_from(entries);
}

ParameterReport count_parameters(const Model& model) {
  std::vector<std::pair<ParamSpec, std::size_t>> entries;
  for (const auto& p : model.parameters()) {
    if (!p.tensor.requires_grad()) continue;
    entries.emplace_back(ParamSpec{p.name, p.submodule, p.tensor.shape(), Init::kZeros, p.decay}, p.tensor.numel());
  }
  return report_from(entries);
}

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  const auto specs = model_parameter_specs(cfg);
  Model m;
  m.cfg_ = cfg;
  m.seed_ = seed;
  Rng rng(derive_seed(seed, "init"));
  std::map<std::string, Tensor> by_name;
  std::vector<Tensor> parser_tensors;
  for (const auto& spec : specs) {
    Tensor t = materialize(spec, rng);
    m.params_.push_back({spec.name, spec.submodule, t, spec.decay});
    by_name[spec.name] = t;
    if (spec.submodule == "parser") parser_tensors.push_back(t);
  }
  auto get = [&](const std::string& n) {
    auto it = by_name.find(n);
    return it == by_name.end() ? Tensor() : it->second;
  };
  m.token_embedding = get("embeddings.token");
  m.position_embedding = get("embeddings.position");
  m.embed_norm_gain = get("embeddings.norm.gain");
  m.embed_norm_bias = get("embeddings.norm.bias");
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i) + ".";
    Layer l;
    l.norm1_gain = get(p + "norm1.gain");
    l.norm1_bias = get(p + "norm1.bias");
    l.wq = get(p + "attn.query.weight");
    l.bq = get(p + "attn.query.bias");
    l.wk = get(p + "attn.key.weight");
    l.bk = get(p + "attn.key.bias");
    l.wv = get(p + "attn.value.weight");
    l.bv = get(p + "attn.value.bias");
    l.wo = get(p + "attn.out.weight");
    l.bo = get(p + "attn.out.bias");
    l.norm2_gain = get(p + "norm2.gain");
    l.norm2_bias = get(p + "norm2.bias");
    l.w_in = get(p + "ffn.in.weight");
    l.b_in = get(p + "ffn.in.bias");
    l.w_out = get(p + "ffn.out.weight");
    l.b_out = get(p + "ffn.out.bias");
    m.layers_.push_back(std::move(l));
  }
  m.final_norm_gain = get("encoder.final_norm.gain");
  m.final_norm_bias = get("encoder.final_norm.bias");
  if (cfg.parser) m.parser_ = ParserWeights::bind(*cfg.parser, parser_tensors);
  m.output_weight = cfg.tie_output ? m.token_embedding : get("output.weight");
  return m;
}

Tensor Model::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ConfigError("no parameter named '" + name + "'");
}

void Model::fix_residual_gate() {
  if (!has_parser()) throw ConfigError("fix_residual_gate: model has no parser");
  auto v = parser_.relation_logits.mutable_data();
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); i += 3) {
    v[i + kParent] = -inf;
    v[i + kChild] = -inf;
    v[i + kResidual] = 0.0;
  }
}

void Model::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

struct ForwardPass {
  const Model& m;
  const ModelConfig& cfg;
  const ForwardOptions& opt;
  Tensor key_mask;  // [L], 0 or masked
  Rng rng;
  bool train;
  ForwardResult* result;

  Tensor drop(const Tensor& x) { return dropout(x, cfg.dropout, rng, train); }

  Tensor attention(const Model::Layer& l, const Tensor& x, const std::vector<Tensor>* gates) {
    const std::size_t dk = cfg.d_model / cfg.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor q = add(matmul(x, l.wq), l.bq);
    Tensor k = add(matmul(x, l.wk), l.bk);
    Tensor v = add(matmul(x, l.wv), l.bv);
    std::vector<Tensor> heads;
    std::vector<Tensor> kept;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      Tensor qh = slice(q, 1, h * dk, (h + 1) * dk);
      Tensor kh = slice(k, 1, h * dk, (h + 1) * dk);
      Tensor vh = slice(v, 1, h * dk, (h + 1) * dk);
      Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), key_mask);
      Tensor p = softmax(scores, 1);
      if (gates) {
        Tensor g = mul(p, (*gates)[h]);
        p = div(g, add_scalar(sum_axis(g, 1, true), kGateEps));
      }
      if (opt.keep_attention) kept.push_back(p.detach());
      heads.push_back(matmul(drop(p), vh));
    }
    if (opt.keep_attention) result->attention.push_back(std::move(kept));
    Tensor merged = heads.size() == 1 ? heads[0] : concat(heads, 1);
    return add(matmul(merged, l.wo), l.bo);
  }

  Tensor ffn(const Model::Layer& l, const Tensor& x) {
    return add(matmul(gelu(add(matmul(x, l.w_in), l.b_in)), l.w_out), l.b_out);
  }

  Tensor layer(const Model::Layer& l, const Tensor& x, const std::vector<Tensor>* gates) {
    if (cfg.embed_norm_dropout) {
      Tensor h = layer_norm(add(x, drop(attention(l, x, gates))), l.norm1_gain, l.norm1_bias);
      return layer_norm(add(h, drop(ffn(l, h))), l.norm2_gain, l.norm2_bias);
    }
    Tensor h = add(x, drop(attention(l, layer_norm(x, l.norm1_gain, l.norm1_bias), gates)));
    return add(h, drop(ffn(l, layer_norm(h, l.norm2_gain, l.norm2_bias))));
  }
};

ForwardResult forward(const Model& model, std::span<const TokenId> ids, ValidMask valid,
                      const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  const std::size_t len = ids.size();
  if (len == 0) throw DataError("forward: empty input");
  if (len > cfg.max_seq_len) {
    throw DataError("forward: input of length " + std::to_string(len) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DataError("forward: token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(cfg.vocab_size));
    }
  }
  if (!valid.empty() && valid.size() != len) {
    throw DimensionError("forward: validity mask of length " + std::to_string(valid.size()) +
                         " for sequence of length " + std::to_string(len));
  }

  ForwardResult result;
  std::vector<double> mask(len, 0.0);
  for (std::size_t j = 0; j < len; ++j)
    if (!valid.empty() && valid[j] == 0) mask[j] = kMaskedLogit;
  ForwardPass pass{model, cfg, options, Tensor::from_data({len}, std::move(mask)),
                   Rng(derive_seed(options.dropout_seed, "dropout")), options.mode == Mode::kTrain, &result};

  std::vector<std::int64_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<std::int64_t>(i);
  Tensor x = add(embedding(model.token_embedding, ids), embedding(model.position_embedding, positions));
  if (cfg.embed_norm_dropout) x = pass.drop(layer_norm(x, model.embed_norm_gain, model.embed_norm_bias));
  if (options.keep_hidden) result.hidden_states.push_back(x.detach());

  const std::size_t first_gated = cfg.n_layers - cfg.n_gated_layers();
  std::vector<Tensor> gates;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    if (model.has_parser() && i == first_gated) {
      result.parser_input = x.detach();
      result.parser_outputs = run_parser(x, model.parser_, *cfg.parser, valid);
      if (!options.detach_parser) gates = attention_gates(result.parser_outputs->dep, model.parser_.relation_logits);
    }
    x = pass.layer(model.layers_[i], x, gates.empty() ? nullptr : &gates);
    if (options.keep_hidden) result.hidden_states.push_back(x.detach());
  }
  if (model.final_norm_gain.defined()) x = layer_norm(x, model.final_norm_gain, model.final_norm_bias);
  result.logits = matmul(x, transpose(model.output_weight));
  return result;
}

}  // namespace structlm
