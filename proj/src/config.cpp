#include "structlm/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

#include "structlm/errors.hpp"

namespace structlm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError(key + ": expected " + what + ", got '" + value + "'");
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "a non-negative integer");
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::istream& in, const std::string& source) {
  KeyValueConfig kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    kv.set(key, trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse(in, path);
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { values_[key] = value; }

void KeyValueConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
    throw ConfigError("override must look like key=value, got '" + assignment + "'");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void KeyValueConfig::merge(const KeyValueConfig& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string* KeyValueConfig::lookup(const std::string& key) const {
  used_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? nullptr : &it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto* v = lookup(key);
  return v ? *v : fallback;
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) const {
  const auto* v = lookup(key);
  return v ? parse_integer<std::size_t>(key, *v) : fallback;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto* v = lookup(key);
  return v ? parse_integer<std::uint64_t>(key, *v) : fallback;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double out = std::stod(*v, &used);
    if (used != v->size()) bad_value(key, *v, "a number");
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, *v, "a number");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  bad_value(key, *v, "true or false");
}

std::vector<std::string> KeyValueConfig::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

void KeyValueConfig::write(std::ostream& out) const {
  for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ModelConfig read_model_config(const KeyValueConfig& kv, const ModelConfig& defaults) {
  ModelConfig c = defaults;
  c.variant = parse_variant(kv.get_string("model.variant", to_string(defaults.variant)));
  c.n_layers = kv.get_size("model.n_layers", c.n_layers);
  c.n_front = kv.get_size("model.n_front", c.n_front);
  c.n_heads = kv.get_size("model.n_heads", c.n_heads);
  c.d_model = kv.get_size("model.d_model", c.d_model);
  c.d_ffn = kv.get_size("model.d_ffn", c.d_ffn);
  c.dropout = kv.get_double("model.dropout", c.dropout);
  c.max_seq_len = kv.get_size("model.max_seq_len", c.max_seq_len);
  c.vocab_size = kv.get_size("model.vocab_size", c.vocab_size);
  c.embed_norm_dropout = kv.get_bool("model.embed_norm_dropout", c.embed_norm_dropout);
  c.tie_output = kv.get_bool("model.tie_output", c.tie_output);
  if (c.variant == Variant::kVanilla) {
    c.parser.reset();
  } else {
    ParserConfig p = defaults.parser.value_or(ParserConfig{});
    if (!defaults.parser) p.hidden_width = c.d_model;
    p.n_conv_layers = kv.get_size("parser.n_conv_layers", p.n_conv_layers);
    p.kernel_size = kv.get_size("parser.kernel_size", p.kernel_size);
    p.hidden_width = kv.get_size("parser.hidden_width", p.hidden_width);
    p.tau_scope = kv.get_double("parser.tau_scope", p.tau_scope);
    p.tau_height = kv.get_double("parser.tau_height", p.tau_height);
    c.parser = p;
  }
  return c;
}

void write_model_config(const ModelConfig& c, KeyValueConfig& kv) {
  kv.set("model.variant", to_string(c.variant));
  kv.set("model.n_layers", std::to_string(c.n_layers));
  kv.set("model.n_front", std::to_string(c.n_front));
  kv.set("model.n_heads", std::to_string(c.n_heads));
  kv.set("model.d_model", std::to_string(c.d_model));
  kv.set("model.d_ffn", std::to_string(c.d_ffn));
  kv.set("model.dropout", format_double(c.dropout));
  kv.set("model.max_seq_len", std::to_string(c.max_seq_len));
  kv.set("model.vocab_size", std::to_string(c.vocab_size));
  kv.set("model.embed_norm_dropout", c.embed_norm_dropout ? "true" : "false");
  kv.set("model.tie_output", c.tie_output ? "true" : "false");
  if (c.parser) {
    kv.set("parser.n_conv_layers", std::to_string(c.parser->n_conv_layers));
    kv.set("parser.kernel_size", std::to_string(c.parser->kernel_size));
    kv.set("parser.hidden_width", std::to_string(c.parser->hidden_width));
    kv.set("parser.tau_scope", format_double(c.parser->tau_scope));
    kv.set("parser.tau_height", format_double(c.parser->tau_height));
  }
}

TrainConfig read_train_config(const KeyValueConfig& kv, const TrainConfig& d) {
  TrainConfig c = d;
  c.batch_size = kv.get_size("train.batch_size", c.batch_size);
  c.seq_len = kv.get_size("train.seq_len", c.seq_len);
  c.lr_peak = kv.get_double("train.lr_peak", c.lr_peak);
  c.warmup_steps = kv.get_size("train.warmup_steps", c.warmup_steps);
  c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
  c.max_steps = kv.get_size("train.max_steps", c.max_steps);
  c.mask_prob = kv.get_double("train.mask_prob", c.mask_prob);
  c.mask_token_frac = kv.get_double("train.mask_token_frac", c.mask_token_frac);
  c.random_token_frac = kv.get_double("train.random_token_frac", c.random_token_frac);
  c.checkpoint_every = kv.get_size("train.checkpoint_every", c.checkpoint_every);
  c.beta1 = kv.get_double("train.beta1", c.beta1);
  c.beta2 = kv.get_double("train.beta2", c.beta2);
  c.eps = kv.get_double("train.eps", c.eps);
  c.packing = kv.get_string("train.packing", c.packing);
  return c;
}

void write_train_config(const TrainConfig& c, KeyValueConfig& kv) {
  kv.set("train.batch_size", std::to_string(c.batch_size));
  kv.set("train.seq_len", std::to_string(c.seq_len));
  kv.set("train.lr_peak", format_double(c.lr_peak));
  kv.set("train.warmup_steps", std::to_string(c.warmup_steps));
  kv.set("train.weight_decay", format_double(c.weight_decay));
  kv.set("train.max_steps", std::to_string(c.max_steps));
  kv.set("train.mask_prob", format_double(c.mask_prob));
  kv.set("train.mask_token_frac", format_double(c.mask_token_frac));
  kv.set("train.random_token_frac", format_double(c.random_token_frac));
  kv.set("train.checkpoint_every", std::to_string(c.checkpoint_every));
  kv.set("train.beta1", format_double(c.beta1));
  kv.set("train.beta2", format_double(c.beta2));
  kv.set("train.eps", format_double(c.eps));
  kv.set("train.packing", c.packing);
}

}  // namespace structlm
