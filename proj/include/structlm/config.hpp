#pragma once

// Flat key-value configuration with dotted section keys:
//
//   # comment
//   model.variant = s2
//   train.batch_size = 96
//
// Later assignments and overrides replace earlier ones. Getters record which
// keys were read so that typos can be reported.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "structlm/model.hpp"
#include "structlm/pretrain.hpp"

namespace structlm {

class KeyValueConfig {
 public:
  // Throws ConfigError with source:line on malformed lines.
  static KeyValueConfig parse(std::istream& in, const std::string& source = "<config>");
  static KeyValueConfig load_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  // "key=value"
  void apply_override(const std::string& assignment);
  void merge(const KeyValueConfig& other);
  bool has(const std::string& key) const;

  // Typed getters throw ConfigError naming the key when the value does not parse.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  std::vector<std::string> unused_keys() const;
  const std::map<std::string, std::string>& values() const { return values_; }
  void write(std::ostream& out) const;

 private:
  const std::string* lookup(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

std::string format_double(double v);

// model.* and parser.* keys. The parser section is read only for s1/s2.
ModelConfig read_model_config(const KeyValueConfig& kv, const ModelConfig& defaults = {});
void write_model_config(const ModelConfig& cfg, KeyValueConfig& kv);

// train.* keys. The seed lives in the top-level `seed` key, read by the caller.
TrainConfig read_train_config(const KeyValueConfig& kv, const TrainConfig& defaults = {});
void write_train_config(const TrainConfig& cfg, KeyValueConfig& kv);

}  // namespace structlm
