#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "structlm/config.hpp"
#include "structlm/model.hpp"
#include "structlm/pretrain.hpp"

namespace structlm::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericFailure = 3 };

// Environment variable naming a config file loaded before --config/--set.
inline constexpr const char* kConfigEnv = "STRUCTLM_CONFIG";

struct ExperimentConfig {
  std::string train_corpus;  // paths.train
  std::string dev_corpus;    // paths.dev
  std::string test_corpus;   // paths.test
  std::string tokenizer;     // paths.tokenizer
  std::string checkpoints;   // paths.checkpoints (directory written by pretrain)
  std::string checkpoint;    // paths.checkpoint (file read by eval commands)
  std::string metrics;       // paths.metrics (default <checkpoints>/metrics.jsonl)
  std::string reports;       // paths.reports (default: stdout)
  std::uint64_t seed = 1;
  ModelConfig model;
  bool vocab_from_tokenizer = true;  // model.vocab_size not given
  TrainConfig train;
  std::size_t trim_longest = 100;
  std::size_t threads = 0;
  std::string model_id;

  // Rejects unknown keys (ConfigError naming them) and revalidates the model
  // and training invariants.
  static ExperimentConfig from(const KeyValueConfig& kv);
  KeyValueConfig resolved() const;
};

// Every key the experiment config understands.
std::vector<std::string> known_keys();

// Entry point shared by the binary and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace structlm::cli
