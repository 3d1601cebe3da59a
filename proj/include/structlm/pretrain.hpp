#pragma once

// Masked-language-model pretraining: deterministic masking and batching,
// linear learning-rate schedule, AdamW updates, checkpoints and metrics.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "structlm/bpe.hpp"
#include "structlm/model.hpp"
#include "structlm/optim.hpp"

namespace structlm {

inline constexpr TokenId kIgnoreIndex = -100;

struct TrainConfig {
  std::size_t batch_size = 96;
  std::size_t seq_len = 128;
  double lr_peak = 1e-4;
  std::size_t warmup_steps = 0;
  double weight_decay = 0.1;
  std::size_t max_steps = 62000;
  double mask_prob = 0.15;
  // Split of the selected positions; the remainder stays intact.
  double mask_token_frac = 0.8;
  double random_token_frac = 0.1;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 1000;  // 0: final checkpoint only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // "concat": documents joined and cut into seq_len windows.
  // "sentence": one line per sequence, truncated to seq_len.
  std::string packing = "concat";

  void validate() const;
  AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }
};

// Linear warmup to lr_peak, then linear decay to 0 at max_steps. Clamps to 0
// past max_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct Batch {
  std::vector<std::vector<TokenId>> ids;       // equal lengths
  std::vector<std::vector<std::uint8_t>> valid;  // 0 at padding

  std::size_t size() const { return ids.size(); }
};

struct MaskedBatch {
  std::vector<std::vector<TokenId>> input_ids;
  std::vector<std::vector<TokenId>> labels;  // kIgnoreIndex where unselected
  std::vector<std::vector<std::uint8_t>> valid;

  std::size_t n_labels() const;
};

struct MaskingConfig {
  double mask_prob = 0.15;
  double mask_token_frac = 0.8;
  double random_token_frac = 0.1;
};

// Selects each real, non-special position independently with mask_prob and
// corrupts it 80/10/10 (mask id / random non-special id / unchanged).
MaskedBatch mask_batch(const Batch& batch, const MaskingConfig& cfg, const SpecialTokens& specials,
                       std::size_t vocab_size, std::uint64_t seed);

// Tokenized training sequences with a seed-determined order.
class TrainingData {
 public:
  static TrainingData build(const std::vector<std::string>& documents, const TokenizerModel& tokenizer,
                            const TrainConfig& cfg);
  static TrainingData from_sequences(std::vector<std::vector<TokenId>> sequences, TokenId pad);

  std::size_t size() const { return sequences_.size(); }
  const std::vector<std::vector<TokenId>>& sequences() const { return sequences_; }
  std::size_t token_count() const;

  // Batch for a step: positions step*B .. step*B+B-1 of an endless stream that
  // visits every sequence once per epoch in a per-epoch shuffled order.
  Batch batch(std::size_t step, std::size_t batch_size, std::uint64_t seed) const;

 private:
  std::vector<std::vector<TokenId>> sequences_;
  TokenId pad_ = 0;
};

struct StepResult {
  double loss = 0.0;
  std::size_t labels = 0;
  std::size_t tokens = 0;
};

// Mean cross-entropy over labeled positions, one AdamW update. A batch with
// no labels returns loss 0 and leaves parameters and optimizer untouched.
// Throws NumericError on a non-finite loss or gradient.
StepResult train_step(Model& model, const MaskedBatch& batch, AdamState& state, const TrainConfig& cfg,
                      std::size_t step);

struct LoopOptions {
  std::string metrics_path;    // empty: no log
  std::string checkpoint_dir;  // empty: no checkpoints
  std::size_t start_step = 0;  // steps already completed
  std::function<void(std::size_t step, const StepResult&)> on_step;
};

struct LoopResult {
  std::size_t steps_run = 0;
  std::vector<double> losses;
  std::string final_checkpoint;
};

// Runs steps start_step .. max_steps-1. Throws DataError when the data holds
// fewer sequences than one batch.
LoopResult train_loop(Model& model, AdamState& state, const TrainingData& data, const SpecialTokens& specials,
                      const TrainConfig& cfg, const LoopOptions& options = {});

}  // namespace structlm
