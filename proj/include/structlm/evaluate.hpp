#pragma once

// Zero-shot evaluation: pseudo-log-likelihood and corpus pseudo-perplexity,
// minimal-pair accuracy, undirected attachment score and delta tables.

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "structlm/bpe.hpp"
#include "structlm/model.hpp"
#include "structlm/parser.hpp"
#include "structlm/tensor.hpp"

namespace structlm {

class MaskedLanguageModel {
 public:
  virtual ~MaskedLanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t max_seq_len() const = 0;
  // [L x vocab_size] logits. Called concurrently from worker threads.
  virtual Tensor logits(std::span<const TokenId> ids) const = 0;
};

// Eval-mode forward of an encoder model, with recording disabled.
class EncoderMlm final : public MaskedLanguageModel {
 public:
  explicit EncoderMlm(const Model& model) : model_(model) {}
  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  std::size_t max_seq_len() const override { return model_.config().max_seq_len; }
  Tensor logits(std::span<const TokenId> ids) const override;

 private:
  const Model& model_;
};

struct EvalOptions {
  std::size_t threads = 0;  // 0: hardware concurrency
};

// [BOS] tokens [EOS]; throws DataError when the text has no tokens or the
// sequence exceeds the model's max_seq_len.
std::vector<TokenId> scoring_sequence(const TokenizerModel& tokenizer, const std::string& sentence,
                                      std::size_t max_seq_len);

// Sum over content positions t of log P(x_t | x with position t masked).
double pseudo_log_likelihood(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                             const std::string& sentence, const EvalOptions& options = {});

struct SentenceScore {
  double pll = 0.0;
  std::size_t tokens = 0;  // masked predictions
};

// Scores every sentence; all masked positions of all sentences are spread over
// the workers and summed in a fixed order.
std::vector<SentenceScore> score_sentences(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                                           const std::vector<std::string>& sentences,
                                           const EvalOptions& options = {});

struct PpplResult {
  double pppl = 0.0;
  double total_pll = 0.0;
  std::size_t tokens = 0;
  std::size_t sentences = 0;  // retained after trimming
};

// Indices of the sentences kept after dropping the trim_longest longest by
// token count (earlier sentences go first among equal lengths).
std::vector<std::size_t> retained_after_trim(const std::vector<std::size_t>& token_counts, std::size_t trim_longest);

// exp(-sum PLL / sum tokens) over retained sentences. Throws DataError when
// nothing remains.
PpplResult corpus_pppl(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                       const std::vector<std::string>& sentences, std::size_t trim_longest = 100,
                       const EvalOptions& options = {});

struct MinimalPair {
  std::string phenomenon;
  std::string good;
  std::string bad;
};

// JSON lines with fields phenomenon, sentence_good, sentence_bad.
std::vector<MinimalPair> read_minimal_pairs(std::istream& in, const std::string& source = "<pairs>");

struct EvalReport {
  std::string model;
  std::string task;
  std::string metric;  // pppl | accuracy | uas_undirected
  double value = 0.0;
  std::size_t n_items = 0;
};

struct PairsResult {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::vector<double> credit;  // per pair: 1, 0.5 or 0
  std::map<std::string, std::pair<double, std::size_t>> by_phenomenon;  // accuracy, count

  // One row per phenomenon plus "overall".
  std::vector<EvalReport> reports(const std::string& model_id) const;
};

// A pair earns 1 when PLL(good) > PLL(bad), 0.5 on a tie, else 0.
PairsResult minimal_pairs_accuracy(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                                   const std::vector<MinimalPair>& pairs, const EvalOptions& options = {});

// |predicted ∩ gold| / |gold| over unordered pairs. Throws DataError on empty
// gold or, when n_tokens is given, an edge index outside the sentence.
double uas_undirected(const std::vector<Edge>& predicted, const std::vector<Edge>& gold,
                      std::optional<std::size_t> n_tokens = std::nullopt);

struct GoldTree {
  std::vector<std::string> words;
  std::vector<Edge> edges;
};

// Blocks separated by blank lines: one word per line, then `edge i j` lines.
std::vector<GoldTree> read_gold_trees(std::istream& in, const std::string& source = "<trees>");

struct InducedTree {
  std::vector<std::string> words;
  Tensor dep;  // word-level [n x n]
  std::vector<Edge> edges;
  ParserOutputs subword;  // raw parser outputs over [BOS] subwords [EOS]
  std::vector<std::size_t> word_of;  // subword position -> word index
};

// Runs the parser of an s1/s2 model over the words joined by spaces. Word
// scores average the subword rows of the source word and sum the subword
// columns of the target word. Throws ConfigError for the vanilla variant.
InducedTree induce_tree(const Model& model, const TokenizerModel& tokenizer, const std::vector<std::string>& words);

struct DeltaRow {
  std::string task;
  std::string metric;
  std::map<std::string, double> values;  // by model
  std::map<std::string, double> deltas;  // value - baseline, for non-baseline models
  bool incomplete = false;               // some model (or the baseline) lacks this task
};

struct DeltaTable {
  std::string baseline;
  std::vector<std::string> models;  // baseline first
  std::vector<DeltaRow> rows;       // task order of first appearance, then "average"

  void write_tsv(std::ostream& out) const;
};

// Throws ConfigError when no report names the baseline model.
DeltaTable delta_report(const std::vector<EvalReport>& reports, const std::string& baseline);

void write_reports_tsv(std::ostream& out, const std::vector<EvalReport>& reports);

}  // namespace structlm
