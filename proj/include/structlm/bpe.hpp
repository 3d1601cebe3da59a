#pragma once

// Byte-level byte-pair-encoding tokenizer.
//
// Text is pre-segmented into chunks of (leading whitespace run, following
// non-whitespace run); the leading whitespace acts as the word-boundary
// marker. Merges never cross chunk boundaries. Ids are laid out as
//   [0, 5)      special tokens <pad> <unk> <s> </s> <mask>
//   [5, 261)    the 256 single-byte tokens
//   [261, ...)  merged tokens, in order of first creation

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace structlm {

using TokenId = std::int64_t;

struct SpecialTokens {
  TokenId pad = 0;
  TokenId unk = 1;
  TokenId bos = 2;
  TokenId eos = 3;
  TokenId mask = 4;
};

class TokenizerModel {
 public:
  static constexpr std::size_t kNumSpecials = 5;
  static constexpr std::size_t kNumBytes = 256;
  static constexpr std::size_t kMinVocabSize = kNumSpecials + kNumBytes;

  // No merges: specials plus the byte alphabet.
  TokenizerModel();

  std::size_t vocab_size() const { return tokens_.size(); }
  const SpecialTokens& specials() const { return specials_; }
  bool is_special(TokenId id) const { return id >= 0 && id < static_cast<TokenId>(kNumSpecials); }
  // Raw bytes of a token; for specials, its display name.
  const std::string& token(TokenId id) const;
  // Looks up a non-special token by its bytes.
  std::optional<TokenId> find(std::string_view token) const;
  TokenId byte_token(unsigned char b) const { return static_cast<TokenId>(kNumSpecials + b); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  // Applies merges in training order within each chunk.
  std::vector<TokenId> encode(std::string_view text) const;
  // Throws DataError on ids outside the vocabulary. Specials are omitted.
  std::string decode(std::span<const TokenId> ids) const;

  void save(std::ostream& out) const;
  static TokenizerModel load(std::istream& in);
  void save_file(const std::string& path) const;
  static TokenizerModel load_file(const std::string& path);

  bool operator==(const TokenizerModel& other) const {
    return tokens_ == other.tokens_ && merges_ == other.merges_;
  }

 private:
  friend TokenizerModel train_bpe(std::string_view corpus, std::size_t vocab_size);

  TokenId add_merge(TokenId left, TokenId right);
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  static std::uint64_t pair_key(TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(l) << 32) | static_cast<std::uint64_t>(r);
  }

  SpecialTokens specials_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
  std::vector<TokenId> merge_result_;
  std::vector<std::string> warnings_;
};

// Greedy most-frequent-pair merging until vocab_size is reached or no pair
// occurs at least twice. Ties go to the lexicographically smallest
// (left bytes, right bytes) pair.
TokenizerModel train_bpe(std::string_view corpus, std::size_t vocab_size);

// Splits text into BPE chunks: leading whitespace run + non-whitespace run.
std::vector<std::string_view> pre_segment(std::string_view text);

// Printable escape used by the file format and reports: backslash, bytes
// outside 0x21..0x7e and the tab become \\, \xHH.
std::string escape_token(std::string_view raw);
std::string unescape_token(std::string_view escaped);

struct VocabRow {
  TokenId id = 0;
  std::string token;
  std::uint64_t frequency = 0;
};

// Frequencies count occurrences of each token in the tokenized corpus. Rows
// cover non-special tokens whose bytes all occur in the corpus, sorted
// ascending by frequency (then id); only the k least frequent are kept.
struct VocabReport {
  std::size_t vocab_size = 0;
  std::vector<VocabRow> rows;

  // Tokens sharing the minimum frequency, for the summary line.
  std::vector<std::string> least_frequent_tokens() const;
  std::optional<std::uint64_t> min_frequency() const;
  void write_tsv(std::ostream& out) const;
};

VocabReport analyze_vocab(const TokenizerModel& model, std::string_view corpus, std::size_t k);

}  // namespace structlm
