#include "structlm/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>
#include <unordered_set>

#include "structlm/errors.hpp"

namespace structlm {

namespace {

const char* const kSpecialNames[TokenizerModel::kNumSpecials] = {"<pad>", "<unk>", "<s>", "</s>", "<mask>"};

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

struct Word {
  std::vector<TokenId> symbols;
  std::int64_t count = 0;
};

struct HeapEntry {
  std::int64_t count;
  TokenId left;
  TokenId right;
};

}  // namespace

std::vector<std::string_view> pre_segment(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

std::string escape_token(std::string_view raw) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : raw) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c >= 0x21 && c <= 0x7e) {
      out += static_cast<char>(c);
    } else {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 0xf];
    }
  }
  return out;
}

std::string unescape_token(std::string_view escaped) {
  std::string out;
  for (std::size_t i = 0; i < escaped.size(); ++i) {
    if (escaped[i] != '\\') {
      out += escaped[i];
      continue;
    }
    if (i + 1 < escaped.size() && escaped[i + 1] == '\\') {
      out += '\\';
      ++i;
    } else if (i + 3 < escaped.size() && escaped[i + 1] == 'x') {
      out += static_cast<char>(std::stoi(std::string(escaped.substr(i + 2, 2)), nullptr, 16));
      i += 3;
    } else {
      throw DataError("malformed escape in token '" + std::string(escaped) + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------- model

TokenizerModel::TokenizerModel() {
  for (const char* name : kSpecialNames) tokens_.emplace_back(name);
  for (std::size_t b = 0; b < kNumBytes; ++b) {
    std::string s(1, static_cast<char>(b));
    index_.emplace(s, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(s));
  }
}

const std::string& TokenizerModel::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                    std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> TokenizerModel::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId TokenizerModel::add_merge(TokenId left, TokenId right) {
  std::string merged = token(left) + token(right);
  merge_rank_.emplace(pair_key(left, right), merges_.size());
  merges_.emplace_back(left, right);
  // Two merge paths can spell the same bytes; they share one id.
  auto [it, inserted] = index_.emplace(merged, static_cast<TokenId>(tokens_.size()));
  if (inserted) tokens_.push_back(std::move(merged));
  merge_result_.push_back(it->second);
  return it->second;
}

void TokenizerModel::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> sym;
  sym.reserve(chunk.size());
  for (unsigned char c : chunk) sym.push_back(byte_token(c));
  while (sym.size() > 1) {
    std::size_t best_rank = SIZE_MAX;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = merge_rank_.find(pair_key(sym[i], sym[i + 1]));
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == SIZE_MAX) break;
    const auto [l, r] = merges_[best_rank];
    const TokenId merged = merge_result_[best_rank];
    std::vector<TokenId> next;
    next.reserve(sym.size());
    for (std::size_t i = 0; i < sym.size();) {
      if (i + 1 < sym.size() && sym[i] == l && sym[i + 1] == r) {
        next.push_back(merged);
        i += 2;
      } else {
        next.push_back(sym[i++]);
      }
    }
    sym.swap(next);
  }
  out.insert(out.end(), sym.begin(), sym.end());
}

std::vector<TokenId> TokenizerModel::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (std::string_view chunk : pre_segment(text)) encode_chunk(chunk, ids);
  return ids;
}

std::string TokenizerModel::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const std::string& t = token(id);
    if (!is_special(id)) out += t;
  }
  return out;
}

void TokenizerModel::save(std::ostream& out) const {
  out << "bpe-v1 " << tokens_.size() << '\n';
  out << "specials";
  for (const char* name : kSpecialNames) out << ' ' << name;
  out << '\n';
  for (std::size_t id = 0; id < tokens_.size(); ++id) {
    out << id << '\t' << (id < kNumSpecials ? tokens_[id] : escape_token(tokens_[id])) << '\n';
  }
  for (const auto& [l, r] : merges_) out << escape_token(token(l)) << '\t' << escape_token(token(r)) << '\n';
}

TokenizerModel TokenizerModel::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("tokenizer file is empty");
  std::istringstream header(line);
  std::string magic;
  std::size_t size = 0;
  if (!(header >> magic >> size) || magic != "bpe-v1") throw DataError("tokenizer file lacks 'bpe-v1' header");
  if (size < kMinVocabSize) throw DataError("tokenizer vocab_size below the byte-alphabet floor");
  if (!std::getline(in, line) || line.rfind("specials", 0) != 0) throw DataError("tokenizer file lacks specials line");
  {
    std::istringstream sp(line.substr(8));
    for (const char* expected : kSpecialNames) {
      std::string name;
      if (!(sp >> name) || name != expected) throw DataError("unexpected special token list: " + line);
    }
  }
  std::vector<std::string> vocab;
  for (std::size_t id = 0; id < size; ++id) {
    if (!std::getline(in, line)) throw DataError("tokenizer file truncated in vocabulary section");
    const auto tab = line.find('\t');
    if (tab == std::string::npos || std::stoull(line.substr(0, tab)) != id) {
      throw DataError("bad vocabulary line " + std::to_string(id) + ": " + line);
    }
    const std::string tok = line.substr(tab + 1);
    vocab.push_back(id < kNumSpecials ? tok : unescape_token(tok));
  }
  TokenizerModel model;
  for (std::size_t id = 0; id < kMinVocabSize; ++id) {
    if (vocab[id] != model.tokens_[id]) throw DataError("base token " + std::to_string(id) + " mismatch");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("bad merge line: " + line);
    const auto l = model.find(unescape_token(line.substr(0, tab)));
    const auto r = model.find(unescape_token(line.substr(tab + 1)));
    if (!l || !r) throw DataError("merge references unknown token: " + line);
    const TokenId id = model.add_merge(*l, *r);
    if (static_cast<std::size_t>(id) >= size || model.tokens_[static_cast<std::size_t>(id)] != vocab[static_cast<std::size_t>(id)]) {
      throw DataError("merge '" + line + "' disagrees with the vocabulary section");
    }
  }
  if (model.vocab_size() != size) throw DataError("merge section does not account for every vocabulary entry");
  return model;
}

void TokenizerModel::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tokenizer file " + path);
  save(out);
}

TokenizerModel TokenizerModel::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tokenizer file " + path);
  return load(in);
}

// ---------------------------------------------------------------- training

TokenizerModel train_bpe(std::string_view corpus, std::size_t vocab_size) {
  if (vocab_size < TokenizerModel::kMinVocabSize) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is below the floor of " +
                      std::to_string(TokenizerModel::kMinVocabSize) + " (specials + byte alphabet)");
  }
  if (corpus.empty()) throw DataError("cannot train a tokenizer on an empty corpus");

  TokenizerModel model;
  std::map<std::string_view, std::int64_t> counts;
  for (std::string_view chunk : pre_segment(corpus)) ++counts[chunk];
  std::vector<Word> words;
  words.reserve(counts.size());
  for (const auto& [chunk, n] : counts) {
    Word w;
    w.count = n;
    for (unsigned char c : chunk) w.symbols.push_back(model.byte_token(c));
    words.push_back(std::move(w));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::set<std::size_t>> where;
  auto key = [](TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(l) << 32) | static_cast<std::uint64_t>(r);
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    const auto& s = words[wi].symbols;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      pair_counts[key(s[i], s[i + 1])] += words[wi].count;
      where[key(s[i], s[i + 1])].insert(wi);
    }
  }

  // Highest count first; among equal counts the lexicographically smallest
  // (left, right) byte pair.
  auto worse = [&model](const HeapEntry& a, const HeapEntry& b) {
    if (a.count != b.count) return a.count < b.count;
    const std::string& al = model.token(a.left);
    const std::string& bl = model.token(b.left);
    if (al != bl) return al > bl;
    return model.token(a.right) > model.token(b.right);
  };
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, decltype(worse)> heap(worse);
  for (const auto& [k, c] : pair_counts) {
    heap.push({c, static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xffffffffULL)});
  }

  while (model.vocab_size() < vocab_size) {
    while (!heap.empty()) {
      const HeapEntry& top = heap.top();
      auto it = pair_counts.find(key(top.left, top.right));
      if (it != pair_counts.end() && it->second == top.count) break;
      heap.pop();
    }
    if (heap.empty() || heap.top().count < 2) break;
    const HeapEntry best = heap.top();
    heap.pop();
    const TokenId merged = model.add_merge(best.left, best.right);

    std::set<std::uint64_t> touched;
    const std::set<std::size_t> affected = where[key(best.left, best.right)];
    for (std::size_t wi : affected) {
      Word& w = words[wi];
      auto& s = w.symbols;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto k = key(s[i], s[i + 1]);
        pair_counts[k] -= w.count;
        touched.insert(k);
      }
      std::vector<TokenId> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.left && s[i + 1] == best.right) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(s[i++]);
        }
      }
      s.swap(next);
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto k = key(s[i], s[i + 1]);
        pair_counts[k] += w.count;
        where[k].insert(wi);
        touched.insert(k);
      }
    }
    for (auto k : touched) {
      const auto c = pair_counts[k];
      if (c <= 0) {
        pair_counts.erase(k);
        continue;
      }
      heap.push({c, static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xffffffffULL)});
    }
  }

  if (model.vocab_size() < vocab_size) {
    model.warnings_.push_back("requested vocab_size " + std::to_string(vocab_size) +
                              " is unreachable: no pair repeats after " + std::to_string(model.vocab_size()) +
                              " tokens");
  }
  return model;
}

// ---------------------------------------------------------------- analysis

std::vector<std::string> VocabReport::least_frequent_tokens() const {
  std::vector<std::string> out;
  if (rows.empty()) return out;
  for (const auto& r : rows) {
    if (r.frequency != rows.front().frequency) break;
    out.push_back(r.token);
  }
  return out;
}

std::optional<std::uint64_t> VocabReport::min_frequency() const {
  if (rows.empty()) return std::nullopt;
  return rows.front().frequency;
}

void VocabReport::write_tsv(std::ostream& out) const {
  out << "# vocab_size=" << vocab_size << " counting=tokenized-corpus scope=attested-non-special-tokens\n";
  out << "vocab_size\tid\ttoken\tfrequency\n";
  for (const auto& r : rows) out << vocab_size << '\t' << r.id << '\t' << escape_token(r.token) << '\t' << r.frequency << '\n';
}

VocabReport analyze_vocab(const TokenizerModel& model, std::string_view corpus, std::size_t k) {
  if (k == 0) throw ConfigError("analyze_vocab: k must be at least 1");
  std::vector<std::uint64_t> freq(model.vocab_size(), 0);
  for (TokenId id : model.encode(corpus)) ++freq[static_cast<std::size_t>(id)];
  bool attested_byte[256] = {};
  for (unsigned char c : corpus) attested_byte[c] = true;

  VocabReport report;
  report.vocab_size = model.vocab_size();
  for (std::size_t id = TokenizerModel::kNumSpecials; id < model.vocab_size(); ++id) {
    const std::string& t = model.token(static_cast<TokenId>(id));
    const bool attested = std::all_of(t.begin(), t.end(), [&](char c) { return attested_byte[static_cast<unsigned char>(c)]; });
    if (!attested) continue;
    report.rows.push_back({static_cast<TokenId>(id), t, freq[id]});
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const VocabRow& a, const VocabRow& b) { return a.frequency < b.frequency; });
  if (report.rows.size() > k) report.rows.resize(k);
  return report;
}

}  // namespace structlm
