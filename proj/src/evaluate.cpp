#include "structlm/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <json.hpp>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "structlm/errors.hpp"
#include "structlm/parallel.hpp"

namespace structlm {

namespace {

double log_prob_at(const Tensor& logits, std::size_t row, TokenId target) {
  const std::size_t v = logits.dim(1);
  const double* p = logits.data().data() + row * v;
  double mx = p[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(p[j] - mx);
  return p[static_cast<std::size_t>(target)] - mx - std::log(z);
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

Tensor EncoderMlm::logits(std::span<const TokenId> ids) const {
  NoGradGuard guard;
  return forward(model_, ids).logits;
}

std::vector<TokenId> scoring_sequence(const TokenizerModel& tokenizer, const std::string& sentence,
                                      std::size_t max_seq_len) {
  auto toks = tokenizer.encode(sentence);
  if (toks.empty()) throw DataError("sentence has no tokens: '" + sentence + "'");
  if (toks.size() + 2 > max_seq_len) {
    throw DataError("sentence of " + std::to_string(toks.size()) + " tokens exceeds max_seq_len " +
                    std::to_string(max_seq_len) + " with [BOS]/[EOS]: '" + sentence + "'");
  }
  std::vector<TokenId> seq{tokenizer.specials().bos};
  seq.insert(seq.end(), toks.begin(), toks.end());
  seq.push_back(tokenizer.specials().eos);
  return seq;
}

std::vector<SentenceScore> score_sentences(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                                           const std::vector<std::string>& sentences, const EvalOptions& options) {
  if (model.vocab_size() < tokenizer.vocab_size()) {
    throw ConfigError("model vocabulary (" + std::to_string(model.vocab_size()) + ") is smaller than the tokenizer's (" +
                      std::to_string(tokenizer.vocab_size()) + ")");
  }
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::pair<std::size_t, std::size_t>> jobs;  // sentence, position
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    seqs.push_back(scoring_sequence(tokenizer, sentences[s], model.max_seq_len()));
    for (std::size_t t = 1; t + 1 < seqs.back().size(); ++t) jobs.emplace_back(s, t);
  }
  const TokenId mask = tokenizer.specials().mask;
  std::vector<double> terms(jobs.size());
  parallel_for(
      jobs.size(),
      [&](std::size_t k) {
        NoGradGuard guard;
        const auto [s, t] = jobs[k];
        std::vector<TokenId> masked = seqs[s];
        masked[t] = mask;
        terms[k] = log_prob_at(model.logits(masked), t, seqs[s][t]);
      },
      options.threads);
  std::vector<SentenceScore> out(sentences.size());
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    out[jobs[k].first].pll += terms[k];
    ++out[jobs[k].first].tokens;
  }
  return out;
}

double pseudo_log_likelihood(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                             const std::string& sentence, const EvalOptions& options) {
  return score_sentences(model, tokenizer, {sentence}, options)[0].pll;
}

std::vector<std::size_t> retained_after_trim(const std::vector<std::size_t>& token_counts, std::size_t trim_longest) {
  std::vector<std::size_t> order(token_counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return token_counts[a] > token_counts[b]; });
  std::vector<bool> dropped(token_counts.size(), false);
  for (std::size_t i = 0; i < std::min(trim_longest, order.size()); ++i) dropped[order[i]] = true;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < token_counts.size(); ++i)
    if (!dropped[i]) kept.push_back(i);
  return kept;
}

PpplResult corpus_pppl(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                       const std::vector<std::string>& sentences, std::size_t trim_longest,
                       const EvalOptions& options) {
  std::vector<std::size_t> counts;
  for (const auto& s : sentences) counts.push_back(tokenizer.encode(s).size());
  const auto kept = retained_after_trim(counts, trim_longest);
  if (kept.empty()) {
    throw DataError("no sentences left after removing the " + std::to_string(trim_longest) + " longest of " +
                    std::to_string(sentences.size()));
  }
  std::vector<std::string> retained;
  for (std::size_t i : kept) retained.push_back(sentences[i]);
  PpplResult r;
  for (const auto& s : score_sentences(model, tokenizer, retained, options)) {
    r.total_pll += s.pll;
    r.tokens += s.tokens;
  }
  r.sentences = retained.size();
  r.pppl = std::exp(-r.total_pll / static_cast<double>(r.tokens));
  return r;
}

std::vector<MinimalPair> read_minimal_pairs(std::istream& in, const std::string& source) {
  std::vector<MinimalPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    MinimalPair p;
    try {
      const auto j = nlohmann::json::parse(line);
      p.phenomenon = j.at("phenomenon").get<std::string>();
      p.good = j.at("sentence_good").get<std::string>();
      p.bad = j.at("sentence_bad").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
    if (p.good.empty() || p.bad.empty()) throw DataError(where + "empty sentence in pair");
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<EvalReport> PairsResult::reports(const std::string& model_id) const {
  std::vector<EvalReport> out;
  for (const auto& [tag, acc] : by_phenomenon) out.push_back({model_id, tag, "accuracy", acc.first, acc.second});
  out.push_back({model_id, "overall", "accuracy", accuracy, n});
  return out;
}

PairsResult minimal_pairs_accuracy(const MaskedLanguageModel& model, const TokenizerModel& tokenizer,
                                   const std::vector<MinimalPair>& pairs, const EvalOptions& options) {
  if (pairs.empty()) throw DataError("no minimal pairs to score");
  std::vector<std::string> sentences;
  for (const auto& p : pairs) {
    sentences.push_back(p.good);
    sentences.push_back(p.bad);
  }
  const auto scores = score_sentences(model, tokenizer, sentences, options);
  PairsResult r;
  r.n = pairs.size();
  std::map<std::string, double> sums;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double good = scores[2 * i].pll, bad = scores[2 * i + 1].pll;
    const double c = good > bad ? 1.0 : (good == bad ? 0.5 : 0.0);
    r.credit.push_back(c);
    sums[pairs[i].phenomenon] += c;
    ++r.by_phenomenon[pairs[i].phenomenon].second;
  }
  double total = 0.0;
  for (double c : r.credit) total += c;
  r.accuracy = total / static_cast<double>(r.n);
  for (auto& [tag, acc] : r.by_phenomenon) acc.first = sums[tag] / static_cast<double>(acc.second);
  return r;
}

double uas_undirected(const std::vector<Edge>& predicted, const std::vector<Edge>& gold,
                      std::optional<std::size_t> n_tokens) {
  std::set<Edge> g, p;
  for (const auto& e : gold) g.insert(make_edge(e.a, e.b));
  for (const auto& e : predicted) p.insert(make_edge(e.a, e.b));
  if (g.empty()) throw DataError("uas_undirected: gold tree has no edges");
  if (n_tokens) {
    for (const auto* s : {&g, &p})
      for (const auto& e : *s)
        if (e.b >= *n_tokens) throw DataError("uas_undirected: edge index outside the sentence");
  }
  std::size_t hit = 0;
  for (const auto& e : g) hit += p.count(e);
  return static_cast<double>(hit) / static_cast<double>(g.size());
}

std::vector<GoldTree> read_gold_trees(std::istream& in, const std::string& source) {
  std::vector<GoldTree> out;
  GoldTree cur;
  std::string line;
  std::size_t lineno = 0;
  auto flush = [&] {
    if (cur.words.empty() && cur.edges.empty()) return;
    if (cur.words.empty()) throw DataError(source + ":" + std::to_string(lineno) + ": tree block without words");
    for (const auto& e : cur.edges) {
      if (e.b >= cur.words.size() || e.a == e.b) {
        throw DataError(source + ":" + std::to_string(lineno) + ": edge outside the sentence or a self loop");
      }
    }
    out.push_back(std::move(cur));
    cur = GoldTree{};
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    if (line.rfind("edge ", 0) == 0 || line.rfind("edge\t", 0) == 0) {
      std::istringstream ls(line.substr(5));
      long long i = -1, j = -1;
      std::string rest;
      if (!(ls >> i >> j) || (ls >> rest) || i < 0 || j < 0) {
        throw DataError(source + ":" + std::to_string(lineno) + ": expected 'edge i j'");
      }
      cur.edges.push_back(make_edge(static_cast<std::size_t>(i), static_cast<std::size_t>(j)));
    } else {
      if (!cur.edges.empty()) throw DataError(source + ":" + std::to_string(lineno) + ": word after edge lines");
      const auto b = line.find_first_not_of(" \t");
      const auto e = line.find_last_not_of(" \t");
      cur.words.push_back(line.substr(b, e - b + 1));
    }
  }
  flush();
  return out;
}

InducedTree induce_tree(const Model& model, const TokenizerModel& tokenizer, const std::vector<std::string>& words) {
  if (!model.has_parser()) throw ConfigError("tree induction needs an s1 or s2 model");
  if (words.empty()) throw DataError("tree induction needs at least one word");
  InducedTree out;
  out.words = words;
  std::vector<TokenId> seq{tokenizer.specials().bos};
  out.word_of.push_back(words.size());
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (words[w].empty() || words[w].find_first_of(" \t\r\n") != std::string::npos) {
      throw DataError("word " + std::to_string(w) + " is empty or contains whitespace");
    }
    const auto toks = tokenizer.encode(w == 0 ? words[w] : " " + words[w]);
    for (TokenId t : toks) {
      seq.push_back(t);
      out.word_of.push_back(w);
    }
  }
  seq.push_back(tokenizer.specials().eos);
  out.word_of.push_back(words.size());
  if (seq.size() > model.config().max_seq_len) {
    throw DataError("sentence of " + std::to_string(seq.size()) + " tokens exceeds max_seq_len");
  }

  NoGradGuard guard;
  auto fwd = forward(model, seq);
  out.subword = *fwd.parser_outputs;
  const std::size_t n = words.size(), len = seq.size();
  std::vector<double> d(n * n, 0.0);
  std::vector<std::size_t> pieces(n, 0);
  for (std::size_t i = 0; i < len; ++i)
    if (out.word_of[i] < n) ++pieces[out.word_of[i]];
  const auto dep = out.subword.dep.data();
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t w = out.word_of[i];
    if (w >= n) continue;
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t v = out.word_of[j];
      if (v >= n || v == w) continue;
      d[w * n + v] += dep[i * len + j] / static_cast<double>(pieces[w]);
    }
  }
  out.dep = Tensor::from_data({n, n}, std::move(d));
  out.edges = extract_hard_tree(out.dep);
  return out;
}

DeltaTable delta_report(const std::vector<EvalReport>& reports, const std::string& baseline) {
  DeltaTable t;
  t.baseline = baseline;
  t.models.push_back(baseline);
  bool has_baseline = false;
  for (const auto& r : reports) {
    has_baseline |= r.model == baseline;
    if (std::find(t.models.begin(), t.models.end(), r.model) == t.models.end()) t.models.push_back(r.model);
    auto it = std::find_if(t.rows.begin(), t.rows.end(),
                           [&](const DeltaRow& row) { return row.task == r.task && row.metric == r.metric; });
    if (it == t.rows.end()) {
      t.rows.push_back({r.task, r.metric, {}, {}, false});
      it = std::prev(t.rows.end());
    }
    it->values[r.model] = r.value;
  }
  if (!has_baseline) throw ConfigError("no reports for baseline model '" + baseline + "'");

  auto fill = [&](DeltaRow& row) {
    row.incomplete = row.values.size() != t.models.size();
    auto base = row.values.find(baseline);
    if (base == row.values.end()) return;
    for (const auto& [model, value] : row.values)
      if (model != baseline) row.deltas[model] = value - base->second;
  };
  for (auto& row : t.rows) fill(row);

  // Average over complete rows when they all share one metric.
  std::set<std::string> metrics;
  std::size_t complete = 0;
  for (const auto& row : t.rows)
    if (!row.incomplete) {
      metrics.insert(row.metric);
      ++complete;
    }
  if (complete > 1 && metrics.size() == 1) {
    DeltaRow avg{"average", *metrics.begin(), {}, {}, false};
    for (const auto& m : t.models) {
      double s = 0.0;
      for (const auto& row : t.rows)
        if (!row.incomplete) s += row.values.at(m);
      avg.values[m] = s / static_cast<double>(complete);
    }
    fill(avg);
    t.rows.push_back(std::move(avg));
  }
  return t;
}

void DeltaTable::write_tsv(std::ostream& out) const {
  out << "task\tmetric";
  for (const auto& m : models) out << '\t' << m;
  for (const auto& m : models)
    if (m != baseline) out << "\tdelta_" << m;
  out << "\tstatus\n";
  for (const auto& row : rows) {
    out << row.task << '\t' << row.metric;
    for (const auto& m : models) {
      auto it = row.values.find(m);
      out << '\t' << (it == row.values.end() ? "-" : fmt(it->second));
    }
    for (const auto& m : models) {
      if (m == baseline) continue;
      auto it = row.deltas.find(m);
      out << '\t' << (it == row.deltas.end() ? "-" : fmt(it->second));
    }
    out << '\t' << (row.incomplete ? "incomplete" : "ok") << '\n';
  }
}

void write_reports_tsv(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << "model\ttask\tmetric\tvalue\tn_items\n";
  for (const auto& r : reports)
    out << r.model << '\t' << r.task << '\t' << r.metric << '\t' << fmt(r.value) << '\t' << r.n_items << '\n';
}

}  // namespace structlm
