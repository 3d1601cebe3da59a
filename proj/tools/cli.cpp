#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <ostream>
#include <set>
#include <sstream>

#include "structlm/bpe.hpp"
#include "structlm/checkpoint.hpp"
#include "structlm/errors.hpp"
#include "structlm/evaluate.hpp"

namespace structlm::cli {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string>& key_list() {
  static const std::vector<std::string> keys = {
      "seed",
      "paths.train", "paths.dev", "paths.test", "paths.tokenizer", "paths.checkpoints", "paths.checkpoint",
      "paths.metrics", "paths.reports",
      "eval.trim_longest", "eval.threads", "eval.model_id",
      "model.variant", "model.n_layers", "model.n_front", "model.n_heads", "model.d_model", "model.d_ffn",
      "model.dropout", "model.max_seq_len", "model.vocab_size", "model.embed_norm_dropout", "model.tie_output",
      "parser.n_conv_layers", "parser.kernel_size", "parser.hidden_width", "parser.tau_scope", "parser.tau_height",
      "train.batch_size", "train.seq_len", "train.lr_peak", "train.warmup_steps", "train.weight_decay",
      "train.max_steps", "train.mask_prob", "train.mask_token_frac", "train.random_token_frac",
      "train.checkpoint_every", "train.beta1", "train.beta2", "train.eps", "train.packing"};
  return keys;
}

void require_file(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError(key + " is not set");
  if (!fs::is_regular_file(path)) throw DataError(key + ": no such file " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Non-blank lines with trailing carriage returns removed.
std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
  }
  return out;
}

// Writes through a temporary file so a failure never leaves a partial output.
void write_atomically(const std::string& path, const std::function<void(std::ostream&)>& body) {
  const std::string tmp = path + ".tmp";
  try {
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw DataError("cannot write " + path);
      body(f);
      f.flush();
      if (!f) throw DataError("write failed for " + path);
    }
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

void emit(const std::string& path, std::ostream& out, const std::function<void(std::ostream&)>& body) {
  if (path.empty()) {
    body(out);
  } else {
    write_atomically(path, body);
  }
}

std::string model_kv_text(const ModelConfig& cfg) {
  KeyValueConfig kv;
  write_model_config(cfg, kv);
  std::ostringstream s;
  kv.write(s);
  return s.str();
}

// Keeps only rows logged at or before `step`, so a resumed run appends cleanly.
void truncate_metrics(const std::string& path, std::size_t step) {
  if (!fs::exists(path)) return;
  std::vector<std::string> kept;
  for (const auto& line : read_lines(path)) {
    const auto row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.contains("step")) throw DataError("malformed metrics row in " + path);
    if (row["step"].get<std::size_t>() <= step) kept.push_back(line);
  }
  write_atomically(path, [&](std::ostream& o) {
    for (const auto& l : kept) o << l << '\n';
  });
}

// Config layers: the env-named file (when --config is absent), --config, then
// --set assignments, then command-specific flags.
struct ConfigLayers {
  std::string file;
  std::vector<std::string> sets;
  bool print = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, std::string("Config file (default: $") + kConfigEnv + ")");
    cmd->add_option("--set", sets, "Override a config key, key=value (repeatable)");
    cmd->add_flag("--print-config", print, "Print the resolved configuration and exit");
  }

  KeyValueConfig load() const {
    KeyValueConfig kv;
    std::string path = file;
    if (path.empty()) {
      if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
    }
    if (!path.empty()) kv = KeyValueConfig::load_file(path);
    for (const auto& s : sets) kv.apply_override(s);
    return kv;
  }
};

void set_if(KeyValueConfig& kv, const std::string& key, const std::string& value) {
  if (!value.empty()) kv.set(key, value);
}

// Fills model.vocab_size from the tokenizer unless given explicitly.
std::optional<TokenizerModel> attach_tokenizer(ExperimentConfig& e, bool required) {
  if (e.tokenizer.empty() && !required) return std::nullopt;
  if (!required && !fs::exists(e.tokenizer)) return std::nullopt;
  require_file("paths.tokenizer", e.tokenizer);
  auto tok = TokenizerModel::load_file(e.tokenizer);
  if (e.vocab_from_tokenizer) e.model.vocab_size = tok.vocab_size();
  if (e.model.vocab_size < tok.vocab_size()) {
    throw ConfigError("model.vocab_size " + std::to_string(e.model.vocab_size) + " is smaller than the tokenizer's " +
                      std::to_string(tok.vocab_size()));
  }
  e.model.validate();
  return tok;
}

// --------------------------------------------------------------- commands

int cmd_train_tokenizer(const std::string& corpus, std::size_t vocab_size, const std::string& out_path,
                        std::ostream& out, std::ostream& err) {
  require_file("--corpus", corpus);
  const auto model = train_bpe(read_file(corpus), vocab_size);
  for (const auto& w : model.warnings()) err << "warning: " << w << '\n';
  write_atomically(out_path, [&](std::ostream& o) { model.save(o); });
  out << "wrote " << out_path << " (vocab " << model.vocab_size() << ", " << model.merges().size()
      << " merges)\n";
  return kOk;
}

int cmd_analyze_vocab(const std::string& corpus, const std::vector<std::size_t>& sizes, std::size_t k,
                      const std::string& out_path, std::ostream& out, std::ostream& err) {
  if (sizes.empty()) throw ConfigError("--sizes needs at least one vocabulary size");
  if (k == 0) throw ConfigError("--k must be at least 1");
  require_file("--corpus", corpus);
  const std::string text = read_file(corpus);
  std::ostringstream report;
  int status = kOk;
  for (const auto size : sizes) {
    try {
      const auto model = train_bpe(text, size);
      for (const auto& w : model.warnings()) err << "warning: vocab " << size << ": " << w << '\n';
      const auto r = analyze_vocab(model, text, k);
      r.write_tsv(report);
      report << '\n';
    } catch (const ConfigError& e) {
      err << "error: vocab " << size << ": " << e.what() << '\n';
      status = std::max(status, static_cast<int>(kUsage));
    } catch (const DataError& e) {
      err << "error: vocab " << size << ": " << e.what() << '\n';
      status = kDataError;
    }
  }
  emit(out_path, out, [&](std::ostream& o) { o << report.str(); });
  return status;
}

int cmd_pretrain(const ConfigLayers& layers, const std::string& resume, std::ostream& out, std::ostream& err) {
  auto e = ExperimentConfig::from(layers.load());
  auto tok = attach_tokenizer(e, !layers.print);
  if (layers.print) {
    e.resolved().write(out);
    return kOk;
  }
  require_file("paths.train", e.train_corpus);
  if (e.checkpoints.empty()) throw ConfigError("paths.checkpoints is not set");
  const std::string metrics = e.metrics.empty() ? (fs::path(e.checkpoints) / "metrics.jsonl").string() : e.metrics;

  const auto data = TrainingData::build(read_lines(e.train_corpus), *tok, e.train);
  err << "training data: " << data.size() << " sequences, " << data.token_count() << " tokens\n";

  std::optional<Model> model;
  AdamState state;
  std::size_t start = 0;
  if (!resume.empty()) {
    require_file("--resume", resume);
    auto ck = load_checkpoint(resume);
    if (model_kv_text(ck.model.config()) != model_kv_text(e.model)) {
      throw ConfigError("model configuration differs from the checkpoint being resumed");
    }
    if (ck.model.seed() != e.seed) throw ConfigError("seed differs from the checkpoint being resumed");
    if (!ck.optimizer) throw DataError(resume + " holds no optimizer state");
    start = ck.step;
    state = std::move(*ck.optimizer);
    model.emplace(std::move(ck.model));
  } else {
    model.emplace(Model::build(e.model, e.seed));
    state = AdamState::zeros_like(model->parameters());
  }

  fs::create_directories(e.checkpoints);
  write_atomically((fs::path(e.checkpoints) / "config.txt").string(), [&](std::ostream& o) { e.resolved().write(o); });
  if (start > 0) {
    truncate_metrics(metrics, start);
  } else if (fs::exists(metrics)) {
    fs::remove(metrics);
  }

  LoopOptions opts;
  opts.metrics_path = metrics;
  opts.checkpoint_dir = e.checkpoints;
  opts.start_step = start;
  const auto r = train_loop(*model, state, data, tok->specials(), e.train, opts);
  out << "steps " << r.steps_run << " final_loss " << (r.losses.empty() ? 0.0 : r.losses.back()) << " checkpoint "
      << r.final_checkpoint << '\n';
  return kOk;
}

struct EvalFlags {
  std::string checkpoint, tokenizer, data, out, model_id, task;
  std::size_t threads = 0;
  bool threads_given = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "Model checkpoint (paths.checkpoint)");
    cmd->add_option("--tokenizer", tokenizer, "Tokenizer file (paths.tokenizer)");
    cmd->add_option("--out", out, "Report TSV (paths.reports; default stdout)");
    cmd->add_option("--model-id", model_id, "Model name in reports (eval.model_id)");
    cmd->add_option("--task", task, "Task name in reports (default: data file stem)");
    cmd->add_option("--threads", threads, "Worker threads, 0 = all cores (eval.threads)");
  }

  void apply(KeyValueConfig& kv) const {
    set_if(kv, "paths.checkpoint", checkpoint);
    set_if(kv, "paths.tokenizer", tokenizer);
    set_if(kv, "paths.reports", out);
    set_if(kv, "eval.model_id", model_id);
    if (threads_given) kv.set("eval.threads", std::to_string(threads));
  }
};

struct LoadedModel {
  Checkpoint ck;
  TokenizerModel tok;
  std::string id;
};

LoadedModel load_for_eval(const ExperimentConfig& e) {
  require_file("paths.checkpoint", e.checkpoint);
  require_file("paths.tokenizer", e.tokenizer);
  LoadedModel m{load_checkpoint(e.checkpoint), TokenizerModel::load_file(e.tokenizer), e.model_id};
  if (m.ck.model.config().vocab_size < m.tok.vocab_size()) {
    throw ConfigError("checkpoint vocab_size " + std::to_string(m.ck.model.config().vocab_size) +
                      " is smaller than the tokenizer's " + std::to_string(m.tok.vocab_size()));
  }
  if (m.id.empty()) m.id = to_string(m.ck.model.config().variant);
  return m;
}

std::string task_name(const std::string& flag, const std::string& data) {
  return flag.empty() ? fs::path(data).stem().string() : flag;
}

int cmd_eval_pppl(const ConfigLayers& layers, const EvalFlags& flags, std::size_t trim, bool trim_given,
                  std::ostream& out) {
  auto kv = layers.load();
  flags.apply(kv);
  set_if(kv, "paths.test", flags.data);
  if (trim_given) kv.set("eval.trim_longest", std::to_string(trim));
  const auto e = ExperimentConfig::from(kv);
  if (layers.print) {
    e.resolved().write(out);
    return kOk;
  }
  require_file("paths.test", e.test_corpus);
  const auto m = load_for_eval(e);
  const EncoderMlm mlm(m.ck.model);
  const auto r = corpus_pppl(mlm, m.tok, read_lines(e.test_corpus), e.trim_longest, {e.threads});
  const std::vector<EvalReport> reports{{m.id, task_name(flags.task, e.test_corpus), "pppl", r.pppl, r.sentences}};
  emit(e.reports, out, [&](std::ostream& o) { write_reports_tsv(o, reports); });
  return kOk;
}

int cmd_eval_pairs(const ConfigLayers& layers, const EvalFlags& flags, std::ostream& out) {
  auto kv = layers.load();
  flags.apply(kv);
  const auto e = ExperimentConfig::from(kv);
  if (layers.print) {
    e.resolved().write(out);
    return kOk;
  }
  require_file("--data", flags.data);
  const auto m = load_for_eval(e);
  std::ifstream in(flags.data);
  const auto pairs = read_minimal_pairs(in, flags.data);
  const EncoderMlm mlm(m.ck.model);
  const auto r = minimal_pairs_accuracy(mlm, m.tok, pairs, {e.threads});
  auto reports = r.reports(m.id);
  if (!flags.task.empty()) {
    for (auto& rep : reports) rep.task = flags.task + "/" + rep.task;
  }
  emit(e.reports, out, [&](std::ostream& o) { write_reports_tsv(o, reports); });
  return kOk;
}

void write_tree(std::ostream& o, const std::vector<std::string>& words, const std::vector<Edge>& edges) {
  for (const auto& w : words) o << w << '\n';
  for (const auto& ed : edges) o << "edge " << ed.a << ' ' << ed.b << '\n';
  o << '\n';
}

int cmd_induce_trees(const ConfigLayers& layers, const EvalFlags& flags, const std::string& parses,
                     std::ostream& out) {
  auto kv = layers.load();
  flags.apply(kv);
  const auto e = ExperimentConfig::from(kv);
  if (layers.print) {
    e.resolved().write(out);
    return kOk;
  }
  require_file("--data", flags.data);
  const auto m = load_for_eval(e);
  std::ifstream in(flags.data);
  const auto gold = read_gold_trees(in, flags.data);
  if (gold.empty()) throw DataError(flags.data + " holds no trees");
  std::size_t matched = 0, total = 0;
  std::ostringstream dump;
  for (const auto& g : gold) {
    const auto t = induce_tree(m.ck.model, m.tok, g.words);
    uas_undirected(t.edges, g.edges, g.words.size());  // validates indices
    const std::set<Edge> pred(t.edges.begin(), t.edges.end());
    for (const auto& ed : std::set<Edge>(g.edges.begin(), g.edges.end())) matched += pred.count(ed);
    total += std::set<Edge>(g.edges.begin(), g.edges.end()).size();
    write_tree(dump, t.words, t.edges);
  }
  if (!parses.empty()) write_atomically(parses, [&](std::ostream& o) { o << dump.str(); });
  const std::vector<EvalReport> reports{{m.id, task_name(flags.task, flags.data), "uas_undirected",
                                         static_cast<double>(matched) / static_cast<double>(total), gold.size()}};
  emit(e.reports, out, [&](std::ostream& o) { write_reports_tsv(o, reports); });
  return kOk;
}

std::vector<EvalReport> read_reports(const std::string& path) {
  require_file("report", path);
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("model\ttask\tmetric\tvalue", 0) != 0) {
    throw DataError(path + ": not a report file (missing header)");
  }
  std::vector<EvalReport> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    if (f.size() != 5) throw DataError(path + ":" + std::to_string(lineno) + ": expected 5 tab-separated fields");
    try {
      out.push_back({f[0], f[1], f[2], std::stod(f[3]), static_cast<std::size_t>(std::stoull(f[4]))});
    } catch (const std::logic_error&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

int cmd_compare(const std::string& baseline, const std::vector<std::string>& files, const std::string& out_path,
                std::ostream& out) {
  std::vector<EvalReport> all;
  for (const auto& f : files) {
    auto r = read_reports(f);
    all.insert(all.end(), r.begin(), r.end());
  }
  const auto table = delta_report(all, baseline);
  emit(out_path, out, [&](std::ostream& o) { table.write_tsv(o); });
  return kOk;
}

}  // namespace

std::vector<std::string> known_keys() { return key_list(); }

ExperimentConfig ExperimentConfig::from(const KeyValueConfig& kv) {
  std::vector<std::string> unknown;
  const std::set<std::string> known(key_list().begin(), key_list().end());
  for (const auto& [k, v] : kv.values())
    if (!known.count(k)) unknown.push_back(k);
  if (!unknown.empty()) {
    std::string msg = "unknown config key";
    msg += unknown.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
    throw ConfigError(msg);
  }

  ExperimentConfig e;
  e.seed = kv.get_u64("seed", e.seed);
  e.train_corpus = kv.get_string("paths.train", "");
  e.dev_corpus = kv.get_string("paths.dev", "");
  e.test_corpus = kv.get_string("paths.test", "");
  e.tokenizer = kv.get_string("paths.tokenizer", "");
  e.checkpoints = kv.get_string("paths.checkpoints", "");
  e.checkpoint = kv.get_string("paths.checkpoint", "");
  e.metrics = kv.get_string("paths.metrics", "");
  e.reports = kv.get_string("paths.reports", "");
  e.trim_longest = kv.get_size("eval.trim_longest", e.trim_longest);
  e.threads = kv.get_size("eval.threads", e.threads);
  e.model_id = kv.get_string("eval.model_id", "");

  const Variant variant = parse_variant(kv.get_string("model.variant", to_string(Variant::kVanilla)));
  const ModelConfig base = reference_config(variant, kv.get_bool("model.embed_norm_dropout", false),
                                        kv.get_size("parser.n_conv_layers", 4));
  e.model = read_model_config(kv, base);
  // The parser tracks the encoder width unless given its own.
  if (e.model.parser && !kv.has("parser.hidden_width")) e.model.parser->hidden_width = e.model.d_model;
  e.vocab_from_tokenizer = !kv.has("model.vocab_size");
  e.train = read_train_config(kv, TrainConfig{});
  e.train.seed = e.seed;
  e.model.validate();
  e.train.validate();
  if (e.train.seq_len > e.model.max_seq_len) {
    throw ConfigError("train.seq_len " + std::to_string(e.train.seq_len) + " exceeds model.max_seq_len " +
                      std::to_string(e.model.max_seq_len));
  }
  return e;
}

KeyValueConfig ExperimentConfig::resolved() const {
  KeyValueConfig kv;
  kv.set("seed", std::to_string(seed));
  kv.set("paths.train", train_corpus);
  kv.set("paths.dev", dev_corpus);
  kv.set("paths.test", test_corpus);
  kv.set("paths.tokenizer", tokenizer);
  kv.set("paths.checkpoints", checkpoints);
  kv.set("paths.checkpoint", checkpoint);
  kv.set("paths.metrics", metrics);
  kv.set("paths.reports", reports);
  kv.set("eval.trim_longest", std::to_string(trim_longest));
  kv.set("eval.threads", std::to_string(threads));
  kv.set("eval.model_id", model_id);
  write_model_config(model, kv);
  write_train_config(train, kv);
  return kv;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app("Masked language models with unsupervised syntactic parsers");
  app.require_subcommand(1);

  std::string corpus, out_path;
  std::size_t vocab_size = 0;
  auto* tt = app.add_subcommand("train-tokenizer", "Train a byte-level BPE tokenizer");
  tt->add_option("--corpus", corpus, "Training text")->required();
  tt->add_option("--vocab-size", vocab_size, "Target vocabulary size")->required();
  tt->add_option("--out", out_path, "Tokenizer file to write")->required();

  std::vector<std::size_t> sizes;
  std::size_t k = 10;
  std::string av_out;
  auto* av = app.add_subcommand("analyze-vocab", "Least frequent tokens per vocabulary size");
  av->add_option("--corpus", corpus, "Training text")->required();
  av->add_option("--sizes", sizes, "Vocabulary sizes")->required()->expected(1, -1);
  av->add_option("--k", k, "Rows per size");
  av->add_option("--out", av_out, "Report file (default stdout)");

  ConfigLayers layers;
  std::string resume;
  auto* pt = app.add_subcommand("pretrain", "Masked-language-model pretraining");
  layers.attach(pt);
  pt->add_option("--resume", resume, "Checkpoint to continue from");

  EvalFlags flags;
  std::size_t trim = 0;
  std::string parses;
  auto* pp = app.add_subcommand("eval-pppl", "Corpus pseudo-perplexity");
  layers.attach(pp);
  flags.attach(pp);
  pp->add_option("--data", flags.data, "Sentences, one per line (paths.test)");
  auto* trim_opt = pp->add_option("--trim", trim, "Drop this many longest sentences (eval.trim_longest)");
  auto* pa = app.add_subcommand("eval-pairs", "Minimal-pair accuracy");
  layers.attach(pa);
  flags.attach(pa);
  pa->add_option("--data", flags.data, "JSON lines with phenomenon, sentence_good, sentence_bad")->required();
  auto* it = app.add_subcommand("induce-trees", "Induced dependency trees scored against gold");
  layers.attach(it);
  flags.attach(it);
  it->add_option("--data", flags.data, "Gold trees")->required();
  it->add_option("--parses", parses, "Write induced trees in the gold format");

  std::string baseline, cmp_out;
  std::vector<std::string> files;
  auto* cmp = app.add_subcommand("compare", "Delta table against a baseline model");
  cmp->add_option("--baseline", baseline, "Baseline model id")->required();
  cmp->add_option("reports", files, "Report TSV files")->required()->expected(1, -1);
  cmp->add_option("--out", cmp_out, "Delta TSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    for (auto* sub : {pp, pa, it}) {
      if (sub->parsed()) flags.threads_given = sub->count("--threads") > 0;
    }
    if (tt->parsed()) return cmd_train_tokenizer(corpus, vocab_size, out_path, out, err);
    if (av->parsed()) return cmd_analyze_vocab(corpus, sizes, k, av_out, out, err);
    if (pt->parsed()) return cmd_pretrain(layers, resume, out, err);
    if (pp->parsed()) return cmd_eval_pppl(layers, flags, trim, trim_opt->count() > 0, out);
    if (pa->parsed()) return cmd_eval_pairs(layers, flags, out);
    if (it->parsed()) return cmd_induce_trees(layers, flags, parses, out);
    if (cmp->parsed()) return cmd_compare(baseline, files, cmp_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const DimensionError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace structlm::cli
