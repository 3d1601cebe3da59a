#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "structlm/bpe.hpp"
#include "structlm/checkpoint.hpp"
#include "structlm/config.hpp"
#include "structlm/evaluate.hpp"

namespace fs = std::filesystem;
using namespace structlm;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "structlm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("structlm_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name), std::ios::binary) << text;
    return path(name);
  }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  std::string corpus() const {
    std::string text;
    const char* subjects[] = {"the cat", "a dog", "the bird", "my friend", "the teacher"};
    const char* verbs[] = {"sees", "likes", "finds", "helps"};
    const char* objects[] = {"the ball", "a tree", "the house", "some water"};
    for (int i = 0; i < 60; ++i) {
      text += std::string(subjects[i % 5]) + " " + verbs[i % 4] + " " + objects[(i / 3) % 4] + " today\n";
    }
    return write("corpus.txt", text);
  }

  // Small s1 pretraining setup over the fixture corpus.
  std::string pretrain_config(const std::string& tokenizer, const std::string& checkpoints) const {
    std::ostringstream c;
    c << "seed = 5\n"
      << "paths.train = " << path("corpus.txt") << "\n"
      << "paths.tokenizer = " << tokenizer << "\n"
      << "paths.checkpoints = " << checkpoints << "\n"
      << "model.variant = s1\nmodel.n_layers = 2\nmodel.n_heads = 2\nmodel.d_model = 16\nmodel.d_ffn = 32\n"
      << "model.max_seq_len = 32\nparser.n_conv_layers = 1\nparser.kernel_size = 3\n"
      << "train.batch_size = 4\ntrain.seq_len = 32\ntrain.max_steps = 20\ntrain.checkpoint_every = 10\n"
      << "train.packing = sentence\ntrain.lr_peak = 0.001\n";
    return write("exp.cfg", c.str());
  }

  fs::path dir_;
};

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

// Vanilla model whose output is a fixed unigram distribution: every weight is
// zero except the final norm bias (unit first coordinate) and the first
// embedding coordinate, which becomes each token's logit.
Model unigram_model(std::size_t vocab, const std::map<TokenId, double>& scores) {
  ModelConfig cfg;
  cfg.variant = Variant::kVanilla;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ffn = 16;
  cfg.max_seq_len = 64;
  cfg.vocab_size = vocab;
  cfg.dropout = 0.0;
  Model m = Model::build(cfg, 1);
  for (const auto& p : m.parameters()) {
    Tensor t = p.tensor;
    auto d = t.mutable_data();
    std::fill(d.begin(), d.end(), 0.0);
  }
  Tensor bias = m.parameter("encoder.final_norm.bias");
  bias.mutable_data()[0] = 1.0;
  Tensor emb = m.parameter("embeddings.token");
  for (const auto& [id, s] : scores) emb.mutable_data()[static_cast<std::size_t>(id) * cfg.d_model] = s;
  return m;
}

TEST_F(CliTest, TrainTokenizerRoundTripsThroughLoad) {
  const auto c = corpus();
  const auto r = run_cli({"train-tokenizer", "--corpus", c, "--vocab-size", "300", "--out", path("tok.bpe")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto loaded = TokenizerModel::load_file(path("tok.bpe"));
  std::ifstream in(c);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_TRUE(loaded == train_bpe(text, 300));
  const auto ids = loaded.encode("the cat sees a tree today");
  EXPECT_EQ(loaded.decode(ids), "the cat sees a tree today");
}

TEST_F(CliTest, TrainTokenizerIsByteIdenticalAcrossRuns) {
  const auto c = corpus();
  ASSERT_EQ(run_cli({"train-tokenizer", "--corpus", c, "--vocab-size", "290", "--out", path("a.bpe")}).code, 0);
  ASSERT_EQ(run_cli({"train-tokenizer", "--corpus", c, "--vocab-size", "290", "--out", path("b.bpe")}).code, 0);
  EXPECT_EQ(slurp(path("a.bpe")), slurp(path("b.bpe")));
}

TEST_F(CliTest, TrainTokenizerBelowFloorLeavesNoFile) {
  const auto c = corpus();
  const auto r = run_cli({"train-tokenizer", "--corpus", c, "--vocab-size", "100", "--out", path("tok.bpe")});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("floor"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("tok.bpe")));
  EXPECT_FALSE(fs::exists(path("tok.bpe.tmp")));
}

TEST_F(CliTest, MissingCorpusIsDataError) {
  const auto r = run_cli({"train-tokenizer", "--corpus", path("nope.txt"), "--vocab-size", "300", "--out",
                          path("tok.bpe")});
  EXPECT_EQ(r.code, cli::kDataError);
}

TEST_F(CliTest, AnalyzeVocabPrintsOneBlockPerSize) {
  const auto c = corpus();
  const auto r = run_cli({"analyze-vocab", "--corpus", c, "--sizes", "280", "300", "--k", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = slurp(c);
  std::ostringstream expected;
  std::vector<std::uint64_t> mins;
  for (std::size_t size : {280u, 300u}) {
    const auto rep = analyze_vocab(train_bpe(text, size), text, 3);
    rep.write_tsv(expected);
    expected << '\n';
    mins.push_back(*rep.min_frequency());
  }
  EXPECT_EQ(r.out, expected.str());
  EXPECT_GE(mins[0], mins[1]);
}

TEST_F(CliTest, AnalyzeVocabSingleRowPerBlock) {
  const auto c = corpus();
  const auto r = run_cli({"analyze-vocab", "--corpus", c, "--sizes", "270", "280", "--k", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  std::size_t rows = 0, headers = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("vocab_size\t", 0) == 0) {
      ++headers;
    } else {
      ++rows;
    }
  }
  EXPECT_EQ(headers, 2u);
  EXPECT_EQ(rows, 2u);
}

TEST_F(CliTest, AnalyzeVocabContinuesPastFailingSize) {
  const auto c = corpus();
  const auto r = run_cli({"analyze-vocab", "--corpus", c, "--sizes", "100", "280", "--k", "2"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("vocab 100"), std::string::npos);
  EXPECT_NE(r.out.find("vocab_size=280"), std::string::npos);
}

TEST_F(CliTest, AnalyzeVocabWithoutSizesIsUsageError) {
  const auto c = corpus();
  EXPECT_EQ(run_cli({"analyze-vocab", "--corpus", c}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"analyze-vocab", "--corpus", c, "--sizes"}).code, cli::kUsage);
}

TEST_F(CliTest, UnknownSubcommandIsUsageError) {
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
}

TEST_F(CliTest, PrintConfigDefaultsMatchReferenceHyperparameters) {
  const auto r = run_cli({"pretrain", "--print-config", "--config", write("empty.cfg", "")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  const auto kv = KeyValueConfig::parse(in);
  EXPECT_EQ(kv.get_size("train.batch_size", 0), 96u);
  EXPECT_EQ(kv.get_size("train.seq_len", 0), 128u);
  EXPECT_DOUBLE_EQ(kv.get_double("train.weight_decay", 0), 0.1);
  EXPECT_DOUBLE_EQ(kv.get_double("train.lr_peak", 0), 1e-4);
  EXPECT_EQ(kv.get_size("train.max_steps", 0), 62000u);
  EXPECT_DOUBLE_EQ(kv.get_double("train.mask_prob", 0), 0.15);
  EXPECT_EQ(kv.get_size("model.n_heads", 0), 12u);
  EXPECT_EQ(kv.get_size("model.n_layers", 0), 12u);
  EXPECT_EQ(kv.get_size("model.d_model", 0), 768u);
  EXPECT_EQ(kv.get_size("model.d_ffn", 0), 3072u);
  EXPECT_DOUBLE_EQ(kv.get_double("model.dropout", 0), 0.1);

  const auto s2 = run_cli({"pretrain", "--print-config", "--set", "model.variant=s2"});
  ASSERT_EQ(s2.code, 0) << s2.err;
  std::istringstream in2(s2.out);
  const auto kv2 = KeyValueConfig::parse(in2);
  EXPECT_EQ(kv2.get_size("model.n_front", 0), 4u);
  EXPECT_EQ(kv2.get_size("parser.n_conv_layers", 0), 4u);
  EXPECT_EQ(kv2.get_size("parser.kernel_size", 0), 9u);
}

TEST_F(CliTest, ConfigFileComesFromEnvironment) {
  const auto cfg = write("env.cfg", "train.batch_size = 7\n");
  ::setenv(cli::kConfigEnv, cfg.c_str(), 1);
  const auto r = run_cli({"pretrain", "--print-config"});
  const auto flag = run_cli({"pretrain", "--print-config", "--config", write("other.cfg", "train.batch_size = 9\n")});
  ::unsetenv(cli::kConfigEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("train.batch_size = 7\n"), std::string::npos);
  EXPECT_NE(flag.out.find("train.batch_size = 9\n"), std::string::npos);
}

TEST_F(CliTest, SetOverridesConfigFile) {
  const auto cfg = write("a.cfg", "train.batch_size = 7\n");
  const auto r = run_cli({"pretrain", "--print-config", "--config", cfg, "--set", "train.batch_size=11"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("train.batch_size = 11\n"), std::string::npos);
}

TEST_F(CliTest, ParserWidthFollowsModelWidthUnlessSet) {
  const auto r = run_cli({"pretrain", "--print-config", "--set", "model.variant=s1", "--set", "model.d_model=16",
                          "--set", "model.n_heads=2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("parser.hidden_width = 16\n"), std::string::npos);
  const auto own = run_cli({"pretrain", "--print-config", "--set", "model.variant=s1", "--set", "model.d_model=16",
                            "--set", "model.n_heads=2", "--set", "parser.hidden_width=24"});
  ASSERT_EQ(own.code, 0) << own.err;
  EXPECT_NE(own.out.find("parser.hidden_width = 24\n"), std::string::npos);
}

TEST_F(CliTest, InvalidVariantNamesTheField) {
  const auto r = run_cli({"pretrain", "--print-config", "--set", "model.variant=s7"});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("model.variant"), std::string::npos);
}

TEST_F(CliTest, UnknownKeyIsRejected) {
  const auto r = run_cli({"pretrain", "--print-config", "--set", "train.batchsize=4"});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("train.batchsize"), std::string::npos);
}

TEST_F(CliTest, BrokenCrossInvariantIsConfigError) {
  const auto r = run_cli({"pretrain", "--print-config", "--set", "model.variant=s2", "--set", "model.n_front=12"});
  EXPECT_EQ(r.code, cli::kUsage);
}

TEST_F(CliTest, PretrainWritesCheckpointAndOneLogRowPerStep) {
  corpus();
  ASSERT_EQ(run_cli({"train-tokenizer", "--corpus", path("corpus.txt"), "--vocab-size", "300", "--out",
                     path("tok.bpe")})
                .code,
            0);
  const auto cfg = pretrain_config(path("tok.bpe"), path("run"));
  const auto r = run_cli({"pretrain", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("run/final.ckpt")));
  EXPECT_TRUE(fs::exists(path("run/step-00000010.ckpt")));
  EXPECT_TRUE(fs::exists(path("run/config.txt")));
  const auto log = slurp(path("run/metrics.jsonl"));
  EXPECT_EQ(count_lines(log), 20u);
  const auto ck = load_checkpoint(path("run/final.ckpt"));
  EXPECT_EQ(ck.step, 20u);
  EXPECT_EQ(ck.model.config().vocab_size, TokenizerModel::load_file(path("tok.bpe")).vocab_size());
  EXPECT_EQ(ck.model.seed(), 5u);
}

TEST_F(CliTest, ResumeFromStepTenEqualsUninterruptedRun) {
  corpus();
  ASSERT_EQ(run_cli({"train-tokenizer", "--corpus", path("corpus.txt"), "--vocab-size", "300", "--out",
                     path("tok.bpe")})
                .code,
            0);
  const auto cfg = pretrain_config(path("tok.bpe"), path("full"));
  ASSERT_EQ(run_cli({"pretrain", "--config", cfg}).code, 0);
  const auto r = run_cli({"pretrain", "--config", cfg, "--set", "paths.checkpoints=" + path("resumed"), "--resume",
                          path("full/step-00000010.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("full/final.ckpt")), slurp(path("resumed/final.ckpt")));
  EXPECT_EQ(count_lines(slurp(path("resumed/metrics.jsonl"))), 10u);

  // Resuming inside the original directory replaces the rows after step 10.
  ASSERT_EQ(run_cli({"pretrain", "--config", cfg, "--resume", path("full/step-00000010.ckpt")}).code, 0);
  std::istringstream log(slurp(path("full/metrics.jsonl")));
  std::string line;
  std::size_t expected_step = 1;
  while (std::getline(log, line)) {
    EXPECT_NE(line.find("\"step\":" + std::to_string(expected_step) + ","), std::string::npos) << line;
    ++expected_step;
  }
  EXPECT_EQ(expected_step, 21u);
}

TEST_F(CliTest, ResumeWithDifferentModelIsConfigError) {
  corpus();
  ASSERT_EQ(run_cli({"train-tokenizer", "--corpus", path("corpus.txt"), "--vocab-size", "300", "--out",
                     path("tok.bpe")})
                .code,
            0);
  const auto cfg = pretrain_config(path("tok.bpe"), path("run"));
  ASSERT_EQ(run_cli({"pretrain", "--config", cfg}).code, 0);
  const auto r = run_cli({"pretrain", "--config", cfg, "--set", "model.d_ffn=64", "--resume",
                          path("run/step-00000010.ckpt")});
  EXPECT_EQ(r.code, cli::kUsage);
}

TEST_F(CliTest, DivergingTrainingIsNumericFailure) {
  corpus();
  ASSERT_EQ(run_cli({"train-tokenizer", "--corpus", path("corpus.txt"), "--vocab-size", "300", "--out",
                     path("tok.bpe")})
                .code,
            0);
  const auto cfg = pretrain_config(path("tok.bpe"), path("run"));
  const auto r = run_cli({"pretrain", "--config", cfg, "--set", "train.lr_peak=1e300"});
  EXPECT_EQ(r.code, cli::kNumericFailure) << r.err;
}

TEST_F(CliTest, PpplOfUniformCheckpointIsVocabSize) {
  const TokenizerModel tok;
  tok.save_file(path("tok.bpe"));
  const Model m = unigram_model(tok.vocab_size(), {});
  save_checkpoint(path("zero.ckpt"), m, 0, nullptr);
  const auto data = write("dev.txt", "one two\nthree\nfour five six\nseven\neight nine\n");
  const auto r = run_cli({"eval-pppl", "--checkpoint", path("zero.ckpt"), "--tokenizer", path("tok.bpe"), "--data",
                          data, "--trim", "0", "--model-id", "uniform"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "model\ttask\tmetric\tvalue\tn_items");
  std::istringstream fields(row);
  std::string model, task, metric;
  double value = 0;
  std::size_t n = 0;
  fields >> model >> task >> metric >> value >> n;
  EXPECT_EQ(model, "uniform");
  EXPECT_EQ(task, "dev");
  EXPECT_EQ(metric, "pppl");
  EXPECT_NEAR(value, static_cast<double>(tok.vocab_size()), 1e-6);
  EXPECT_EQ(n, 5u);
}

TEST_F(CliTest, PairsWithRiggedModelScorePerfectly) {
  const TokenizerModel tok;
  tok.save_file(path("tok.bpe"));
  const Model m = unigram_model(tok.vocab_size(), {{tok.byte_token('a'), 4.0}, {tok.byte_token('b'), -4.0}});
  save_checkpoint(path("rig.ckpt"), m, 0, nullptr);
  const auto data = write("pairs.jsonl",
                          "{\"phenomenon\": \"x\", \"sentence_good\": \"cat a\", \"sentence_bad\": \"cat b\"}\n"
                          "{\"phenomenon\": \"y\", \"sentence_good\": \"a dog\", \"sentence_bad\": \"b dog\"}\n"
                          "{\"phenomenon\": \"y\", \"sentence_good\": \"ma\", \"sentence_bad\": \"mb\"}\n");
  const auto r = run_cli({"eval-pairs", "--checkpoint", path("rig.ckpt"), "--tokenizer", path("tok.bpe"), "--data",
                          data, "--out", path("pairs.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(path("pairs.tsv"));
  EXPECT_NE(text.find("vanilla\toverall\taccuracy\t1\t3\n"), std::string::npos) << text;
  EXPECT_NE(text.find("vanilla\ty\taccuracy\t1\t2\n"), std::string::npos) << text;
}

TEST_F(CliTest, EvalWithoutCheckpointIsConfigError) {
  const TokenizerModel tok;
  tok.save_file(path("tok.bpe"));
  const auto data = write("dev.txt", "one\n");
  EXPECT_EQ(run_cli({"eval-pppl", "--tokenizer", path("tok.bpe"), "--data", data}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"eval-pppl", "--checkpoint", path("none.ckpt"), "--tokenizer", path("tok.bpe"), "--data", data})
                .code,
            cli::kDataError);
}

TEST_F(CliTest, InducedTreesMatchUasOracle) {
  const TokenizerModel tok;
  tok.save_file(path("tok.bpe"));
  ModelConfig cfg;
  cfg.variant = Variant::kS1;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ffn = 32;
  cfg.max_seq_len = 64;
  cfg.vocab_size = tok.vocab_size();
  cfg.parser = ParserConfig{};
  cfg.parser->n_conv_layers = 1;
  cfg.parser->kernel_size = 3;
  cfg.parser->hidden_width = 16;
  const Model m = Model::build(cfg, 11);
  save_checkpoint(path("s1.ckpt"), m, 0, nullptr);
  const auto gold_path = write("gold.txt",
                               "the\ncat\nsat\nedge 0 1\nedge 1 2\n\n"
                               "dogs\nbark\nloudly\ntoday\nedge 0 1\nedge 1 2\nedge 1 3\n\n"
                               "hi\nthere\nedge 0 1\n");
  const auto r = run_cli({"induce-trees", "--checkpoint", path("s1.ckpt"), "--tokenizer", path("tok.bpe"), "--data",
                          gold_path, "--parses", path("parses.txt"), "--model-id", "s1"});
  ASSERT_EQ(r.code, 0) << r.err;

  std::ifstream gin(gold_path);
  const auto gold = read_gold_trees(gin);
  std::size_t matched = 0, total = 0;
  std::vector<std::vector<Edge>> predicted;
  for (const auto& g : gold) {
    const auto t = induce_tree(m, tok, g.words);
    predicted.push_back(t.edges);
    const double uas = uas_undirected(t.edges, g.edges);
    matched += static_cast<std::size_t>(std::lround(uas * static_cast<double>(g.edges.size())));
    total += g.edges.size();
  }
  std::ostringstream expected;
  write_reports_tsv(expected, {{"s1", "gold", "uas_undirected", static_cast<double>(matched) / total, 3}});
  EXPECT_EQ(r.out, expected.str());

  std::ifstream pin(path("parses.txt"));
  const auto dumped = read_gold_trees(pin);
  ASSERT_EQ(dumped.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(dumped[i].words, gold[i].words);
    EXPECT_EQ(dumped[i].edges, predicted[i]);
  }
}

TEST_F(CliTest, InduceTreesRejectsVanillaCheckpoint) {
  const TokenizerModel tok;
  tok.save_file(path("tok.bpe"));
  save_checkpoint(path("v.ckpt"), unigram_model(tok.vocab_size(), {}), 0, nullptr);
  const auto gold_path = write("gold.txt", "a\nb\nedge 0 1\n");
  const auto r = run_cli(
      {"induce-trees", "--checkpoint", path("v.ckpt"), "--tokenizer", path("tok.bpe"), "--data", gold_path});
  EXPECT_EQ(r.code, cli::kUsage);
}

TEST_F(CliTest, CompareMatchesDeltaOracle) {
  const std::vector<EvalReport> base{{"base", "blimp", "accuracy", 66.5, 10}, {"base", "glue", "accuracy", 70.0, 5}};
  const std::vector<EvalReport> s1{{"s1", "blimp", "accuracy", 67.9, 10}, {"s1", "glue", "accuracy", 69.0, 5}};
  std::ofstream(path("base.tsv")) << [&] {
    std::ostringstream s;
    write_reports_tsv(s, base);
    return s.str();
  }();
  std::ofstream(path("s1.tsv")) << [&] {
    std::ostringstream s;
    write_reports_tsv(s, s1);
    return s.str();
  }();
  const auto r = run_cli({"compare", "--baseline", "base", path("base.tsv"), path("s1.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<EvalReport> all = base;
  all.insert(all.end(), s1.begin(), s1.end());
  std::ostringstream expected;
  delta_report(all, "base").write_tsv(expected);
  EXPECT_EQ(r.out, expected.str());

  EXPECT_EQ(run_cli({"compare", "--baseline", "missing", path("s1.tsv")}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"compare", "--baseline", "base", write("junk.tsv", "hello\n")}).code, cli::kDataError);
}

TEST_F(CliTest, EvaluationOutputIsIdempotent) {
  const TokenizerModel tok;
  tok.save_file(path("tok.bpe"));
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ffn = 16;
  cfg.max_seq_len = 64;
  cfg.vocab_size = tok.vocab_size();
  save_checkpoint(path("m.ckpt"), Model::build(cfg, 3), 0, nullptr);
  const auto data = write("dev.txt", "alpha beta\ngamma\ndelta epsilon\n");
  const std::vector<std::string> args{"eval-pppl", "--checkpoint", path("m.ckpt"), "--tokenizer", path("tok.bpe"),
                                      "--data",    data,           "--trim",       "1"};
  auto one = args, two = args;
  one.insert(one.end(), {"--threads", "1"});
  two.insert(two.end(), {"--threads", "4"});
  const auto a = run_cli(one), b = run_cli(two);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
}

}  // namespace
