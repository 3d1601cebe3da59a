#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "structlm/checkpoint.hpp"
#include "structlm/config.hpp"
#include "structlm/errors.hpp"
#include "structlm/pretrain.hpp"

using namespace structlm;

namespace {

ModelConfig tiny_model(Variant v, std::size_t vocab) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.n_layers = 2;
  cfg.n_front = 1;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ffn = 32;
  cfg.max_seq_len = 24;
  cfg.vocab_size = vocab;
  if (v != Variant::kVanilla) {
    ParserConfig p;
    p.n_conv_layers = 1;
    p.kernel_size = 3;
    p.hidden_width = 8;
    cfg.parser = p;
  }
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.seq_len = 16;
  t.max_steps = 10;
  t.lr_peak = 1e-3;
  t.seed = 7;
  t.checkpoint_every = 1;
  return t;
}

std::vector<std::string> corpus_lines() {
  return {"the cat sat on the mat", "a dog ran in the park", "the bird sang a song",
          "my friend reads old books", "the sun rose over the hill", "we walked to the river",
          "she paints the blue door", "they built a small boat"};
}

const TokenizerModel& tokenizer() {
  static const TokenizerModel tok = [] {
    std::string all;
    for (const auto& l : corpus_lines()) all += l + "\n";
    return train_bpe(all, 300);
  }();
  return tok;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("structlm_pretrain_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<double> flat_params(const Model& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

Batch stream_batch(std::size_t rows, std::size_t len, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < len; ++i) ids.push_back(5 + static_cast<TokenId>(rng.below(vocab - 5)));
    b.ids.push_back(ids);
    b.valid.emplace_back(len, 1);
  }
  return b;
}

}  // namespace

TEST(ScheduleTest, LinearDecayWithoutWarmup) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(cfg.max_steps, cfg), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(cfg.max_steps / 2, cfg), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(cfg.max_steps + 10, cfg), 0.0);
  for (std::size_t s = 1; s < cfg.max_steps; s += 997) EXPECT_LT(lr_at(s, cfg), lr_at(s - 1, cfg));
}

TEST(ScheduleTest, OptionalWarmup) {
  TrainConfig cfg;
  cfg.max_steps = 100;
  cfg.warmup_steps = 10;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, cfg), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(10, cfg), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(55, cfg), 5e-5);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.mask_prob = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.packing = "bucket";
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(MaskingTest, FullProbabilitySelectsEveryEligiblePosition) {
  SpecialTokens sp;
  Batch b;
  b.ids = {{sp.bos, 10, 11, 12, sp.eos, sp.pad}};
  b.valid = {{1, 1, 1, 1, 1, 0}};
  auto m = mask_batch(b, {1.0, 0.8, 0.1}, sp, 50, 3);
  const std::vector<TokenId> want{kIgnoreIndex, 10, 11, 12, kIgnoreIndex, kIgnoreIndex};
  EXPECT_EQ(m.labels[0], want);
  EXPECT_EQ(m.input_ids[0][0], sp.bos);
  EXPECT_EQ(m.input_ids[0][5], sp.pad);
}

TEST(MaskingTest, ZeroProbabilitySelectsNothing) {
  auto b = stream_batch(3, 20, 50, 1);
  auto m = mask_batch(b, {0.0, 0.8, 0.1}, SpecialTokens{}, 50, 3);
  EXPECT_EQ(m.n_labels(), 0u);
  EXPECT_EQ(m.input_ids, b.ids);
}

TEST(MaskingTest, SelectionRateAndReproducibility) {
  SpecialTokens sp;
  auto b = stream_batch(10, 1000, 300, 9);
  auto m1 = mask_batch(b, {0.15, 0.8, 0.1}, sp, 300, 1234);
  auto m2 = mask_batch(b, {0.15, 0.8, 0.1}, sp, 300, 1234);
  EXPECT_EQ(m1.labels, m2.labels);
  EXPECT_EQ(m1.input_ids, m2.input_ids);
  const double frac = static_cast<double>(m1.n_labels()) / 10000.0;
  EXPECT_GE(frac, 0.13);
  EXPECT_LE(frac, 0.17);

  std::size_t masked = 0, kept = 0, replaced = 0;
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t i = 0; i < 1000; ++i) {
      if (m1.labels[r][i] == kIgnoreIndex) {
        EXPECT_EQ(m1.input_ids[r][i], b.ids[r][i]);
        continue;
      }
      const TokenId in = m1.input_ids[r][i];
      if (in == sp.mask) ++masked;
      else if (in == b.ids[r][i]) ++kept;
      else ++replaced;
      EXPECT_TRUE(in == sp.mask || in >= 5);
    }
  }
  const double n = static_cast<double>(m1.n_labels());
  // Random replacement can coincide with the original id (1 in 295).
  EXPECT_NEAR(masked / n, 0.8, 0.04);
  EXPECT_NEAR(kept / n, 0.1, 0.03);
  EXPECT_NEAR(replaced / n, 0.1, 0.03);

  auto other = mask_batch(b, {0.15, 0.8, 0.1}, sp, 300, 1235);
  EXPECT_NE(other.labels, m1.labels);
}

TEST(AdamWTest, MatchesHandComputedSteps) {
  Tensor w = Tensor::from_data({2}, {1.0, -2.0}, true);
  Tensor b = Tensor::from_data({1}, {0.5}, true);
  std::vector<NamedParameter> params{{"w", "x", w, true}, {"b", "x", b, false}};
  AdamState s = AdamState::zeros_like(params);
  AdamWConfig cfg{0.9, 0.999, 1e-8, 0.1};
  const double lr = 0.01;

  // Oracle: scalar AdamW with decoupled decay.
  struct Scalar {
    double p, m = 0, v = 0;
  };
  std::vector<Scalar> ref{{1.0}, {-2.0}, {0.5}};
  const std::vector<std::vector<double>> grads{{0.3, -0.1, 2.0}, {-0.2, 0.4, 1.0}};
  for (std::size_t t = 0; t < grads.size(); ++t) {
    w.mutable_grad()[0] = grads[t][0];
    w.mutable_grad()[1] = grads[t][1];
    b.mutable_grad()[0] = grads[t][2];
    adamw_step(params, s, cfg, lr);
    for (std::size_t k = 0; k < 3; ++k) {
      auto& r = ref[k];
      const double g = grads[t][k];
      r.m = 0.9 * r.m + 0.1 * g;
      r.v = 0.999 * r.v + 0.001 * g * g;
      if (k < 2) r.p *= 1.0 - lr * 0.1;
      const double mh = r.m / (1 - std::pow(0.9, t + 1.0));
      const double vh = r.v / (1 - std::pow(0.999, t + 1.0));
      r.p -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(w.data()[0], ref[0].p, 1e-15);
  EXPECT_NEAR(w.data()[1], ref[1].p, 1e-15);
  EXPECT_NEAR(b.data()[0], ref[2].p, 1e-15);
  EXPECT_EQ(s.t, 2u);
}

TEST(TrainingDataTest, ConcatPackingWindows) {
  TrainConfig cfg = tiny_train();
  auto data = TrainingData::build(corpus_lines(), tokenizer(), cfg);
  std::size_t stream = 0;
  for (const auto& l : corpus_lines()) stream += tokenizer().encode(l).size() + 1;
  EXPECT_EQ(data.size(), (stream + cfg.seq_len - 2) / (cfg.seq_len - 1));
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(data.sequences()[i].front(), tokenizer().specials().bos);
    if (i + 1 < data.size()) {
      EXPECT_EQ(data.sequences()[i].size(), cfg.seq_len);
    }
  }
}

TEST(TrainingDataTest, SentencePacking) {
  TrainConfig cfg = tiny_train();
  cfg.packing = "sentence";
  auto data = TrainingData::build(corpus_lines(), tokenizer(), cfg);
  ASSERT_EQ(data.size(), corpus_lines().size());
  auto expect = tokenizer().encode(corpus_lines()[0]);
  expect.insert(expect.begin(), tokenizer().specials().bos);
  expect.push_back(tokenizer().specials().eos);
  EXPECT_EQ(data.sequences()[0], expect);
}

TEST(TrainingDataTest, EveryEpochVisitsEverySequenceOnce) {
  std::vector<std::vector<TokenId>> seqs;
  for (TokenId i = 0; i < 10; ++i) seqs.push_back({i + 5, i + 5});
  auto data = TrainingData::from_sequences(seqs, 0);
  std::multiset<TokenId> seen;
  for (std::size_t step = 0; step < 5; ++step) {
    auto b = data.batch(step, 4, 3);
    for (const auto& row : b.ids) seen.insert(row[0]);
  }
  for (TokenId i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i + 5), 2u);
  EXPECT_EQ(data.batch(3, 4, 3).ids, data.batch(3, 4, 3).ids);
}

TEST(TrainStepTest, NoLabelsMeansNoUpdate) {
  Model m = Model::build(tiny_model(Variant::kS1, 300), 1);
  auto before = flat_params(m);
  Batch b = stream_batch(2, 6, 300, 1);
  MaskedBatch mb = mask_batch(b, {0.0, 0.8, 0.1}, SpecialTokens{}, 300, 1);
  AdamState s;
  auto r = train_step(m, mb, s, tiny_train(), 0);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.labels, 0u);
  EXPECT_EQ(flat_params(m), before);
  EXPECT_EQ(s.t, 0u);
}

TEST(TrainStepTest, InitialLossNearUniform) {
  for (Variant v : {Variant::kVanilla, Variant::kS1, Variant::kS2}) {
    Model m = Model::build(tiny_model(v, 300), 3);
    Batch b = stream_batch(4, 20, 300, 5);
    MaskedBatch mb = mask_batch(b, {0.15, 0.8, 0.1}, SpecialTokens{}, 300, 8);
    AdamState s;
    auto r = train_step(m, mb, s, tiny_train(), 0);
    EXPECT_NEAR(r.loss, std::log(300.0), 0.1 * std::log(300.0)) << to_string(v);
  }
}

TEST(TrainStepTest, NonFiniteLossAbortsWithDiagnostics) {
  Model m = Model::build(tiny_model(Variant::kVanilla, 300), 3);
  Tensor t = m.parameter("encoder.layer0.ffn.in.weight");
  t.mutable_data()[0] = std::nan("");
  Batch b = stream_batch(2, 8, 300, 5);
  MaskedBatch mb = mask_batch(b, {0.5, 0.8, 0.1}, SpecialTokens{}, 300, 8);
  AdamState s;
  try {
    train_step(m, mb, s, tiny_train(), 17);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 17"), std::string::npos);
    EXPECT_NE(msg.find("lr"), std::string::npos);
    EXPECT_NE(msg.find("encoder.layer0.ffn.in.weight"), std::string::npos);
  }
}

TEST(TrainStepTest, RepeatedSentenceOverfits) {
  ModelConfig mc = tiny_model(Variant::kS2, 300);
  mc.dropout = 0.0;
  Model m = Model::build(mc, 11);
  TrainConfig tc = tiny_train();
  tc.max_steps = 300;
  tc.lr_peak = 3e-3;
  tc.packing = "sentence";
  std::vector<std::string> docs(4, "the cat sat on the mat");
  auto data = TrainingData::build(docs, tokenizer(), tc);
  AdamState s;
  auto out = train_loop(m, s, data, tokenizer().specials(), tc);
  ASSERT_EQ(out.losses.size(), 300u);
  double tail = 0.0;
  for (std::size_t i = 290; i < 300; ++i) tail += out.losses[i] / 10.0;
  EXPECT_LT(tail, out.losses[0]);
}

TEST(TrainLoopTest, CorpusShorterThanOneBatch) {
  Model m = Model::build(tiny_model(Variant::kVanilla, 300), 1);
  TrainConfig tc = tiny_train();
  tc.packing = "sentence";
  tc.batch_size = 20;
  auto data = TrainingData::build(corpus_lines(), tokenizer(), tc);
  AdamState s;
  EXPECT_THROW(train_loop(m, s, data, tokenizer().specials(), tc), DataError);
}

TEST(TrainLoopTest, MetricsLogHasOneRowPerStep) {
  auto dir = scratch_dir("metrics");
  Model m = Model::build(tiny_model(Variant::kS1, 300), 1);
  TrainConfig tc = tiny_train();
  tc.max_steps = 3;
  auto data = TrainingData::build(corpus_lines(), tokenizer(), tc);
  tc.batch_size = std::min<std::size_t>(tc.batch_size, data.size());
  AdamState s;
  LoopOptions opt;
  opt.metrics_path = (dir / "metrics.jsonl").string();
  train_loop(m, s, data, tokenizer().specials(), tc, opt);
  std::ifstream in(opt.metrics_path);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find("\"step\":" + std::to_string(rows)), std::string::npos);
    for (const char* key : {"\"loss\"", "\"lr\"", "\"tokens_per_sec\""}) EXPECT_NE(line.find(key), std::string::npos);
  }
  EXPECT_EQ(rows, 3u);
}

TEST(TrainLoopTest, SameSeedSameLossTrace) {
  auto run = [] {
    Model m = Model::build(tiny_model(Variant::kS2, 300), 5);
    TrainConfig tc = tiny_train();
    tc.packing = "sentence";
    auto data = TrainingData::build(corpus_lines(), tokenizer(), tc);
    AdamState s;
    return train_loop(m, s, data, tokenizer().specials(), tc).losses;
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(TrainLoopTest, ResumeMatchesUninterruptedRun) {
  auto dir = scratch_dir("resume");
  TrainConfig tc = tiny_train();
  tc.max_steps = 2;
  tc.packing = "sentence";
  auto data = TrainingData::build(corpus_lines(), tokenizer(), tc);
  const auto& sp = tokenizer().specials();

  Model full = Model::build(tiny_model(Variant::kS1, 300), 5);
  AdamState full_state;
  LoopOptions opt;
  opt.checkpoint_dir = (dir / "full").string();
  train_loop(full, full_state, data, sp, tc, opt);

  Checkpoint ck = load_checkpoint((dir / "full" / "step-00000001.ckpt").string());
  ASSERT_EQ(ck.step, 1u);
  ASSERT_TRUE(ck.optimizer.has_value());
  LoopOptions resume;
  resume.start_step = ck.step;
  auto r = train_loop(ck.model, *ck.optimizer, data, sp, tc, resume);
  EXPECT_EQ(r.steps_run, 1u);
  EXPECT_EQ(flat_params(ck.model), flat_params(full));
  EXPECT_EQ(ck.optimizer->m, full_state.m);
  EXPECT_EQ(ck.optimizer->v, full_state.v);
  EXPECT_EQ(ck.optimizer->t, full_state.t);
}

TEST(CheckpointTest, RoundTripAndCorruption) {
  auto dir = scratch_dir("ckpt");
  ModelConfig mc = tiny_model(Variant::kS2, 300);
  mc.embed_norm_dropout = true;
  Model m = Model::build(mc, 99);
  m.fix_residual_gate();
  AdamState s = AdamState::zeros_like(m.parameters());
  s.t = 3;
  s.m[0][0] = 0.25;
  s.v.back().back() = 0.5;
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(path, m, 42, &s, {{"train.seed", "7"}});

  std::ifstream raw(path, std::ios::binary);
  std::string first;
  std::getline(raw, first);
  EXPECT_EQ(first, "structlm-ckpt-v1");

  Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.step, 42u);
  EXPECT_EQ(ck.model.seed(), 99u);
  EXPECT_EQ(ck.extra.at("train.seed"), "7");
  EXPECT_EQ(ck.model.config().variant, Variant::kS2);
  EXPECT_TRUE(ck.model.config().embed_norm_dropout);
  EXPECT_EQ(flat_params(ck.model), flat_params(m));
  ASSERT_TRUE(ck.optimizer);
  EXPECT_EQ(ck.optimizer->t, 3u);
  EXPECT_EQ(ck.optimizer->m, s.m);
  EXPECT_EQ(ck.optimizer->v, s.v);

  save_checkpoint((dir / "b.ckpt").string(), m, 1, nullptr);
  EXPECT_FALSE(load_checkpoint((dir / "b.ckpt").string()).optimizer.has_value());

  const auto size = std::filesystem::file_size(path);
  std::filesystem::copy_file(path, dir / "trunc.ckpt");
  std::filesystem::resize_file(dir / "trunc.ckpt", size - 8);
  EXPECT_THROW(load_checkpoint((dir / "trunc.ckpt").string()), DataError);
  {
    std::ofstream bad(dir / "bad.ckpt");
    bad << "structlm-ckpt-v0\n{}\n";
  }
  EXPECT_THROW(load_checkpoint((dir / "bad.ckpt").string()), DataError);
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), DataError);
}

TEST(ConfigTest, ParseOverrideAndRoundTrip) {
  std::istringstream in("# experiment\nmodel.variant = s2\nmodel.n_layers=4\n\nmodel.n_front = 2 # front\n"
                        "train.lr_peak = 0.0003\n");
  auto kv = KeyValueConfig::parse(in);
  kv.apply_override("model.d_model=32");
  ModelConfig mc = read_model_config(kv);
  EXPECT_EQ(mc.variant, Variant::kS2);
  EXPECT_EQ(mc.n_layers, 4u);
  EXPECT_EQ(mc.n_front, 2u);
  EXPECT_EQ(mc.d_model, 32u);
  ASSERT_TRUE(mc.parser);
  EXPECT_EQ(mc.parser->hidden_width, 32u);
  TrainConfig tc = read_train_config(kv);
  EXPECT_DOUBLE_EQ(tc.lr_peak, 3e-4);
  EXPECT_TRUE(kv.unused_keys().empty());

  KeyValueConfig out;
  write_model_config(mc, out);
  write_train_config(tc, out);
  std::ostringstream text;
  out.write(text);
  std::istringstream back(text.str());
  auto kv2 = KeyValueConfig::parse(back);
  ModelConfig mc2 = read_model_config(kv2);
  TrainConfig tc2 = read_train_config(kv2);
  EXPECT_EQ(mc2.n_front, mc.n_front);
  EXPECT_EQ(mc2.parser->tau_scope, mc.parser->tau_scope);
  EXPECT_EQ(tc2.lr_peak, tc.lr_peak);
  EXPECT_EQ(tc2.packing, tc.packing);
}

TEST(ConfigTest, Errors) {
  std::istringstream in("model.variant\n");
  EXPECT_THROW(KeyValueConfig::parse(in, "x.cfg"), ConfigError);
  KeyValueConfig kv;
  kv.set("model.n_layers", "twelve");
  EXPECT_THROW(read_model_config(kv), ConfigError);
  kv.set("model.n_layers", "2");
  kv.set("model.n_layerz", "3");
  read_model_config(kv);
  EXPECT_EQ(kv.unused_keys(), std::vector<std::string>{"model.n_layerz"});
  EXPECT_THROW(kv.apply_override("novalue"), ConfigError);
}
