#include "structlm/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "structlm/checkpoint.hpp"
#include "structlm/config.hpp"
#include "structlm/errors.hpp"

namespace structlm {

namespace {

bool is_special(TokenId id, const SpecialTokens& s) {
  return id == s.pad || id == s.unk || id == s.bos || id == s.eos || id == s.mask;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "data", epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (batch_size < 1) bad.push_back("train.batch_size must be positive");
  if (seq_len < 3) bad.push_back("train.seq_len must be at least 3");
  if (max_steps < 1) bad.push_back("train.max_steps must be positive");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) bad.push_back("train.mask_prob must lie in (0, 1)");
  if (!(mask_token_frac >= 0.0 && random_token_frac >= 0.0 && mask_token_frac + random_token_frac <= 1.0))
    bad.push_back("train.mask_token_frac and train.random_token_frac must be non-negative with sum <= 1");
  if (!(lr_peak >= 0.0)) bad.push_back("train.lr_peak must be non-negative");
  if (warmup_steps >= max_steps && warmup_steps > 0) bad.push_back("train.warmup_steps must be below max_steps");
  if (!(weight_decay >= 0.0)) bad.push_back("train.weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad.push_back("train.beta1/beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) bad.push_back("train.eps must be positive");
  if (packing != "concat" && packing != "sentence") bad.push_back("train.packing must be concat or sentence");
  if (bad.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ConfigError(msg);
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.max_steps) return 0.0;
  if (step < cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return cfg.lr_peak * static_cast<double>(cfg.max_steps - step) /
         static_cast<double>(cfg.max_steps - cfg.warmup_steps);
}

std::size_t MaskedBatch::n_labels() const {
  std::size_t n = 0;
  for (const auto& row : labels)
    for (TokenId t : row) n += t != kIgnoreIndex;
  return n;
}

MaskedBatch mask_batch(const Batch& batch, const MaskingConfig& cfg, const SpecialTokens& specials,
                       std::size_t vocab_size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> ordinary;
  for (std::size_t id = 0; id < vocab_size; ++id)
    if (!is_special(static_cast<TokenId>(id), specials)) ordinary.push_back(static_cast<TokenId>(id));

  MaskedBatch out;
  out.input_ids = batch.ids;
  out.valid = batch.valid;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ids = batch.ids[b];
    std::vector<TokenId> labels(ids.size(), kIgnoreIndex);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const bool real = batch.valid.empty() || batch.valid[b].empty() || batch.valid[b][i];
      if (!real || is_special(ids[i], specials)) continue;
      if (rng.uniform() >= cfg.mask_prob) continue;
      labels[i] = ids[i];
      const double r = rng.uniform();
      if (r < cfg.mask_token_frac) {
        out.input_ids[b][i] = specials.mask;
      } else if (r < cfg.mask_token_frac + cfg.random_token_frac && !ordinary.empty()) {
        out.input_ids[b][i] = ordinary[rng.below(ordinary.size())];
      }
    }
    out.labels.push_back(std::move(labels));
  }
  if (out.valid.size() != out.input_ids.size()) {
    out.valid.clear();
    for (const auto& row : out.input_ids) out.valid.emplace_back(row.size(), 1);
  }
  return out;
}

TrainingData TrainingData::build(const std::vector<std::string>& documents, const TokenizerModel& tokenizer,
                                 const TrainConfig& cfg) {
  cfg.validate();
  const auto& sp = tokenizer.specials();
  std::vector<std::vector<TokenId>> seqs;
  if (cfg.packing == "sentence") {
    for (const auto& doc : documents) {
      auto toks = tokenizer.encode(doc);
      if (toks.empty()) continue;
      if (toks.size() > cfg.seq_len - 2) toks.resize(cfg.seq_len - 2);
      std::vector<TokenId> s{sp.bos};
      s.insert(s.end(), toks.begin(), toks.end());
      s.push_back(sp.eos);
      seqs.push_back(std::move(s));
    }
  } else {
    std::vector<TokenId> stream;
    for (const auto& doc : documents) {
      auto toks = tokenizer.encode(doc);
      if (toks.empty()) continue;
      stream.insert(stream.end(), toks.begin(), toks.end());
      stream.push_back(sp.eos);
    }
    const std::size_t window = cfg.seq_len - 1;
    for (std::size_t start = 0; start < stream.size(); start += window) {
      std::vector<TokenId> s{sp.bos};
      const std::size_t end = std::min(stream.size(), start + window);
      s.insert(s.end(), stream.begin() + static_cast<std::ptrdiff_t>(start),
               stream.begin() + static_cast<std::ptrdiff_t>(end));
      seqs.push_back(std::move(s));
    }
  }
  return from_sequences(std::move(seqs), sp.pad);
}

TrainingData TrainingData::from_sequences(std::vector<std::vector<TokenId>> sequences, TokenId pad) {
  TrainingData d;
  for (auto& s : sequences)
    if (!s.empty()) d.sequences_.push_back(std::move(s));
  d.pad_ = pad;
  return d;
}

std::size_t TrainingData::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences_) n += s.size();
  return n;
}

Batch TrainingData::batch(std::size_t step, std::size_t batch_size, std::uint64_t seed) const {
  if (sequences_.empty()) throw DataError("training data is empty");
  const std::size_t n = sequences_.size();
  Batch out;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  std::size_t longest = 0;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t g = step * batch_size + b;
    const std::size_t epoch = g / n;
    if (epoch != cached_epoch) {
      order = epoch_order(n, seed, epoch);
      cached_epoch = epoch;
    }
    out.ids.push_back(sequences_[order[g % n]]);
    longest = std::max(longest, out.ids.back().size());
  }
  for (auto& row : out.ids) {
    std::vector<std::uint8_t> valid(longest, 1);
    std::fill(valid.begin() + static_cast<std::ptrdiff_t>(row.size()), valid.end(), 0);
    row.resize(longest, pad_);
    out.valid.push_back(std::move(valid));
  }
  return out;
}

StepResult train_step(Model& model, const MaskedBatch& batch, AdamState& state, const TrainConfig& cfg,
                      std::size_t step) {
  StepResult result;
  for (const auto& v : batch.valid)
    for (auto x : v) result.tokens += x != 0;
  result.labels = batch.n_labels();
  if (result.labels == 0) return result;

  const auto& params = model.parameters();
  if (state.m.empty()) state = AdamState::zeros_like(params);
  model.zero_grad();
  const double inv = 1.0 / static_cast<double>(result.labels);
  double total = 0.0;
  for (std::size_t b = 0; b < batch.input_ids.size(); ++b) {
    const auto& labels = batch.labels[b];
    if (std::all_of(labels.begin(), labels.end(), [](TokenId t) { return t == kIgnoreIndex; })) continue;
    ForwardOptions opt;
    opt.mode = Mode::kTrain;
    opt.dropout_seed = derive_seed(cfg.seed, "dropout", step * cfg.batch_size + b);
    auto fwd = forward(model, batch.input_ids[b], batch.valid[b], opt);
    Tensor loss = cross_entropy(fwd.logits, labels, kIgnoreIndex, Reduction::kSum);
    total += loss.item();
    backward(scale(loss, inv));
  }
  result.loss = total * inv;

  bool grads_finite = true;
  for (const auto& p : params)
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) grads_finite = false;
  if (!std::isfinite(result.loss) || !grads_finite) {
    std::ostringstream msg;
    msg << "non-finite " << (std::isfinite(result.loss) ? "gradient" : "loss") << " at step " << step
        << ": loss " << result.loss << ", lr " << lr_at(step, cfg) << "\ngradient norms:";
    for (const auto& p : params) {
      double sq = 0.0;
      for (double g : p.tensor.grad()) sq += g * g;
      msg << "\n  " << p.name << " " << std::sqrt(sq);
    }
    throw NumericError(msg.str());
  }
  adamw_step(params, state, cfg.adamw(), lr_at(step, cfg));
  return result;
}

LoopResult train_loop(Model& model, AdamState& state, const TrainingData& data, const SpecialTokens& specials,
                      const TrainConfig& cfg, const LoopOptions& options) {
  cfg.validate();
  if (data.size() < cfg.batch_size) {
    throw DataError("corpus yields " + std::to_string(data.size()) + " sequences, fewer than one batch of " +
                    std::to_string(cfg.batch_size));
  }
  if (state.m.empty()) state = AdamState::zeros_like(model.parameters());
  if (!state.matches(model.parameters())) throw DimensionError("optimizer state does not match model");

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, options.start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot open metrics log " + options.metrics_path);
  }
  std::map<std::string, std::string> extra;
  {
    KeyValueConfig kv;
    write_train_config(cfg, kv);
    extra = kv.values();
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);
  auto checkpoint_path = [&](const std::string& name) {
    return (std::filesystem::path(options.checkpoint_dir) / name).string();
  };

  const MaskingConfig masking{cfg.mask_prob, cfg.mask_token_frac, cfg.random_token_frac};
  LoopResult out;
  for (std::size_t step = options.start_step; step < cfg.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    Batch batch = data.batch(step, cfg.batch_size, cfg.seed);
    MaskedBatch masked =
        mask_batch(batch, masking, specials, model.config().vocab_size, derive_seed(cfg.seed, "masking", step));
    StepResult r = train_step(model, masked, state, cfg, step);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.losses.push_back(r.loss);
    ++out.steps_run;
    if (metrics.is_open()) {
      nlohmann::json row{{"step", step + 1},
                         {"loss", r.loss},
                         {"lr", lr_at(step, cfg)},
                         {"tokens_per_sec", secs > 0.0 ? static_cast<double>(r.tokens) / secs : 0.0}};
      metrics << row.dump() << '\n' << std::flush;
    }
    if (options.on_step) options.on_step(step, r);
    if (!options.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step-%08zu.ckpt", step + 1);
      save_checkpoint(checkpoint_path(name), model, step + 1, &state, extra);
    }
  }
  if (!options.checkpoint_dir.empty()) {
    out.final_checkpoint = checkpoint_path("final.ckpt");
    save_checkpoint(out.final_checkpoint, model, std::max(options.start_step, cfg.max_steps), &state, extra);
  }
  return out;
}

}  // namespace structlm
