// SPDX-License-Identifier: Apache-2.0
//
// Adam, the step learning-rate schedule, the training loop and evaluation.
//
// Metrics log (tab separated, one header line):
//   epoch  split  loss  perplexity  cer  wer
// `epoch` counts completed epochs from 1; numbers use %.17g; "-" marks a
// value not computed for that split (train rows carry no cer/wer).
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "attnocr/checkpoint.hpp"
#include "attnocr/dataset.hpp"
#include "attnocr/metrics.hpp"
#include "attnocr/model.hpp"

namespace attnocr {

struct TrainConfig {
  double lr0 = 0.001;
  std::size_t lr_halving_period = 10;  // epochs
  std::size_t batch_size = 32;
  double tf_ratio = 0.5;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t checkpoint_every = 0;  // epochs between checkpoints; 0 writes only final.ckpt
  double clip_norm = 0.0;            // global gradient-norm limit; 0 disables clipping

  void validate() const {
    if (!(lr0 > 0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (lr_halving_period < 1) throw ConfigError("lr_halving_period must be at least 1");
    if (!(tf_ratio >= 0 && tf_ratio <= 1)) throw ConfigError("tf_ratio must lie in [0,1]");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0,1)");
    if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
    if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be non-negative");
  }

  std::map<std::string, std::string> to_metadata() const {
    using detail::format_double;
    return {{"lr0", format_double(lr0)},
            {"lr_halving_period", std::to_string(lr_halving_period)},
            {"batch_size", std::to_string(batch_size)},
            {"tf_ratio", format_double(tf_ratio)},
            {"epochs", std::to_string(epochs)},
            {"seed", std::to_string(seed)},
            {"beta1", format_double(beta1)},
            {"beta2", format_double(beta2)},
            {"epsilon", format_double(epsilon)},
            {"checkpoint_every", std::to_string(checkpoint_every)},
            {"clip_norm", format_double(clip_norm)}};
  }
};

/// lr0 · 0.5^floor(epoch / lr_halving_period); epoch counts from 0.
inline double lr_at(std::size_t epoch, const TrainConfig& config) {
  return std::ldexp(config.lr0, -static_cast<int>(epoch / config.lr_halving_period));
}

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;   // per parameter
  std::vector<std::vector<double>> second;  // per parameter, non-negative
};

/**
 * One Adam update with bias correction:
 *   m ← β1 m + (1-β1) g,  v ← β2 v + (1-β2) g²,
 *   w ← w - lr · (m / (1-β1^t)) / (sqrt(v / (1-β2^t)) + ε).
 */
inline void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double epsilon = 1e-8) {
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.numel(), 0.0);
      state.second.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw ContractError("Adam state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw ContractError("parameter " + std::to_string(i) + " has no gradient");
    if (state.first[i].size() != params[i].numel()) throw ContractError("Adam moments do not match parameter shapes");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + epsilon);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before scaling.
inline double clip_gradients(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto p : params)
      for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0;
  std::optional<double> cer;
  std::optional<double> wer;

  double perplexity() const { return attnocr::perplexity(loss); }
};

inline constexpr const char* kMetricsHeader = "epoch\tsplit\tloss\tperplexity\tcer\twer";

inline std::string format_metrics(const MetricsRecord& r) {
  auto num = [](std::optional<double> v) { return v ? detail::format_double(*v) : std::string("-"); };
  return std::to_string(r.epoch) + "\t" + r.split + "\t" + num(r.loss) + "\t" + num(r.perplexity()) + "\t" + num(r.cer) +
         "\t" + num(r.wer);
}

struct EvalResult {
  std::vector<SamplePair> pairs;  // reference, greedy hypothesis
  std::vector<bool> truncated;
  double loss = 0;  // token-weighted mean cross-entropy under full teacher forcing
  CorpusScores scores;
};

/**
 * Per-sample evaluation (batch of one, eval mode, no padding): teacher-forced
 * loss with tf_ratio 1 and a greedy decode.
 */
inline EvalResult evaluate(const OcrModel& model, const Vocabulary& vocab, const std::vector<TextLineSample>& samples) {
  if (samples.empty()) throw ContractError("evaluation needs at least one sample");
  NoGradGuard no_grad;
  Rng unused(0);
  EvalResult out;
  double loss_sum = 0;
  std::size_t tokens = 0;
  for (const auto& s : samples) {
    // One encoder pass serves both the loss and the greedy decode.
    const auto enc = model.encode(image_to_tensor(s.image), Mode::eval, unused);
    const auto targets = TokenMatrix::from_sequences({s.tokens});
    const auto tf = model.decode_teacher_forced(enc, targets, 1.0, Mode::eval, unused);
    const std::size_t n = s.tokens.size() - 1;
    loss_sum += sequence_loss(tf.logits, targets).item() * static_cast<double>(n);
    tokens += n;
    const auto decoded = model.greedy_decode(enc, model.config().decoder.max_decode_len);
    out.pairs.push_back({s.text, vocab.decode(decoded.tokens)});
    out.truncated.push_back(decoded.truncated);
    out.scores.add(s.text, out.pairs.back().hypothesis);
  }
  out.loss = loss_sum / static_cast<double>(tokens);
  return out;
}

struct TrainOptions {
  std::filesystem::path output_dir;  // metrics.tsv and checkpoints; empty writes nothing
  std::ostream* progress = nullptr;  // one human-readable line per epoch
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  OcrModel model;
  AdamState adam;
  std::vector<MetricsRecord> log;
  ModelCheckpoint checkpoint;  // state after the last epoch
};

/// Checkpoint of the model together with its optimizer state and training settings.
inline ModelCheckpoint make_training_checkpoint(const OcrModel& model, const Vocabulary& vocab, const AdamState& adam,
                                                const TrainConfig& config, std::uint64_t epoch, const Rng& rng) {
  auto c = capture(model, vocab);
  c.train = config.to_metadata();
  c.epoch = epoch;
  c.rng_state = rng.state();
  if (adam.step > 0) {
    OptimizerSnapshot snap;
    snap.step = adam.step;
    std::size_t i = 0;
    for (const auto& e : model.state()) {
      if (!e.trainable) continue;
      snap.first_moments.push_back({e.name, e.tensor.shape(), adam.first.at(i)});
      snap.second_moments.push_back({e.name, e.tensor.shape(), adam.second.at(i)});
      ++i;
    }
    c.optimizer = std::move(snap);
  }
  return c;
}

/**
 * Seeded training loop. The model is initialized from derive(seed, {0});
 * epoch e draws its batch order from derive(seed, {1, e}) and its dropout and
 * teacher-forcing decisions from derive(seed, {2, e}), so any epoch can be
 * replayed in isolation. Each epoch logs a train row and, when val_set is
 * non-empty, a val row with loss, perplexity, CER and WER.
 */
inline TrainResult train(const TrainConfig& config, ModelConfig model_config, const Vocabulary& vocab,
                         const std::vector<TextLineSample>& train_set, const std::vector<TextLineSample>& val_set,
                         const TrainOptions& options = {}) {
  config.validate();
  if (train_set.empty()) throw ContractError("training set is empty");
  model_config.decoder.vocab_size = vocab.size();
  model_config.validate();
  for (const auto* set : {&train_set, &val_set})
    for (const auto& s : *set)
      for (auto id : s.tokens)
        if (static_cast<std::size_t>(id) >= vocab.size()) throw ContractError("sample token outside the vocabulary");

  TrainResult result{OcrModel(model_config, Rng::derive(config.seed, {0})), {}, {}, {}};
  auto& model = result.model;
  const auto params = model.parameters();

  std::ofstream metrics;
  if (!options.output_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.output_dir, ec);
    if (ec) throw IoError("cannot create directory " + options.output_dir.string() + ": " + ec.message());
    const auto path = options.output_dir / "metrics.tsv";
    metrics.open(path, std::ios::binary);
    if (!metrics) throw IoError("cannot write " + path.string());
    metrics << kMetricsHeader << '\n';
  }
  auto emit = [&](const MetricsRecord& r) {
    result.log.push_back(r);
    if (metrics.is_open()) metrics << format_metrics(r) << '\n' << std::flush;
    if (options.on_record) options.on_record(r);
  };

  std::vector<std::size_t> widths;
  for (const auto& s : train_set) widths.push_back(s.image.width);
  Rng step_rng(0);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double lr = lr_at(e, config);
    Rng order_rng(Rng::derive(config.seed, {1, e}));
    step_rng.reseed(Rng::derive(config.seed, {2, e}));
    const auto plan = plan_batches(widths, config.batch_size, order_rng);
    double loss_sum = 0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      const auto batch = make_batch(train_set, plan[b], model_config);
      model.zero_grad();
      const auto out = model.forward_teacher_forced(batch.images, batch.widths, batch.targets, config.tf_ratio,
                                                    Mode::train, step_rng);
      const auto loss = sequence_loss(out.logits, batch.targets);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::string ids;
        for (auto i : batch.indices) ids += (ids.empty() ? "" : ",") + std::to_string(i);
        throw NumericError("non-finite loss " + detail::format_double(value) + " in epoch " + std::to_string(e + 1) +
                           ", batch " + std::to_string(b) + " (samples " + ids + ")");
      }
      backward(loss);
      if (config.clip_norm > 0) clip_gradients(params, config.clip_norm);
      adam_step(params, result.adam, lr, config.beta1, config.beta2, config.epsilon);
      std::size_t n = 0;
      for (auto len : batch.target_lengths) n += len - 1;
      loss_sum += value * static_cast<double>(n);
      tokens += n;
    }
    model.zero_grad();
    emit({e + 1, "train", loss_sum / static_cast<double>(tokens), std::nullopt, std::nullopt});
    if (!val_set.empty()) {
      const auto ev = evaluate(model, vocab, val_set);
      emit({e + 1, "val", ev.loss, ev.scores.cer(), ev.scores.wer()});
    }
    if (options.progress) {
      *options.progress << "epoch " << e + 1 << "/" << config.epochs << " lr " << detail::format_double(lr);
      for (auto it = result.log.end() - (val_set.empty() ? 1 : 2); it != result.log.end(); ++it) {
        *options.progress << "  " << it->split << " loss " << detail::format_double(it->loss);
        if (it->cer) *options.progress << " cer " << detail::format_double(*it->cer) << " wer " << detail::format_double(*it->wer);
      }
      *options.progress << '\n' << std::flush;
    }
    const bool last = e + 1 == config.epochs;
    if (!options.output_dir.empty() && config.checkpoint_every > 0 && (e + 1) % config.checkpoint_every == 0 && !last) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", e + 1);
      save_checkpoint((options.output_dir / name).string(),
                      make_training_checkpoint(model, vocab, result.adam, config, e + 1, step_rng));
    }
  }
  result.checkpoint = make_training_checkpoint(model, vocab, result.adam, config, config.epochs, step_rng);
  if (!options.output_dir.empty()) save_checkpoint((options.output_dir / "final.ckpt").string(), result.checkpoint);
  return result;
}

}  // namespace attnocr
