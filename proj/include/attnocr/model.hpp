// SPDX-License-Identifier: Apache-2.0
//
// Attention-based encoder-decoder for text-line images.
//
//   encoder:   conv3x3(1->C)+BN+ReLU
//              -> layer1: 2 residual blocks, C channels
//              -> layer2: 2 residual blocks, first halves height, C->2C
//              -> layer3: 2 residual blocks, first halves height, 2C->4C
//              -> avg_pool 8x8 stride 8x6 -> dropout2d
//              -> columns as time steps (height folded into features)
//              -> bidirectional GRU: states H, last forward state h_f
//              s0 = tanh(fc(dropout(h_f)))
//   attention: e_j = v_aᵀ tanh(W_a s + U_a H_j); alpha = softmax(e); c = Σ alpha_j H_j
//   decoder:   s' = GRU([onehot(y), c], s); logits = fc_out(dropout([s', c, onehot(y)]))
//
// With a 64-pixel input the convolutional trunk leaves a height of 16, the
// pool reduces that to 2, and a width W becomes floor((W-8)/6)+1 time steps.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attnocr/layers.hpp"
#include "attnocr/vocab.hpp"

namespace attnocr {

struct EncoderConfig {
  std::size_t input_channels = 1;
  std::size_t image_height = 64;
  std::size_t stem_channels = 16;
  std::size_t blocks_per_layer = 2;
  Hw pool_window{8, 8};
  Hw pool_stride{8, 6};
  std::size_t gru_hidden = 300;
  double dropout = 0.2;
};

struct DecoderConfig {
  std::size_t vocab_size = 3;
  std::size_t gru_hidden = 300;
  std::size_t attention_dim = 300;
  double dropout = 0.5;
  std::size_t max_decode_len = 128;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  /// Channels after each residual layer: C, 2C, 4C.
  std::size_t layer_channels(std::size_t layer) const { return encoder.stem_channels << layer; }
  std::size_t trunk_height() const { return encoder.image_height / 4; }
  std::size_t pooled_height() const {
    return (trunk_height() - encoder.pool_window.h) / encoder.pool_stride.h + 1;
  }
  /// Features per encoder time step fed to the GRU.
  std::size_t sequence_features() const { return layer_channels(2) * pooled_height(); }
  std::size_t encoder_state_size() const { return 2 * encoder.gru_hidden; }

  /// Encoder time steps for an image of the given width.
  std::size_t encoder_length(std::size_t width) const {
    if (width < encoder.pool_window.w) {
      throw InputTooNarrowError("image width " + std::to_string(width) + " is narrower than the pooling window " +
                                std::to_string(encoder.pool_window.w));
    }
    return (width - encoder.pool_window.w) / encoder.pool_stride.w + 1;
  }

  void validate() const {
    if (encoder.input_channels != 1) throw ConfigError("input_channels must be 1 (grayscale)");
    if (encoder.stem_channels == 0 || encoder.gru_hidden == 0 || decoder.gru_hidden == 0 ||
        decoder.attention_dim == 0 || encoder.blocks_per_layer == 0) {
      throw ConfigError("layer sizes must be positive");
    }
    if (encoder.image_height % 4 != 0 || trunk_height() < encoder.pool_window.h) {
      throw ConfigError("image height " + std::to_string(encoder.image_height) +
                        " incompatible with two height-halving layers and the pooling window");
    }
    if (decoder.vocab_size < 3) throw ConfigError("vocabulary must include PAD, SOS and EOS");
    if (decoder.max_decode_len < 1) throw ConfigError("max_decode_len must be at least 1");
    if (!(encoder.dropout >= 0 && encoder.dropout < 1) || !(decoder.dropout >= 0 && decoder.dropout < 1)) {
      throw ConfigError("dropout probabilities must lie in [0,1)");
    }
  }
};

/// Attention weights recorded while decoding: one row per decode step.
struct AttentionTrace {
  std::size_t steps = 0;
  std::size_t positions = 0;
  std::vector<double> weights;  // row-major [steps x positions]

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(weights).subspan(i * positions, positions);
  }
  void append(std::span<const double> alpha) {
    if (steps == 0) positions = alpha.size();
    weights.insert(weights.end(), alpha.begin(), alpha.end());
    ++steps;
  }
};

struct EncoderOutput {
  Tensor states;                      // [N, T, 2*enc_hidden]
  Tensor initial_state;               // [N, dec_hidden]
  std::vector<std::size_t> lengths;   // valid steps per sample
  std::vector<std::uint8_t> mask;     // [N*T], 1 = valid position
  Tensor keys;                        // U_a H, [N, T, attention_dim]

  std::size_t batch() const { return lengths.size(); }
  std::size_t steps() const { return states.dim(1); }
};

struct AttendResult {
  Tensor context;  // [N, 2*enc_hidden]
  Tensor weights;  // [N, T]
};

struct StepOutput {
  Tensor logits;   // [N, V]
  Tensor state;    // [N, dec_hidden]
  Tensor weights;  // [N, T]
};

struct TeacherForcedOutput {
  Tensor logits;                        // [L, N, V]; step i predicts target column i+1
  std::vector<AttentionTrace> traces;   // per sample, rows for its own target length
  std::vector<std::vector<TokenId>> inputs;  // per step, the tokens fed to the decoder
};

struct DecodeResult {
  std::vector<TokenId> tokens;  // without SOS/EOS
  AttentionTrace trace;
  bool truncated = false;
};

/// Decoder targets for a batch: row-major [rows x cols], each row SOS ... EOS then PAD.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;

  TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }

  static TokenMatrix from_sequences(const std::vector<std::vector<TokenId>>& seqs) {
    TokenMatrix m;
    m.rows = seqs.size();
    for (const auto& s : seqs) m.cols = std::max(m.cols, s.size());
    m.ids.assign(m.rows * m.cols, kPad);
    for (std::size_t r = 0; r < m.rows; ++r) std::copy(seqs[r].begin(), seqs[r].end(), m.ids.begin() + r * m.cols);
    return m;
  }
};

class OcrModel {
 public:
  OcrModel() = default;

  OcrModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const auto& enc = config_.encoder;
    const auto& dec = config_.decoder;
    stem_ = Conv2d(enc.input_channels, enc.stem_channels, {3, 3}, {1, 1}, {1, 1}, rng);
    stem_bn_ = BatchNorm2d(enc.stem_channels);
    std::size_t in = enc.stem_channels;
    for (std::size_t layer = 0; layer < 3; ++layer) {
      const std::size_t out = config_.layer_channels(layer);
      for (std::size_t b = 0; b < enc.blocks_per_layer; ++b) {
        const Hw stride = (layer > 0 && b == 0) ? Hw{2, 1} : Hw{1, 1};
        layers_[layer].emplace_back(in, out, stride, rng);
        in = out;
      }
    }
    gru_ = BiGRU(config_.sequence_features(), enc.gru_hidden, rng);
    bridge_ = Linear(enc.gru_hidden, dec.gru_hidden, rng);
    const std::size_t ctx = config_.encoder_state_size();
    query_weight_ = uniform_init({dec.attention_dim, dec.gru_hidden}, dec.gru_hidden, rng);
    key_weight_ = uniform_init({dec.attention_dim, ctx}, ctx, rng);
    score_weight_ = uniform_init({dec.attention_dim}, dec.attention_dim, rng);
    decoder_cell_ = GRUCell(dec.vocab_size + ctx, dec.gru_hidden, rng);
    classifier_ = Linear(dec.gru_hidden + ctx + dec.vocab_size, dec.vocab_size, rng);
  }

  const ModelConfig& config() const { return config_; }
  std::size_t vocab_size() const { return config_.decoder.vocab_size; }

  /// Every parameter and buffer under its stable dotted name.
  StateList state() const {
    StateList out;
    stem_.collect("encoder.conv1", out);
    stem_bn_.collect("encoder.bn1", out);
    for (std::size_t layer = 0; layer < 3; ++layer)
      for (std::size_t b = 0; b < layers_[layer].size(); ++b)
        layers_[layer][b].collect("encoder.layer" + std::to_string(layer + 1) + "." + std::to_string(b), out);
    gru_.collect("encoder.gru", out);
    bridge_.collect("encoder.fc", out);
    out.push_back({"attention.W_a", query_weight_, true});
    out.push_back({"attention.U_a", key_weight_, true});
    out.push_back({"attention.v_a", score_weight_, true});
    decoder_cell_.collect("decoder.gru", out);
    classifier_.collect("decoder.fc_out", out);
    return out;
  }

  /// The state tensor registered under `name` (shared handle).
  Tensor find_state(const std::string& name) const {
    for (auto& e : state())
      if (e.name == name) return e.tensor;
    throw IndexError("model has no state tensor named '" + name + "'");
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& e : state())
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  // -------------------------------------------------------------------------

  /**
   * Runs the encoder over `images` [N,1,H,W] (right-padded with background
   * zeros) whose true widths are `widths`. Also precomputes the attention
   * keys U_a H for the decoder.
   */
  EncoderOutput encode(const Tensor& images, std::span<const std::size_t> widths, Mode mode, Rng& rng) const {
    const auto& enc = config_.encoder;
    if (images.rank() != 4 || images.dim(1) != enc.input_channels) {
      throw ContractError("encoder expects [N,1,H,W] images, got " + to_string(images.shape()));
    }
    if (images.dim(2) != enc.image_height) {
      throw ContractError("image height must be " + std::to_string(enc.image_height) + ", got " +
                          std::to_string(images.dim(2)));
    }
    const std::size_t batch = images.dim(0), width = images.dim(3);
    if (widths.size() != batch) throw ContractError("encoder: one width per image required");
    EncoderOutput out;
    const std::size_t steps = config_.encoder_length(width);
    for (auto w : widths) {
      if (w > width) throw ContractError("encoder: true width exceeds padded width");
      out.lengths.push_back(config_.encoder_length(w));
    }

    auto x = relu(stem_bn_(stem_(images), mode));
    for (auto& layer : layers_)
      for (auto& block : layer) x = block(x, mode);
    x = avg_pool2d(x, enc.pool_window, enc.pool_stride);
    x = dropout2d(x, enc.dropout, mode, rng);
    // [N,C,h,T] -> [T,N,C*h]: each column is one time step, height folded into features.
    const std::size_t features = x.dim(1) * x.dim(2);
    auto seq = reshape(permute(x, {3, 0, 1, 2}), {steps, batch, features});
    auto rnn = gru_(seq, out.lengths);
    out.states = rnn.states;
    out.initial_state = tanh(bridge_(dropout(rnn.last_forward, enc.dropout, mode, rng)));
    out.mask.assign(batch * steps, 0);
    for (std::size_t b = 0; b < batch; ++b) std::fill_n(out.mask.begin() + b * steps, out.lengths[b], 1);
    out.keys = attention_keys(out.states);
    return out;
  }

  /// Single image [1,H,W] (or [H,W]) of its own width.
  EncoderOutput encode(const Tensor& image, Mode mode, Rng& rng) const {
    if (image.rank() != 3 && image.rank() != 2) {
      throw ContractError("expected a [1,H,W] image, got " + to_string(image.shape()));
    }
    const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
    const std::vector<std::size_t> widths{w};
    return encode(reshape(image, {1, 1, h, w}), widths, mode, rng);
  }

  Tensor attention_keys(const Tensor& states) const {
    const std::size_t n = states.dim(0), t = states.dim(1);
    return reshape(linear(reshape(states, {n * t, states.dim(2)}), key_weight_, Tensor()),
                   {n, t, config_.decoder.attention_dim});
  }

  /**
   * Additive attention of the previous decoder state `query` [N, dec_hidden]
   * over the encoder states; masked positions get exactly zero weight.
   */
  AttendResult attend(const Tensor& query, const Tensor& states, const Tensor& keys,
                      std::span<const std::uint8_t> mask) const {
    const std::size_t n = states.dim(0), t = states.dim(1), a = config_.decoder.attention_dim;
    if (query.rank() != 2 || query.dim(0) != n) {
      throw DimensionError("attend: query " + to_string(query.shape()) + " vs states " + to_string(states.shape()));
    }
    auto energy = tanh(broadcast_add(keys, linear(query, query_weight_, Tensor()), 1));
    auto scores = reshape(linear(reshape(energy, {n * t, a}), reshape(score_weight_, {1, a}), Tensor()), {n, t});
    auto alpha = masked_softmax(scores, mask);
    return {weighted_sum(alpha, states), alpha};
  }

  AttendResult attend(const Tensor& query, const EncoderOutput& enc) const {
    return attend(query, enc.states, enc.keys, enc.mask);
  }

  /// One decoder step for every row: previous tokens [N], previous state [N, dec_hidden].
  StepOutput decode_step(std::span<const TokenId> previous, const Tensor& state, const EncoderOutput& enc, Mode mode,
                         Rng& rng) const {
    const std::size_t n = enc.batch(), v = vocab_size();
    if (previous.size() != n) throw ContractError("decode_step: one previous token per row required");
    std::vector<double> onehot(n * v, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      if (previous[b] < 0 || static_cast<std::size_t>(previous[b]) >= v) {
        throw IndexError("decode_step: token " + std::to_string(previous[b]) + " outside [0," + std::to_string(v) +
                         ")");
      }
      onehot[b * v + static_cast<std::size_t>(previous[b])] = 1.0;
    }
    Tensor embedded({n, v}, std::move(onehot));
    auto att = attend(state, enc);
    auto next = decoder_cell_(concat({embedded, att.context}, 1), state);
    auto features = dropout(concat({next, att.context, embedded}, 1), config_.decoder.dropout, mode, rng);
    return {classifier_(features), next, att.weights};
  }

  /**
   * Decodes along `targets` for targets.cols - 1 steps. The input at step 0
   * is column 0 (SOS); at each later step a uniform draw decides, for the
   * whole batch, between the ground-truth column (probability tf_ratio) and
   * each row's argmax of the previous logits.
   */
  TeacherForcedOutput forward_teacher_forced(const Tensor& images, std::span<const std::size_t> widths,
                                             const TokenMatrix& targets, double tf_ratio, Mode mode, Rng& rng) const {
    if (targets.rows != images.dim(0)) throw ContractError("teacher forcing: target matrix does not match the image batch");
    check_targets(targets);
    return decode_teacher_forced(encode(images, widths, mode, rng), targets, tf_ratio, mode, rng);
  }

  /// Teacher-forced decoding over an existing encoder output.
  TeacherForcedOutput decode_teacher_forced(const EncoderOutput& enc, const TokenMatrix& targets, double tf_ratio,
                                            Mode mode, Rng& rng) const {
    if (targets.rows != enc.batch()) throw ContractError("teacher forcing: target matrix does not match the image batch");
    const auto target_steps = check_targets(targets);
    const std::size_t steps = targets.cols - 1, n = targets.rows;
    TeacherForcedOutput out;
    out.traces.resize(n);
    std::vector<Tensor> logits;
    std::vector<TokenId> input(n);
    for (std::size_t r = 0; r < n; ++r) input[r] = targets.at(r, 0);
    Tensor state = enc.initial_state;
    for (std::size_t i = 0; i < steps; ++i) {
      if (i > 0) {
        const bool force = rng.uniform() < tf_ratio;
        const auto predicted = argmax_rows(logits.back());
        for (std::size_t r = 0; r < n; ++r)
          input[r] = force ? targets.at(r, i) : static_cast<TokenId>(predicted[r]);
      }
      out.inputs.push_back(input);
      auto step = decode_step(input, state, enc, mode, rng);
      for (std::size_t r = 0; r < n; ++r)
        if (i < target_steps[r])
          out.traces[r].append(step.weights.data().subspan(r * enc.steps(), enc.lengths[r]));
      logits.push_back(step.logits);
      state = step.state;
    }
    out.logits = stack(logits, 0);
    return out;
  }

  /// Single image [1,H,W] and target [SOS, ..., EOS]: logits [L,V] and one trace.
  struct SingleTeacherForced {
    Tensor logits;
    AttentionTrace trace;
    std::vector<TokenId> inputs;
  };

  SingleTeacherForced forward_teacher_forced(const Tensor& image, const std::vector<TokenId>& target, double tf_ratio,
                                             Mode mode, Rng& rng) const {
    if (image.rank() != 3) throw ContractError("expected a [1,H,W] image, got " + to_string(image.shape()));
    const std::size_t h = image.dim(1), w = image.dim(2);
    if (target.size() < 2) throw ContractError("target must contain at least SOS and EOS");
    const std::vector<std::size_t> widths{w};
    auto out = forward_teacher_forced(reshape(image, {1, 1, h, w}), widths, TokenMatrix::from_sequences({target}),
                                      tf_ratio, mode, rng);
    SingleTeacherForced single;
    single.logits = reshape(out.logits, {out.logits.dim(0), vocab_size()});
    single.trace = std::move(out.traces[0]);
    for (const auto& step : out.inputs) single.inputs.push_back(step[0]);
    return single;
  }

  /// Greedy decoding of one [1,H,W] image in eval mode without gradient recording.
  DecodeResult greedy_decode(const Tensor& image, std::size_t max_len) const {
    if (max_len < 1) throw ContractError("max_len must be at least 1");
    NoGradGuard no_grad;
    Rng unused(0);
    return greedy_decode(encode(image, Mode::eval, unused), max_len);
  }

  /// Greedy decoding over an eval-mode encoder output of batch size 1.
  DecodeResult greedy_decode(const EncoderOutput& enc, std::size_t max_len) const {
    if (max_len < 1) throw ContractError("max_len must be at least 1");
    if (enc.batch() != 1) throw ContractError("greedy decoding takes a single image");
    NoGradGuard no_grad;
    Rng unused(0);
    DecodeResult out;
    std::vector<TokenId> token{kSos};
    Tensor state = enc.initial_state;
    for (std::size_t i = 0; i < max_len; ++i) {
      auto step = decode_step(token, state, enc, Mode::eval, unused);
      out.trace.append(step.weights.data().subspan(0, enc.lengths[0]));
      token[0] = static_cast<TokenId>(argmax_rows(step.logits)[0]);
      if (token[0] == kEos) return out;
      out.tokens.push_back(token[0]);
      state = step.state;
    }
    out.truncated = true;
    return out;
  }

  DecodeResult greedy_decode(const Tensor& image) const { return greedy_decode(image, config_.decoder.max_decode_len); }

 private:
  /// Validates SOS ... EOS PAD* framing; returns the decode steps of each row (its EOS column).
  static std::vector<std::size_t> check_targets(const TokenMatrix& targets) {
    if (targets.cols < 2) throw ContractError("teacher forcing: targets need at least SOS and EOS");
    std::vector<std::size_t> target_steps(targets.rows);
    for (std::size_t r = 0; r < targets.rows; ++r) {
      if (targets.at(r, 0) != kSos) throw ContractError("target row " + std::to_string(r) + " must start with SOS");
      std::size_t eos = 0;
      for (std::size_t c = 1; c < targets.cols; ++c)
        if (targets.at(r, c) == kEos) {
          eos = c;
          break;
        }
      if (eos == 0) throw ContractError("target row " + std::to_string(r) + " must end with EOS");
      for (std::size_t c = eos + 1; c < targets.cols; ++c)
        if (targets.at(r, c) != kPad) throw ContractError("target row " + std::to_string(r) + " has tokens after EOS");
      target_steps[r] = eos;
    }
    return target_steps;
  }

  ModelConfig config_;
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::array<std::vector<ResidualBlock>, 3> layers_;
  BiGRU gru_;
  Linear bridge_;
  Tensor query_weight_;  // W_a [attention_dim, dec_hidden]
  Tensor key_weight_;    // U_a [attention_dim, 2*enc_hidden]
  Tensor score_weight_;  // v_a [attention_dim]
  GRUCell decoder_cell_;
  Linear classifier_;
};

/**
 * Mean cross-entropy of teacher-forced logits [L,N,V] against target columns
 * 1..L, ignoring PAD positions.
 */
inline Tensor sequence_loss(const Tensor& logits, const TokenMatrix& targets) {
  const std::size_t steps = logits.dim(0), n = logits.dim(1), v = logits.dim(2);
  if (n != targets.rows || steps + 1 != targets.cols) {
    throw DimensionError("sequence_loss: logits " + to_string(logits.shape()) + " vs targets " +
                         std::to_string(targets.rows) + "x" + std::to_string(targets.cols));
  }
  std::vector<TokenId> flat(steps * n);
  for (std::size_t i = 0; i < steps; ++i)
    for (std::size_t r = 0; r < n; ++r) flat[i * n + r] = targets.at(r, i + 1);
  return cross_entropy(reshape(logits, {steps * n, v}), flat, kPad);
}

}  // namespace attnocr
