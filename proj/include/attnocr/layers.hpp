// SPDX-License-Identifier: Apache-2.0
//
// Parameterized building blocks of the encoder and decoder.
//
// Initialization: every weight is drawn uniformly from
// [-1/sqrt(fan_in), +1/sqrt(fan_in)] with the supplied Rng, biases start at
// zero, batch-norm scale at one and shift at zero.
//
// Each layer exposes `collect(prefix, out)` which appends its tensors to a
// StateList under stable dotted names ("conv1.weight", "bn1.running_mean").
// Trainable parameters and persistent buffers share the list and are told
// apart by `StateEntry::trainable`.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnocr/conv.hpp"
#include "attnocr/ops.hpp"
#include "attnocr/rng.hpp"

namespace attnocr {

enum class Mode { train, eval };

struct StateEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using StateList = std::vector<StateEntry>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

inline Tensor trainable_constant(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

// ---------------------------------------------------------------------------

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(uniform_init({out, in}, in, rng)), bias(trainable_constant({out}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, StateList& out) const {
    out.push_back({join_name(prefix, "weight"), weight, true});
    out.push_back({join_name(prefix, "bias"), bias, true});
  }
};

/// Bias-free convolution; a batch norm always follows it in this network.
struct Conv2d {
  Tensor weight;  // [out, in, kh, kw]
  Hw stride{1, 1};
  Hw padding{0, 0};

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, Hw kernel, Hw stride_, Hw padding_, Rng& rng)
      : weight(uniform_init({out, in, kernel.h, kernel.w}, in * kernel.h * kernel.w, rng)),
        stride(stride_),
        padding(padding_) {}

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, stride, padding); }

  void collect(const std::string& prefix, StateList& out) const {
    out.push_back({join_name(prefix, "weight"), weight, true});
  }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma(trainable_constant({channels}, 1.0)),
        beta(trainable_constant({channels}, 0.0)),
        running_mean({channels}, 0.0),
        running_var({channels}, 1.0) {}

  /// Training mode updates the running buffers in place (they are shared handles).
  Tensor operator()(const Tensor& x, Mode mode) const {
    Tensor mean = running_mean, var = running_var;
    return batch_norm2d(x, gamma, beta, mean, var, {mode == Mode::train, momentum, epsilon});
  }

  void collect(const std::string& prefix, StateList& out) const {
    out.push_back({join_name(prefix, "weight"), gamma, true});
    out.push_back({join_name(prefix, "bias"), beta, true});
    out.push_back({join_name(prefix, "running_mean"), running_mean, false});
    out.push_back({join_name(prefix, "running_var"), running_var, false});
  }
};

/**
 * Two 3x3 convolutions with batch norm and a skip connection:
 *   out = relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x))
 * The first convolution carries the block's stride. When the stride is not
 * (1,1) or the channel count changes, the skip path is a 1x1 convolution with
 * the same stride followed by batch norm; otherwise it is the identity.
 */
struct ResidualBlock {
  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  std::optional<Conv2d> down_conv;
  std::optional<BatchNorm2d> down_bn;

  ResidualBlock() = default;
  ResidualBlock(std::size_t in, std::size_t out, Hw stride, Rng& rng)
      : conv1(in, out, {3, 3}, stride, {1, 1}, rng),
        conv2(out, out, {3, 3}, {1, 1}, {1, 1}, rng),
        bn1(out),
        bn2(out) {
    if (stride.h != 1 || stride.w != 1 || in != out) {
      down_conv.emplace(in, out, Hw{1, 1}, stride, Hw{0, 0}, rng);
      down_bn.emplace(out);
    }
  }

  bool downsamples() const { return down_conv.has_value(); }
  std::size_t in_channels() const { return conv1.weight.dim(1); }

  Tensor operator()(const Tensor& x, Mode mode) const {
    const std::size_t channel_axis = x.rank() == 4 ? 1 : 0;
    if (x.rank() < 3 || x.dim(channel_axis) != in_channels()) {
      throw DimensionError("residual block expects " + std::to_string(in_channels()) + " input channels, got " +
                           to_string(x.shape()));
    }
    auto main = relu(bn1(conv1(x), mode));
    main = bn2(conv2(main), mode);
    auto skip = downsamples() ? (*down_bn)((*down_conv)(x), mode) : x;
    return relu(add(main, skip));
  }

  void collect(const std::string& prefix, StateList& out) const {
    conv1.collect(join_name(prefix, "conv1"), out);
    bn1.collect(join_name(prefix, "bn1"), out);
    conv2.collect(join_name(prefix, "conv2"), out);
    bn2.collect(join_name(prefix, "bn2"), out);
    if (downsamples()) {
      down_conv->collect(join_name(prefix, "downsample.conv"), out);
      down_bn->collect(join_name(prefix, "downsample.bn"), out);
    }
  }
};

/**
 * Gated recurrent unit. Gate rows are stacked reset | update | candidate:
 *   r  = σ(W_r x + b_ir + U_r h + b_hr)
 *   u  = σ(W_u x + b_iu + U_u h + b_hu)
 *   n  = tanh(W_n x + b_in + r ⊙ (U_n h + b_hn))
 *   h' = (1 − u) ⊙ n + u ⊙ h
 * Works on single vectors ([in], [hidden]) or row batches ([N,in], [N,hidden]).
 */
struct GRUCell {
  Tensor w_ih;  // [3H, in]
  Tensor w_hh;  // [3H, H]
  Tensor b_ih;  // [3H]
  Tensor b_hh;  // [3H]

  GRUCell() = default;
  GRUCell(std::size_t in, std::size_t hidden, Rng& rng)
      : w_ih(uniform_init({3 * hidden, in}, in, rng)),
        w_hh(uniform_init({3 * hidden, hidden}, hidden, rng)),
        b_ih(trainable_constant({3 * hidden}, 0.0)),
        b_hh(trainable_constant({3 * hidden}, 0.0)) {}

  std::size_t hidden() const { return w_hh.dim(1); }
  std::size_t input_size() const { return w_ih.dim(1); }

  Tensor input_projection(const Tensor& x) const { return linear(x, w_ih, b_ih); }

  Tensor operator()(const Tensor& x, const Tensor& h) const {
    if (x.shape().back() != input_size()) {
      throw DimensionError("GRU cell expects input size " + std::to_string(input_size()) + ", got " +
                           to_string(x.shape()));
    }
    return step_projected(input_projection(x), h);
  }

  /// One step given the precomputed input projection W x + b_i.
  Tensor step_projected(const Tensor& gi, const Tensor& h) const {
    const std::size_t n = hidden();
    if (h.shape().back() != n || gi.shape().back() != 3 * n || gi.rank() != h.rank()) {
      throw DimensionError("GRU cell hidden size " + std::to_string(n) + " incompatible with state " +
                           to_string(h.shape()) + " and gates " + to_string(gi.shape()));
    }
    const std::size_t axis = h.rank() - 1;
    auto gh = linear(h, w_hh, b_hh);
    auto r = sigmoid(add(narrow(gi, axis, 0, n), narrow(gh, axis, 0, n)));
    auto u = sigmoid(add(narrow(gi, axis, n, n), narrow(gh, axis, n, n)));
    auto cand = tanh(add(narrow(gi, axis, 2 * n, n), mul(r, narrow(gh, axis, 2 * n, n))));
    return add(cand, mul(u, sub(h, cand)));
  }

  void collect(const std::string& prefix, StateList& out) const {
    out.push_back({join_name(prefix, "weight_ih"), w_ih, true});
    out.push_back({join_name(prefix, "weight_hh"), w_hh, true});
    out.push_back({join_name(prefix, "bias_ih"), b_ih, true});
    out.push_back({join_name(prefix, "bias_hh"), b_hh, true});
  }
};

struct BiGruOutput {
  Tensor states;        // [N, T, 2H]: forward half then backward half
  Tensor last_forward;  // [N, H]: forward state after each sample's last valid step
};

/**
 * Bidirectional GRU over a time-major batch `seq` [T, N, in]. Sample n is
 * valid for t < lengths[n]; its forward state freezes after its last valid
 * step and its backward pass starts at that step with a zero state. states[n,t]
 * concatenates the forward state after reading inputs 0..t with the backward
 * state after reading inputs lengths[n]-1..t. Entries at t >= lengths[n] are
 * padding and must be masked by the consumer.
 */
struct BiGRU {
  GRUCell forward_cell, backward_cell;

  BiGRU() = default;
  BiGRU(std::size_t in, std::size_t hidden, Rng& rng) : forward_cell(in, hidden, rng), backward_cell(in, hidden, rng) {}

  std::size_t hidden() const { return forward_cell.hidden(); }

  BiGruOutput operator()(const Tensor& seq, std::span<const std::size_t> lengths) const {
    if (seq.rank() != 3) throw DimensionError("BiGRU expects [T,N,in], got " + to_string(seq.shape()));
    const std::size_t steps = seq.dim(0), batch = seq.dim(1), in = seq.dim(2), h = hidden();
    if (lengths.size() != batch) throw ContractError("BiGRU: one length per batch row required");
    for (auto len : lengths)
      if (len == 0 || len > steps) throw ContractError("BiGRU: sequence lengths must lie in [1, T]");

    auto flat = reshape(seq, {steps * batch, in});
    auto gi_f = reshape(forward_cell.input_projection(flat), {steps, batch, 3 * h});
    auto gi_b = reshape(backward_cell.input_projection(flat), {steps, batch, 3 * h});
    auto at = [&](const Tensor& gi, std::size_t t) { return reshape(narrow(gi, 0, t, 1), {batch, 3 * h}); };

    // Rows still inside their sequence at step t take the new state; others keep the old one.
    auto carry = [&](const Tensor& fresh, const Tensor& old, std::size_t t) {
      std::vector<double> keep(batch * h, 1.0);
      bool all = true;
      for (std::size_t b = 0; b < batch; ++b)
        if (t >= lengths[b]) {
          all = false;
          std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(b * h), h, 0.0);
        }
      if (all) return fresh;
      return add(old, mul(Tensor({batch, h}, std::move(keep)), sub(fresh, old)));
    };

    std::vector<Tensor> fwd(steps), bwd(steps);
    Tensor state({batch, h}, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      state = carry(forward_cell.step_projected(at(gi_f, t), state), state, t);
      fwd[t] = state;
    }
    Tensor last = state;
    state = Tensor({batch, h}, 0.0);
    for (std::size_t t = steps; t-- > 0;) {
      state = carry(backward_cell.step_projected(at(gi_b, t), state), state, t);
      bwd[t] = state;
    }
    std::vector<Tensor> rows(steps);
    for (std::size_t t = 0; t < steps; ++t) rows[t] = concat({fwd[t], bwd[t]}, 1);
    return {stack(rows, 1), last};
  }

  /// Unbatched form: seq [T, in] -> states [T, 2H], last forward state [H].
  BiGruOutput operator()(const Tensor& seq) const {
    if (seq.rank() != 2) throw DimensionError("BiGRU expects [T,in], got " + to_string(seq.shape()));
    if (seq.dim(0) == 0) throw ContractError("BiGRU: empty sequence");
    const std::size_t steps = seq.dim(0);
    const std::vector<std::size_t> lengths{steps};
    auto out = (*this)(reshape(seq, {steps, 1, seq.dim(1)}), lengths);
    return {reshape(out.states, {steps, 2 * hidden()}), reshape(out.last_forward, {hidden()})};
  }

  void collect(const std::string& prefix, StateList& out) const {
    forward_cell.collect(join_name(prefix, "forward"), out);
    backward_cell.collect(join_name(prefix, "backward"), out);
  }
};

// ---------------------------------------------------------------------------
// Dropout (inverted: survivors are scaled by 1/(1-p))
// ---------------------------------------------------------------------------

inline void check_drop_probability(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout probability must be in [0,1), got " + std::to_string(p));
}

inline Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  check_drop_probability(p);
  if (mode == Mode::eval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

/// Channel dropout for [C,H,W] or [N,C,H,W]: one Bernoulli draw per (sample, channel).
inline Tensor dropout2d(const Tensor& x, double p, Mode mode, Rng& rng) {
  check_drop_probability(p);
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("dropout2d expects [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
  if (mode == Mode::eval || p == 0.0) return x;
  const std::size_t plane = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (std::size_t start = 0; start < mask.size(); start += plane) {
    const double m = rng.bernoulli(p) ? 0.0 : keep_scale;
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(start), plane, m);
  }
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace attnocr
