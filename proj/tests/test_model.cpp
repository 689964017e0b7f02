// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "attnocr/model.hpp"
#include "support/gradcheck.hpp"

using namespace attnocr;
using attnocr::testing::check_gradients;

namespace {

ModelConfig toy_config(std::size_t vocab = 6) {
  ModelConfig c;
  c.encoder.stem_channels = 2;
  c.encoder.gru_hidden = 8;
  c.decoder.gru_hidden = 8;
  c.decoder.attention_dim = 8;
  c.decoder.vocab_size = vocab;
  c.decoder.max_decode_len = 10;
  return c;
}

Tensor random_image(std::size_t width, Rng& rng, std::size_t height = 64) {
  Tensor t({1, height, width});
  for (auto& v : t.mutable_data()) v = rng.uniform();
  return t;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

void fill(Tensor t, double value) {
  for (auto& v : t.mutable_data()) v = value;
}

// Output size of a convolution or pool along one axis.
std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p) { return (in + 2 * p - k) / s + 1; }

void expect_trace_normalized(const AttentionTrace& trace) {
  for (std::size_t i = 0; i < trace.steps; ++i) {
    double total = 0.0;
    for (double a : trace.row(i)) {
      EXPECT_GE(a, 0.0);
      total += a;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and encoder shapes
// ---------------------------------------------------------------------------

TEST(ModelConfig, ValidationRejectsBadValues) {
  auto c = toy_config();
  c.decoder.vocab_size = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.decoder.max_decode_len = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.encoder.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

// Every layer's stride arithmetic, applied step by step, agrees with the closed form.
TEST(Encoder, LengthLawOverAllWidths) {
  const auto c = toy_config();
  for (std::size_t w = 8; w <= 2000; ++w) {
    std::size_t h = 64, x = w;
    h = conv_out(h, 3, 1, 1), x = conv_out(x, 3, 1, 1);  // stem
    h = conv_out(h, 3, 2, 1), x = conv_out(x, 3, 1, 1);  // layer2 first block
    h = conv_out(h, 3, 2, 1), x = conv_out(x, 3, 1, 1);  // layer3 first block
    ASSERT_EQ(h, 16u);
    h = conv_out(h, 8, 8, 0), x = conv_out(x, 8, 6, 0);
    ASSERT_EQ(h, 2u);
    ASSERT_EQ(c.encoder_length(w), x) << w;
    ASSERT_EQ(c.encoder_length(w), (w - 8) / 6 + 1) << w;
  }
}

TEST(Encoder, ActualOutputShapesFollowTheLaw) {
  OcrModel model(toy_config(), 1);
  Rng rng(2);
  for (std::size_t w : {8, 9, 13, 14, 15, 20, 49, 50, 100, 257, 2000}) {
    auto enc = model.encode(random_image(w, rng), Mode::train, rng);
    EXPECT_EQ(enc.states.shape(), (Shape{1, (w - 8) / 6 + 1, 16})) << w;
    EXPECT_EQ(enc.initial_state.shape(), (Shape{1, 8}));
  }
}

TEST(Encoder, DefaultDimensionsShape) {
  ModelConfig c;
  c.decoder.vocab_size = 24;
  OcrModel model(c, 3);
  Rng rng(4);
  auto enc = model.encode(random_image(100, rng), Mode::eval, rng);
  EXPECT_EQ(enc.states.shape(), (Shape{1, 16, 600}));
  EXPECT_EQ(enc.initial_state.shape(), (Shape{1, 300}));
  enc = model.encode(random_image(8, rng), Mode::eval, rng);
  EXPECT_EQ(enc.states.shape(), (Shape{1, 1, 600}));
}

TEST(Encoder, RejectsNarrowOrWrongHeight) {
  OcrModel model(toy_config(), 5);
  Rng rng(6);
  EXPECT_THROW(model.encode(random_image(7, rng), Mode::eval, rng), InputTooNarrowError);
  EXPECT_THROW(model.encode(random_image(20, rng, 32), Mode::eval, rng), ContractError);
}

TEST(Encoder, EvalModeIsDeterministic) {
  OcrModel model(toy_config(), 7);
  Rng rng(8);
  auto img = random_image(30, rng);
  Rng r1(1), r2(2);
  auto a = model.encode(img, Mode::eval, r1);
  auto b = model.encode(img, Mode::eval, r2);
  EXPECT_EQ(a.states.values(), b.states.values());
  EXPECT_EQ(a.initial_state.values(), b.initial_state.values());
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

TEST(Model, StateNamesAreUniqueAndCoverEveryTensor) {
  OcrModel model(toy_config(), 9);
  std::set<std::string> names;
  std::set<const void*> storage;
  for (auto& e : model.state()) {
    EXPECT_TRUE(names.insert(e.name).second) << e.name;
    EXPECT_TRUE(storage.insert(&e.tensor.impl()).second) << e.name;
  }
  EXPECT_TRUE(names.count("encoder.conv1.weight"));
  EXPECT_TRUE(names.count("encoder.layer2.0.downsample.conv.weight"));
  EXPECT_FALSE(names.count("encoder.layer1.0.downsample.conv.weight"));
  EXPECT_TRUE(names.count("encoder.gru.backward.bias_hh"));
  EXPECT_TRUE(names.count("attention.v_a"));
  EXPECT_TRUE(names.count("decoder.fc_out.bias"));
  EXPECT_THROW(model.find_state("nope"), IndexError);
}

// Count assembled per component from the layer shapes, then frozen for V = 24.
TEST(Model, ParameterCountAtDefaultDimensions) {
  ModelConfig c;
  c.decoder.vocab_size = 24;
  OcrModel model(c, 10);
  auto conv = [](std::size_t i, std::size_t o, std::size_t k) { return i * o * k * k; };
  auto bn = [](std::size_t ch) { return 2 * ch; };
  auto block = [&](std::size_t i, std::size_t o, bool down) {
    return conv(i, o, 3) + bn(o) + conv(o, o, 3) + bn(o) + (down ? conv(i, o, 1) + bn(o) : 0);
  };
  auto gru = [](std::size_t in, std::size_t h) { return 3 * h * in + 3 * h * h + 6 * h; };
  const std::size_t v = 24, h = 300, a = 300;
  const std::size_t expected = conv(1, 16, 3) + bn(16) + 2 * block(16, 16, false) + block(16, 32, true) +
                               block(32, 32, false) + block(32, 64, true) + block(64, 64, false) +
                               2 * gru(128, h) + (h * h + h) + (a * h + a * 2 * h + a) + gru(v + 2 * h, h) +
                               ((h + 2 * h + v) * v + v);
  EXPECT_EQ(model.parameter_count(), expected);
  EXPECT_EQ(model.parameter_count(), 2164520u);
}

TEST(Model, SameSeedSameParameters) {
  OcrModel a(toy_config(), 11), b(toy_config(), 11), c(toy_config(), 12);
  auto sa = a.state(), sb = b.state(), sc = c.state();
  bool any_diff = false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].tensor.values(), sb[i].tensor.values());
    any_diff |= sa[i].tensor.values() != sc[i].tensor.values();
  }
  EXPECT_TRUE(any_diff);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

TEST(Attention, SingletonGivesUnitWeight) {
  OcrModel model(toy_config(), 13);
  Rng rng(14);
  auto states = random_tensor({1, 1, 16}, rng);
  auto att = model.attend(random_tensor({1, 8}, rng), states, model.attention_keys(states),
                          std::vector<std::uint8_t>{1});
  EXPECT_EQ(att.weights[0], 1.0);
  EXPECT_EQ(att.context.values(), states.values());
}

TEST(Attention, ZeroProjectionsGiveUniformWeights) {
  OcrModel model(toy_config(), 15);
  fill(model.find_state("attention.W_a"), 0.0);
  fill(model.find_state("attention.U_a"), 0.0);
  Rng rng(16);
  auto states = random_tensor({1, 5, 16}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0};
  auto att = model.attend(random_tensor({1, 8}, rng), states, model.attention_keys(states), mask);
  const std::vector<double> expected{1.0 / 3, 1.0 / 3, 0.0, 1.0 / 3, 0.0};
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(att.weights[j], expected[j], 1e-15);
}

TEST(Attention, MatchesExtendedPrecisionFormula) {
  OcrModel model(toy_config(), 17);
  Rng rng(18);
  const std::size_t t = 6, d = 16, a = 8, hd = 8;
  auto states = random_tensor({1, t, d}, rng);
  auto query = random_tensor({1, hd}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 1};
  auto att = model.attend(query, states, model.attention_keys(states), mask);

  const auto wa = model.find_state("attention.W_a"), ua = model.find_state("attention.U_a"),
             va = model.find_state("attention.v_a");
  std::vector<long double> e(t), alpha(t, 0.0L);
  long double mx = -1e300L, z = 0.0L;
  for (std::size_t j = 0; j < t; ++j) {
    if (!mask[j]) continue;
    long double acc = 0.0L;
    for (std::size_t k = 0; k < a; ++k) {
      long double pre = 0.0L;
      for (std::size_t m = 0; m < hd; ++m) pre += static_cast<long double>(wa[k * hd + m]) * query[m];
      for (std::size_t m = 0; m < d; ++m) pre += static_cast<long double>(ua[k * d + m]) * states[j * d + m];
      acc += static_cast<long double>(va[k]) * std::tanh(pre);
    }
    e[j] = acc;
    mx = std::max(mx, acc);
  }
  for (std::size_t j = 0; j < t; ++j)
    if (mask[j]) z += std::exp(e[j] - mx);
  for (std::size_t j = 0; j < t; ++j)
    if (mask[j]) alpha[j] = std::exp(e[j] - mx) / z;
  for (std::size_t j = 0; j < t; ++j) EXPECT_NEAR(att.weights[j], static_cast<double>(alpha[j]), 1e-10);
  for (std::size_t m = 0; m < d; ++m) {
    long double c = 0.0L;
    for (std::size_t j = 0; j < t; ++j) c += alpha[j] * states[j * d + m];
    EXPECT_NEAR(att.context[m], static_cast<double>(c), 1e-10);
  }
  EXPECT_EQ(att.weights[4], 0.0);
}

TEST(Attention, AllMaskedThrows) {
  OcrModel model(toy_config(), 19);
  Rng rng(20);
  auto states = random_tensor({1, 3, 16}, rng);
  EXPECT_THROW(model.attend(random_tensor({1, 8}, rng), states, model.attention_keys(states),
                            std::vector<std::uint8_t>{0, 0, 0}),
               ContractError);
}

// ---------------------------------------------------------------------------
// Decoder step
// ---------------------------------------------------------------------------

TEST(DecodeStep, ShapesAndNormalization) {
  OcrModel model(toy_config(), 21);
  Rng rng(22);
  auto enc = model.encode(random_image(40, rng), Mode::eval, rng);
  const std::vector<TokenId> prev{kSos};
  auto step = model.decode_step(prev, enc.initial_state, enc, Mode::eval, rng);
  EXPECT_EQ(step.logits.shape(), (Shape{1, 6}));
  EXPECT_EQ(step.state.shape(), (Shape{1, 8}));
  double total = 0.0;
  for (double a : step.weights.data()) total += a;
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(DecodeStep, ZeroClassifierWeightsGiveBias) {
  OcrModel model(toy_config(), 23);
  fill(model.find_state("decoder.fc_out.weight"), 0.0);
  auto bias = model.find_state("decoder.fc_out.bias").mutable_data();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * static_cast<double>(i) - 0.2;
  Rng rng(24);
  for (TokenId prev : {kSos, TokenId{4}}) {
    auto enc = model.encode(random_image(25, rng), Mode::train, rng);
    const std::vector<TokenId> p{prev};
    auto step = model.decode_step(p, enc.initial_state, enc, Mode::train, rng);
    for (std::size_t i = 0; i < bias.size(); ++i) EXPECT_EQ(step.logits[i], bias[i]);
  }
}

TEST(DecodeStep, TokenOutOfRangeThrows) {
  OcrModel model(toy_config(), 25);
  Rng rng(26);
  auto enc = model.encode(random_image(20, rng), Mode::eval, rng);
  EXPECT_THROW(model.decode_step(std::vector<TokenId>{6}, enc.initial_state, enc, Mode::eval, rng), IndexError);
  EXPECT_THROW(model.decode_step(std::vector<TokenId>{-1}, enc.initial_state, enc, Mode::eval, rng), IndexError);
}

TEST(DecodeStep, AttentionGradientMatchesFiniteDifferences) {
  OcrModel model(toy_config(), 27);
  Rng rng(28);
  const auto img = random_image(30, rng);
  std::vector<Tensor> leaves{model.find_state("attention.W_a"), model.find_state("attention.U_a"),
                             model.find_state("attention.v_a")};
  const std::vector<TokenId> prev{3}, target{4};
  auto result = check_gradients(leaves, [&] {
    Rng r(5);
    auto enc = model.encode(img, Mode::eval, r);
    auto step = model.decode_step(prev, enc.initial_state, enc, Mode::eval, r);
    // A second step makes the attention query depend on the decoder state.
    auto next = model.decode_step(target, step.state, enc, Mode::eval, r);
    return add(cross_entropy(step.logits, target, kPad), cross_entropy(next.logits, prev, kPad));
  });
  EXPECT_LT(result.max_rel_error, 1e-4) << result.worst;
}

// ---------------------------------------------------------------------------
// Teacher forcing
// ---------------------------------------------------------------------------

TEST(TeacherForcing, FullyForcedInputsAreTheTarget) {
  OcrModel model(toy_config(), 29);
  Rng rng(30);
  const std::vector<TokenId> target{kSos, 3, 4, 5, 3, kEos};
  auto out = model.forward_teacher_forced(random_image(40, rng), target, 1.0, Mode::train, rng);
  EXPECT_EQ(out.logits.shape(), (Shape{5, 6}));
  EXPECT_EQ(out.inputs, (std::vector<TokenId>{kSos, 3, 4, 5, 3}));
  EXPECT_EQ(out.trace.steps, 5u);
  expect_trace_normalized(out.trace);
}

TEST(TeacherForcing, UnforcedInputsAreArgmaxes) {
  OcrModel model(toy_config(), 31);
  Rng rng(32);
  const std::vector<TokenId> target{kSos, 3, 4, 5, kEos};
  auto out = model.forward_teacher_forced(random_image(40, rng), target, 0.0, Mode::eval, rng);
  EXPECT_EQ(out.inputs[0], kSos);
  const auto argmax = argmax_rows(out.logits);
  for (std::size_t i = 1; i < out.inputs.size(); ++i) EXPECT_EQ(out.inputs[i], static_cast<TokenId>(argmax[i - 1]));
}

TEST(TeacherForcing, FixedSeedIsBitIdentical) {
  OcrModel model(toy_config(), 33);
  Rng rng(34);
  const auto img = random_image(40, rng);
  const std::vector<TokenId> target{kSos, 3, 4, 5, kEos};
  Rng r1(7), r2(7);
  auto a = model.forward_teacher_forced(img, target, 0.5, Mode::train, r1);
  auto b = model.forward_teacher_forced(img, target, 0.5, Mode::train, r2);
  EXPECT_EQ(a.logits.values(), b.logits.values());
  EXPECT_EQ(a.inputs, b.inputs);
}

TEST(TeacherForcing, MalformedTargetsThrow) {
  OcrModel model(toy_config(), 35);
  Rng rng(36);
  const auto img = random_image(20, rng);
  EXPECT_THROW(model.forward_teacher_forced(img, {3, 4, kEos}, 1.0, Mode::eval, rng), ContractError);
  EXPECT_THROW(model.forward_teacher_forced(img, {kSos, 3, 4}, 1.0, Mode::eval, rng), ContractError);
  EXPECT_THROW(model.forward_teacher_forced(img, {kSos, kEos, 3}, 1.0, Mode::eval, rng), ContractError);
  EXPECT_THROW(model.forward_teacher_forced(img, {kSos}, 1.0, Mode::eval, rng), ContractError);
}

// Batching leaves the widest sample's result unchanged and masks each row to its own length.
TEST(TeacherForcing, PaddedBatchMatchesSingleSamples) {
  OcrModel model(toy_config(), 37);
  Rng rng(38);
  const auto a = random_image(44, rng), b = random_image(26, rng);
  std::vector<double> pixels(2 * 64 * 44, 0.0);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 44; ++x) pixels[y * 44 + x] = a[y * 44 + x];
    for (std::size_t x = 0; x < 26; ++x) pixels[64 * 44 + y * 44 + x] = b[y * 26 + x];
  }
  const std::vector<TokenId> ta{kSos, 3, 4, 5, kEos}, tb{kSos, 5, kEos};
  const std::vector<std::size_t> widths{44, 26};
  auto batch = model.forward_teacher_forced(Tensor({2, 1, 64, 44}, pixels), widths,
                                            TokenMatrix::from_sequences({ta, tb}), 1.0, Mode::eval, rng);
  auto sa = model.forward_teacher_forced(a, ta, 1.0, Mode::eval, rng);
  // The widest row sees no padding. The narrower row differs near its right edge, where deeper
  // convolutions read nonzero activations computed over the padding.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t v = 0; v < 6; ++v) EXPECT_NEAR(batch.logits[(i * 2 + 0) * 6 + v], sa.logits[i * 6 + v], 1e-12);
  EXPECT_EQ(batch.traces[1].steps, 2u);
  EXPECT_EQ(batch.traces[1].positions, model.config().encoder_length(26));
}

TEST(SequenceLoss, IgnoresPaddingAndMatchesPerSampleMean) {
  Rng rng(39);
  auto logits = random_tensor({3, 2, 5}, rng);
  const auto targets = TokenMatrix::from_sequences({{kSos, 3, 4, kEos}, {kSos, kEos}});
  auto loss = sequence_loss(logits, targets);
  // Independent evaluation: valid (step,row) pairs are (0,0),(1,0),(2,0),(0,1).
  const std::vector<std::pair<std::size_t, std::size_t>> valid{{0, 0}, {1, 0}, {2, 0}, {0, 1}};
  long double total = 0.0L;
  for (auto [i, r] : valid) {
    const std::size_t base = (i * 2 + r) * 5;
    long double z = 0.0L;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(static_cast<long double>(logits[base + v]));
    total += std::log(z) - logits[base + static_cast<std::size_t>(targets.at(r, i + 1))];
  }
  EXPECT_NEAR(loss.item(), static_cast<double>(total / 4), 1e-12);
}

// ---------------------------------------------------------------------------
// Greedy decoding
// ---------------------------------------------------------------------------

TEST(Greedy, AlwaysEosStopsImmediately) {
  OcrModel model(toy_config(), 40);
  fill(model.find_state("decoder.fc_out.weight"), 0.0);
  model.find_state("decoder.fc_out.bias").mutable_data()[kEos] = 10.0;
  Rng rng(41);
  auto out = model.greedy_decode(random_image(30, rng), 5);
  EXPECT_TRUE(out.tokens.empty());
  EXPECT_EQ(out.trace.steps, 1u);
  EXPECT_FALSE(out.truncated);
}

TEST(Greedy, NeverEosTruncatesAtMaxLen) {
  OcrModel model(toy_config(), 42);
  fill(model.find_state("decoder.fc_out.weight"), 0.0);
  model.find_state("decoder.fc_out.bias").mutable_data()[4] = 10.0;
  Rng rng(43);
  auto out = model.greedy_decode(random_image(30, rng), 3);
  EXPECT_EQ(out.tokens, (std::vector<TokenId>{4, 4, 4}));
  EXPECT_TRUE(out.truncated);
  EXPECT_EQ(out.trace.steps, 3u);
  EXPECT_THROW(model.greedy_decode(random_image(30, rng), 0), ContractError);
}

TEST(Greedy, TraceNormalizedAndDeterministic) {
  OcrModel model(toy_config(), 44);
  Rng rng(45);
  const auto img = random_image(60, rng);
  auto a = model.greedy_decode(img), b = model.greedy_decode(img);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.trace.weights, b.trace.weights);
  EXPECT_EQ(a.trace.positions, model.config().encoder_length(60));
  expect_trace_normalized(a.trace);
  EXPECT_FALSE(a.trace.weights.empty());
}

// ---------------------------------------------------------------------------
// Whole model
// ---------------------------------------------------------------------------

TEST(Model, WholeModelGradientMatchesFiniteDifferences) {
  OcrModel model(toy_config(), 46);
  Rng rng(47);
  const auto img = random_image(20, rng);
  const std::vector<TokenId> target{kSos, 3, 5, 4, kEos};
  auto leaves = model.parameters();
  // Small step keeps ReLU inputs from crossing zero; the floor absorbs roundoff on sub-1e-5 entries.
  auto result = check_gradients(leaves, [&] {
    Rng r(11);  // same dropout masks on every evaluation
    auto out = model.forward_teacher_forced(img, target, 1.0, Mode::train, r);
    const std::vector<TokenId> next(target.begin() + 1, target.end());
    return cross_entropy(out.logits, next, kPad);
  }, 1e-6, 1e-5);
  EXPECT_GT(result.checked, 1000u);
  EXPECT_LT(result.max_rel_error, 1e-4) << result.worst;
}
