// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container. All integers are unsigned little-endian.
//
//   magic     8 bytes  "ATOCRCKP"
//   version   u32      kCheckpointVersion
//   metadata  u64 byte length, then UTF-8 "key=value\n" lines sorted by key
//   records   u64 count, then per tensor:
//               u64 name length, name bytes, u64 rank, rank x u64 dims,
//               numel x f64 (IEEE-754 binary64, little-endian)
//
// Metadata keys: charset (space-separated hex code points), epoch,
// rng.state (four hex words), model.* (architecture), train.* (free-form
// training settings) and optimizer.step when optimizer state is present.
// Optimizer moments are records named "optimizer.m.<param>" and
// "optimizer.v.<param>". Nothing may follow the last record.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "attnocr/errors.hpp"
#include "attnocr/image.hpp"
#include "attnocr/model.hpp"
#include "attnocr/vocab.hpp"

namespace attnocr {

inline constexpr char kCheckpointMagic[9] = "ATOCRCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedTensor& o) const {
    // Bitwise, so -0.0 and NaN payloads count.
    if (name != o.name || shape != o.shape || values.size() != o.values.size()) return false;
    for (std::size_t i = 0; i < values.size(); ++i)
      if (std::bit_cast<std::uint64_t>(values[i]) != std::bit_cast<std::uint64_t>(o.values[i])) return false;
    return true;
  }
};

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  std::vector<NamedTensor> first_moments;   // one per trainable parameter, parameter names
  std::vector<NamedTensor> second_moments;

  bool operator==(const OptimizerSnapshot&) const = default;
};

struct ModelCheckpoint {
  ModelConfig model;
  std::u32string charset;
  std::map<std::string, std::string> train;  // stored under "train.<key>"
  std::vector<NamedTensor> state;             // model state in enumeration order
  std::optional<OptimizerSnapshot> optimizer;
  std::uint64_t epoch = 0;
  std::array<std::uint64_t, 4> rng_state{};

  bool operator==(const ModelCheckpoint& o) const {
    return model_metadata() == o.model_metadata() && charset == o.charset && train == o.train && state == o.state &&
           optimizer == o.optimizer && epoch == o.epoch && rng_state == o.rng_state;
  }

  std::map<std::string, std::string> model_metadata() const;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex_u64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline std::map<std::string, std::string> ModelCheckpoint::model_metadata() const {
  const auto& e = model.encoder;
  const auto& d = model.decoder;
  using detail::format_double;
  return {
      {"model.encoder.input_channels", std::to_string(e.input_channels)},
      {"model.encoder.image_height", std::to_string(e.image_height)},
      {"model.encoder.stem_channels", std::to_string(e.stem_channels)},
      {"model.encoder.blocks_per_layer", std::to_string(e.blocks_per_layer)},
      {"model.encoder.pool_window_h", std::to_string(e.pool_window.h)},
      {"model.encoder.pool_window_w", std::to_string(e.pool_window.w)},
      {"model.encoder.pool_stride_h", std::to_string(e.pool_stride.h)},
      {"model.encoder.pool_stride_w", std::to_string(e.pool_stride.w)},
      {"model.encoder.gru_hidden", std::to_string(e.gru_hidden)},
      {"model.encoder.dropout", format_double(e.dropout)},
      {"model.decoder.vocab_size", std::to_string(d.vocab_size)},
      {"model.decoder.gru_hidden", std::to_string(d.gru_hidden)},
      {"model.decoder.attention_dim", std::to_string(d.attention_dim)},
      {"model.decoder.dropout", format_double(d.dropout)},
      {"model.decoder.max_decode_len", std::to_string(d.max_decode_len)},
  };
}

/// Snapshot of every state tensor of `model` plus its charset.
inline ModelCheckpoint capture(const OcrModel& model, const Vocabulary& vocab) {
  if (vocab.size() != model.vocab_size()) {
    throw ContractError("vocabulary of " + std::to_string(vocab.size()) + " tokens does not match a model with " +
                        std::to_string(model.vocab_size()));
  }
  ModelCheckpoint c;
  c.model = model.config();
  c.charset = vocab.charset();
  for (const auto& e : model.state()) c.state.push_back({e.name, e.tensor.shape(), e.tensor.values()});
  return c;
}

/// Model whose state equals the checkpoint's; names and shapes must match exactly.
inline OcrModel restore_model(const ModelCheckpoint& c) {
  OcrModel model(c.model, 0);
  auto entries = model.state();
  if (entries.size() != c.state.size()) {
    throw FormatError("checkpoint holds " + std::to_string(c.state.size()) + " state tensors, model expects " +
                      std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = c.state[i];
    auto& dst = entries[i];
    if (src.name != dst.name || src.shape != dst.tensor.shape()) {
      throw FormatError("checkpoint tensor '" + src.name + "' " + to_string(src.shape) + " does not match model tensor '" +
                        dst.name + "' " + to_string(dst.tensor.shape()));
    }
    std::copy(src.values.begin(), src.values.end(), dst.tensor.mutable_data().begin());
  }
  return model;
}

inline std::string encode_checkpoint(const ModelCheckpoint& c) {
  std::string out(kCheckpointMagic, 8);
  auto put_u64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xFF));

  auto meta = c.model_metadata();
  std::string charset;
  for (char32_t cp : c.charset) {
    if (!charset.empty()) charset += ' ';
    char buf[16];
    std::snprintf(buf, sizeof buf, "%X", static_cast<unsigned>(cp));
    charset += buf;
  }
  meta["charset"] = charset;
  meta["epoch"] = std::to_string(c.epoch);
  meta["rng.state"] = detail::hex_u64(c.rng_state[0]) + " " + detail::hex_u64(c.rng_state[1]) + " " +
                      detail::hex_u64(c.rng_state[2]) + " " + detail::hex_u64(c.rng_state[3]);
  for (const auto& [k, v] : c.train) meta["train." + k] = v;
  if (c.optimizer) meta["optimizer.step"] = std::to_string(c.optimizer->step);
  std::string text;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("checkpoint metadata entry '" + k + "' contains a reserved character");
    }
    text += k + "=" + v + "\n";
  }
  put_u64(text.size());
  out += text;

  std::vector<const NamedTensor*> records;
  for (const auto& t : c.state) records.push_back(&t);
  std::vector<NamedTensor> moments;
  if (c.optimizer) {
    for (const auto& t : c.optimizer->first_moments) moments.push_back({"optimizer.m." + t.name, t.shape, t.values});
    for (const auto& t : c.optimizer->second_moments) moments.push_back({"optimizer.v." + t.name, t.shape, t.values});
  }
  for (const auto& t : moments) records.push_back(&t);
  put_u64(records.size());
  for (const auto* t : records) {
    if (numel(t->shape) != t->values.size()) throw ContractError("tensor '" + t->name + "' has inconsistent shape");
    put_u64(t->name.size());
    out += t->name;
    put_u64(t->shape.size());
    for (auto d : t->shape) put_u64(d);
    for (double v : t->values) put_u64(std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline ModelCheckpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "<checkpoint>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError(origin + ": byte " + std::to_string(pos) + ": " + what);
  };
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw fail(std::string("truncated ") + what);
  };
  auto get_u64 = [&](const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  };
  // Caps sizes so a corrupt length cannot trigger a huge allocation before the truncation check.
  auto get_size = [&](const char* what, std::size_t unit) {
    const std::size_t at = pos;
    const auto v = get_u64(what);
    if (v > (bytes.size() - pos) / unit) {
      pos = at;
      throw fail(std::string(what) + " length " + std::to_string(v) + " exceeds the remaining bytes");
    }
    return static_cast<std::size_t>(v);
  };

  need(8, "magic");
  if (bytes.substr(0, 8) != std::string_view(kCheckpointMagic, 8)) throw fail("bad magic, not a checkpoint file");
  pos = 8;
  need(4, "version");
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
  pos += 4;

  const std::size_t meta_len = get_size("metadata", 1);
  const std::size_t meta_start = pos;
  std::map<std::string, std::string> meta;
  {
    std::istringstream in(std::string(bytes.substr(pos, meta_len)));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw fail("metadata line without '='");
      if (!meta.emplace(line.substr(0, eq), line.substr(eq + 1)).second) throw fail("duplicate metadata key");
    }
  }
  pos += meta_len;

  ModelCheckpoint c;
  auto take = [&](const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) {
      pos = meta_start;
      throw fail("missing metadata key '" + key + "'");
    }
    auto v = it->second;
    meta.erase(it);
    return v;
  };
  auto take_count = [&](const std::string& key) -> std::size_t {
    const auto v = take(key);
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      pos = meta_start;
      throw fail("metadata '" + key + "' is not a count");
    }
    return std::stoull(v);
  };
  auto take_double = [&](const std::string& key) {
    const auto v = take(key);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0') {
      pos = meta_start;
      throw fail("metadata '" + key + "' is not a number");
    }
    return d;
  };
  const std::size_t records_pos = pos;
  auto& e = c.model.encoder;
  auto& d = c.model.decoder;
  e.input_channels = take_count("model.encoder.input_channels");
  e.image_height = take_count("model.encoder.image_height");
  e.stem_channels = take_count("model.encoder.stem_channels");
  e.blocks_per_layer = take_count("model.encoder.blocks_per_layer");
  e.pool_window = {take_count("model.encoder.pool_window_h"), take_count("model.encoder.pool_window_w")};
  e.pool_stride = {take_count("model.encoder.pool_stride_h"), take_count("model.encoder.pool_stride_w")};
  e.gru_hidden = take_count("model.encoder.gru_hidden");
  e.dropout = take_double("model.encoder.dropout");
  d.vocab_size = take_count("model.decoder.vocab_size");
  d.gru_hidden = take_count("model.decoder.gru_hidden");
  d.attention_dim = take_count("model.decoder.attention_dim");
  d.dropout = take_double("model.decoder.dropout");
  d.max_decode_len = take_count("model.decoder.max_decode_len");
  c.epoch = take_count("epoch");
  {
    std::istringstream in(take("rng.state"));
    for (auto& w : c.rng_state) {
      std::string word;
      if (!(in >> word) || word.size() != 16 || word.find_first_not_of("0123456789abcdef") != std::string::npos) {
        pos = meta_start;
        throw fail("malformed rng.state");
      }
      w = std::stoull(word, nullptr, 16);
    }
  }
  {
    std::istringstream in(take("charset"));
    std::string word;
    while (in >> word) {
      if (word.size() > 6 || word.find_first_not_of("0123456789ABCDEF") != std::string::npos) {
        pos = meta_start;
        throw fail("malformed charset entry '" + word + "'");
      }
      c.charset.push_back(static_cast<char32_t>(std::stoul(word, nullptr, 16)));
    }
  }
  std::optional<std::uint64_t> opt_step;
  if (meta.count("optimizer.step")) opt_step = take_count("optimizer.step");
  for (const auto& [k, v] : meta) {
    if (k.rfind("train.", 0) != 0) {
      pos = meta_start;
      throw fail("unknown metadata key '" + k + "'");
    }
    c.train[k.substr(6)] = v;
  }
  try {
    c.model.validate();
  } catch (const ConfigError& err) {
    pos = meta_start;
    throw fail(std::string("invalid model configuration: ") + err.what());
  }
  if (c.charset.size() + static_cast<std::size_t>(kFirstCharId) != d.vocab_size) {
    pos = meta_start;
    throw fail("charset size does not match model.decoder.vocab_size");
  }
  pos = records_pos;

  const std::size_t count = get_size("record count", 1);
  OptimizerSnapshot opt;
  for (std::size_t r = 0; r < count; ++r) {
    NamedTensor t;
    const std::size_t name_len = get_size("tensor name", 1);
    t.name = std::string(bytes.substr(pos, name_len));
    pos += name_len;
    const std::size_t rank = get_size("tensor rank", 8);
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank; ++i) {
      t.shape.push_back(get_size("tensor dimension", 1));
      n = t.shape.back() == 0 ? 0 : (n > bytes.size() / t.shape.back() ? bytes.size() : n * t.shape.back());
    }
    if (n > (bytes.size() - pos) / 8) throw fail("truncated values of tensor '" + t.name + "'");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<double>(get_u64("tensor values"));
    if (t.name.rfind("optimizer.m.", 0) == 0) {
      t.name = t.name.substr(12);
      opt.first_moments.push_back(std::move(t));
    } else if (t.name.rfind("optimizer.v.", 0) == 0) {
      t.name = t.name.substr(12);
      opt.second_moments.push_back(std::move(t));
    } else {
      c.state.push_back(std::move(t));
    }
  }
  if (pos != bytes.size()) throw fail("unexpected bytes after the last record");
  if (opt_step) {
    opt.step = *opt_step;
    c.optimizer = std::move(opt);
  } else if (!opt.first_moments.empty() || !opt.second_moments.empty()) {
    throw fail("optimizer moments present without optimizer.step");
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const ModelCheckpoint& c) { write_file(path, encode_checkpoint(c)); }

inline ModelCheckpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

}  // namespace attnocr
