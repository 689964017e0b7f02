// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration for the command-line tool.
//
//   # comment
//   train_manifest = data/train/manifest.tsv
//   epochs = 30
//
// Keys are listed in RunConfig::keys(). Unknown keys and malformed values
// are errors. Relative paths resolve against the config file's directory.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "attnocr/errors.hpp"
#include "attnocr/model.hpp"
#include "attnocr/trainer.hpp"

namespace attnocr {

struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;  // optional
  std::filesystem::path output_dir;

  RunConfig() {
    // Desk-scale defaults; the model widths are set explicitly in the config file for other runs.
    model.encoder.stem_channels = 8;
    model.encoder.gru_hidden = 64;
    model.decoder.gru_hidden = 64;
    model.decoder.attention_dim = 64;
  }

  struct Key {
    std::string name;
    std::function<void(RunConfig&, const std::string&)> set;
  };

  static const std::vector<Key>& keys() {
    static const std::vector<Key> table = [] {
      std::vector<Key> k;
      auto size_key = [&](std::string name, auto member) {
        k.push_back({std::move(name), [member](RunConfig& c, const std::string& v) { member(c) = parse_count(v); }});
      };
      auto real_key = [&](std::string name, auto member) {
        k.push_back({std::move(name), [member](RunConfig& c, const std::string& v) { member(c) = parse_real(v); }});
      };
      auto path_key = [&](std::string name, auto member) {
        k.push_back({std::move(name), [member](RunConfig& c, const std::string& v) { member(c) = v; }});
      };
      path_key("train_manifest", [](RunConfig& c) -> std::filesystem::path& { return c.train_manifest; });
      path_key("val_manifest", [](RunConfig& c) -> std::filesystem::path& { return c.val_manifest; });
      path_key("output_dir", [](RunConfig& c) -> std::filesystem::path& { return c.output_dir; });
      real_key("lr0", [](RunConfig& c) -> double& { return c.train.lr0; });
      size_key("lr_halving_period", [](RunConfig& c) -> std::size_t& { return c.train.lr_halving_period; });
      size_key("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
      real_key("tf_ratio", [](RunConfig& c) -> double& { return c.train.tf_ratio; });
      size_key("epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
      k.push_back({"seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_count(v); }});
      real_key("beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
      real_key("beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
      real_key("epsilon", [](RunConfig& c) -> double& { return c.train.epsilon; });
      size_key("checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; });
      real_key("clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; });
      size_key("stem_channels", [](RunConfig& c) -> std::size_t& { return c.model.encoder.stem_channels; });
      size_key("blocks_per_layer", [](RunConfig& c) -> std::size_t& { return c.model.encoder.blocks_per_layer; });
      size_key("encoder_hidden", [](RunConfig& c) -> std::size_t& { return c.model.encoder.gru_hidden; });
      real_key("encoder_dropout", [](RunConfig& c) -> double& { return c.model.encoder.dropout; });
      size_key("decoder_hidden", [](RunConfig& c) -> std::size_t& { return c.model.decoder.gru_hidden; });
      size_key("attention_dim", [](RunConfig& c) -> std::size_t& { return c.model.decoder.attention_dim; });
      real_key("decoder_dropout", [](RunConfig& c) -> double& { return c.model.decoder.dropout; });
      size_key("max_decode_len", [](RunConfig& c) -> std::size_t& { return c.model.decoder.max_decode_len; });
      return k;
    }();
    return table;
  }

  /// Sets one key; throws ConfigError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value) {
    for (const auto& k : keys())
      if (k.name == key) {
        try {
          k.set(*this, value);
        } catch (const ConfigError& e) {
          throw ConfigError("key '" + key + "': " + e.what());
        }
        return;
      }
    throw ConfigError("unknown configuration key '" + key + "'");
  }

  /// Applies "key=value".
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + path.string());
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto text = trim(line.substr(0, line.find('#')));
      if (text.empty()) continue;
      try {
        c.set_assignment(text);
      } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    const auto base = path.parent_path();
    for (auto* p : {&c.train_manifest, &c.val_manifest, &c.output_dir})
      if (!p->empty() && p->is_relative()) *p = base / *p;
    return c;
  }

  /// Checks values and that input manifests exist, before any work starts.
  void validate() const {
    train.validate();
    auto m = model;
    m.decoder.vocab_size = std::max<std::size_t>(m.decoder.vocab_size, 3);
    m.validate();
    if (train_manifest.empty()) throw ConfigError("train_manifest is required");
    if (output_dir.empty()) throw ConfigError("output_dir is required");
    for (const auto* p : {&train_manifest, &val_manifest})
      if (!p->empty() && !std::filesystem::is_regular_file(*p)) throw IoError("manifest not found: " + p->string());
  }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r\n") - a + 1);
  }

  static std::uint64_t parse_count(const std::string& v) {
    if (v.empty() || v.size() > 19 || v.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("'" + v + "' is not a non-negative integer");
    }
    return std::stoull(v);
  }

  static double parse_real(const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || !std::isfinite(d)) throw ConfigError("'" + v + "' is not a finite number");
    return d;
  }
};

}  // namespace attnocr
