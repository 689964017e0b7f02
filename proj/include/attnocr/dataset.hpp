// SPDX-License-Identifier: Apache-2.0
//
// Line-image samples, manifests, padded batches and synthetic corpora.
//
// Manifest file (UTF-8, tab separated):
//   #charset<TAB>charset.txt       path of the charset file, relative to the manifest
//   #split<TAB>train               free-form split tag
//   images/000000_0.pgm<TAB>text    one record per line, image path relative to the manifest
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attnocr/font.hpp"
#include "attnocr/image.hpp"
#include "attnocr/model.hpp"
#include "attnocr/rng.hpp"
#include "attnocr/tensor.hpp"
#include "attnocr/vocab.hpp"

namespace attnocr {

struct ManifestRecord {
  std::string image;  // relative to the manifest directory
  std::string text;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::string charset_file = "charset.txt";
  std::string split;
  std::vector<ManifestRecord> records;
  std::filesystem::path directory;  // where relative paths resolve; not serialized
  Vocabulary vocabulary;            // loaded from charset_file

  std::filesystem::path image_path(std::size_t i) const { return directory / records.at(i).image; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << "#charset\t" << charset_file << '\n';
    if (!split.empty()) out << "#split\t" << split << '\n';
    for (const auto& r : records) {
      if (r.text.find_first_of("\t\n\r") != std::string::npos || r.image.find_first_of("\t\n\r") != std::string::npos) {
        throw FormatError("manifest fields may not contain tabs or line breaks: " + r.image);
      }
      out << r.image << '\t' << r.text << '\n';
    }
    if (!out) throw IoError("failed writing manifest " + path.string());
  }

  /**
   * Parses and validates a manifest: the charset must load, every image must
   * exist and every text must be encodable. The first offending record fails
   * the whole load.
   */
  static Manifest load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest " + path.string());
    Manifest m;
    m.directory = path.parent_path();
    m.charset_file.clear();
    std::string line;
    std::size_t lineno = 0;
    auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError(where() + "expected a tab-separated record");
      const auto key = line.substr(0, tab), value = line.substr(tab + 1);
      if (key == "#charset") {
        m.charset_file = value;
      } else if (key == "#split") {
        m.split = value;
      } else if (!key.empty() && key[0] == '#') {
        throw FormatError(where() + "unknown header '" + key + "'");
      } else {
        if (m.charset_file.empty()) throw FormatError(where() + "record before the #charset header");
        if (m.records.empty()) m.vocabulary = Vocabulary::load((m.directory / m.charset_file).string());
        try {
          m.vocabulary.encode(value);
        } catch (const IndexError& e) {
          throw FormatError(where() + e.what());
        }
        if (!std::filesystem::exists(m.directory / key)) throw IoError(where() + "missing image " + (m.directory / key).string());
        m.records.push_back({key, value});
      }
    }
    if (m.charset_file.empty()) throw FormatError(path.string() + ": missing #charset header");
    if (m.records.empty()) m.vocabulary = Vocabulary::load((m.directory / m.charset_file).string());
    return m;
  }
};

struct TextLineSample {
  GrayImage image;  // height kLineHeight
  std::string text;
  std::vector<TokenId> tokens;  // [SOS, ..., EOS]
};

/// Reads every record of `manifest`, scaling images to the line height.
inline std::vector<TextLineSample> load_samples(const Manifest& manifest) {
  std::vector<TextLineSample> out;
  out.reserve(manifest.records.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    out.push_back({scale_to_height(read_pgm(manifest.image_path(i).string())), r.text, manifest.vocabulary.encode(r.text)});
  }
  return out;
}

/// [1,H,W] tensor with ink 1 and background 0: value (255 - p) / 255.
inline Tensor image_to_tensor(const GrayImage& img) {
  std::vector<double> data(img.pixels.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = (255.0 - img.pixels[i]) / 255.0;
  return Tensor({1, img.height, img.width}, std::move(data));
}

struct Batch {
  std::vector<std::size_t> indices;  // positions in the sample list
  Tensor images;                     // [N,1,H,W_max], background-padded (0) on the right
  std::vector<std::size_t> widths;   // true widths
  TokenMatrix targets;               // rows SOS ... EOS then PAD
  std::vector<std::size_t> target_lengths;   // tokens including SOS and EOS
  std::vector<std::size_t> encoder_lengths;  // valid attention positions per sample
  std::vector<std::uint8_t> mask;            // [N x T_max], 1 = valid position

  std::size_t size() const { return indices.size(); }
};

/// Assembles the samples at `indices` into one padded batch.
inline Batch make_batch(const std::vector<TextLineSample>& samples, const std::vector<std::size_t>& indices,
                        const ModelConfig& geometry = {}) {
  if (indices.empty()) throw ContractError("a batch needs at least one sample");
  Batch b;
  b.indices = indices;
  std::size_t max_w = 0;
  const std::size_t h = samples.at(indices[0]).image.height;
  std::vector<std::vector<TokenId>> seqs;
  for (auto i : indices) {
    const auto& s = samples.at(i);
    if (s.image.height != h) throw ContractError("batch images must share one height");
    max_w = std::max(max_w, s.image.width);
    b.widths.push_back(s.image.width);
    b.encoder_lengths.push_back(geometry.encoder_length(s.image.width));
    seqs.push_back(s.tokens);
    b.target_lengths.push_back(s.tokens.size());
  }
  b.targets = TokenMatrix::from_sequences(seqs);
  b.images = Tensor({indices.size(), 1, h, max_w});
  auto px = b.images.mutable_data();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& img = samples[indices[n]].image;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        px[(n * h + y) * max_w + x] = (255.0 - img.at(x, y)) / 255.0;
  }
  const std::size_t steps = geometry.encoder_length(max_w);
  b.mask.assign(indices.size() * steps, 0);
  for (std::size_t n = 0; n < indices.size(); ++n) std::fill_n(b.mask.begin() + n * steps, b.encoder_lengths[n], 1);
  return b;
}

/// Shuffle windows span this many batches; widths are sorted only within a window.
inline constexpr std::size_t kBucketWindowBatches = 8;

/**
 * Partition of [0, widths.size()) into batches of at most batch_size: a
 * seeded shuffle, then a stable width sort inside each window of
 * kBucketWindowBatches batches, then a shuffle of the batch order.
 */
inline std::vector<std::vector<std::size_t>> plan_batches(const std::vector<std::size_t>& widths, std::size_t batch_size,
                                                          Rng& rng) {
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  std::vector<std::size_t> order(widths.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const std::size_t window = batch_size * kBucketWindowBatches;
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t start = 0; start < order.size(); start += window) {
    const std::size_t stop = std::min(order.size(), start + window);
    const auto at = [&](std::size_t i) { return order.begin() + static_cast<std::ptrdiff_t>(i); };
    std::stable_sort(at(start), at(stop), [&](std::size_t a, std::size_t b) { return widths[a] < widths[b]; });
    for (std::size_t i = start; i < stop; i += batch_size) plan.emplace_back(at(i), at(std::min(stop, i + batch_size)));
  }
  rng.shuffle(plan.begin(), plan.end());
  return plan;
}

inline std::vector<Batch> make_batches(const std::vector<TextLineSample>& samples, std::size_t batch_size, Rng& rng,
                                       const ModelConfig& geometry = {}) {
  std::vector<std::size_t> widths;
  for (const auto& s : samples) widths.push_back(s.image.width);
  std::vector<Batch> out;
  for (const auto& idx : plan_batches(widths, batch_size, rng)) out.push_back(make_batch(samples, idx, geometry));
  return out;
}

/// Uniform random strings over `charset` with lengths in [min_len, max_len].
inline std::vector<std::string> random_texts(std::u32string_view charset, std::size_t count, std::size_t min_len,
                                             std::size_t max_len, Rng& rng) {
  if (charset.empty() || min_len > max_len) throw ContractError("random_texts: empty charset or inverted length range");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::u32string s(min_len + rng.below(max_len - min_len + 1), U' ');
    for (auto& c : s) c = charset[rng.below(charset.size())];
    out.push_back(utf8_encode(s));
  }
  return out;
}

/// Image produced for one (text, spec) record: render, augment, scale to line height.
inline GrayImage synth_line(const std::string& text, const GlyphFont& font, const AugmentSpec& spec, Rng& rng) {
  return scale_to_height(augment(render_text_line(text, font), spec, rng));
}

/**
 * Renders every text under every spec into out_dir/images, writes the
 * vocabulary to out_dir/charset.txt and the manifest to out_dir/manifest.tsv.
 * Record (i, k) uses its own seed derived from one draw of `rng`, so the
 * corpus does not depend on generation order.
 */
inline Manifest synth_corpus(const std::vector<std::string>& texts, const GlyphFont& font,
                             const std::vector<AugmentSpec>& specs, const Vocabulary& vocab, Rng& rng,
                             const std::filesystem::path& out_dir, const std::string& split = "") {
  if (specs.empty()) throw ContractError("synth_corpus needs at least one augmentation spec");
  for (const auto& t : texts) vocab.encode(t);
  const std::uint64_t base = rng.next_u64();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create directory " + (out_dir / "images").string() + ": " + ec.message());
  Manifest m;
  m.split = split;
  m.directory = out_dir;
  m.vocabulary = vocab;
  vocab.save((out_dir / m.charset_file).string());
  char name[64];
  for (std::size_t i = 0; i < texts.size(); ++i)
    for (std::size_t k = 0; k < specs.size(); ++k) {
      Rng record_rng(Rng::derive(base, {i, k}));
      std::snprintf(name, sizeof name, "images/%06zu_%zu.pgm", i, k);
      write_pgm((out_dir / name).string(), synth_line(texts[i], font, specs[k], record_rng));
      m.records.push_back({name, texts[i]});
    }
  m.save(out_dir / "manifest.tsv");
  return m;
}

}  // namespace attnocr
