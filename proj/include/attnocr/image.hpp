// SPDX-License-Identifier: Apache-2.0
//
// 8-bit grayscale images (0 = ink, 255 = background) and the pixel-level
// pipeline: PGM I/O, height normalization, Otsu binarization, 3x3
// morphology, augmentation, connected components and text-line extraction.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "attnocr/errors.hpp"
#include "attnocr/rng.hpp"

namespace attnocr {

inline constexpr std::uint8_t kInk = 0;
inline constexpr std::uint8_t kBackground = 255;

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = kBackground) : width(w), height(h), pixels(w * h, fill) {}
  GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px) : width(w), height(h), pixels(std::move(px)) {
    if (pixels.size() != w * h) {
      throw DimensionError("image " + std::to_string(w) + "x" + std::to_string(h) + " needs " + std::to_string(w * h) +
                           " pixels, got " + std::to_string(pixels.size()));
    }
  }

  bool empty() const { return width == 0 || height == 0; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

struct BoundingBox {
  std::size_t x = 0, y = 0, w = 0, h = 0;

  std::size_t right() const { return x + w; }   // exclusive
  std::size_t bottom() const { return y + h; }  // exclusive
  bool contains(std::size_t px, std::size_t py) const { return px >= x && px < right() && py >= y && py < bottom(); }
  bool operator==(const BoundingBox&) const = default;
};

inline BoundingBox merge(const BoundingBox& a, const BoundingBox& b) {
  const std::size_t x0 = std::min(a.x, b.x), y0 = std::min(a.y, b.y);
  return {x0, y0, std::max(a.right(), b.right()) - x0, std::max(a.bottom(), b.bottom()) - y0};
}

// ---------------------------------------------------------------------------
// PGM (binary P5, maxval 255)
// ---------------------------------------------------------------------------

inline GrayImage decode_pgm(std::string_view bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) { throw FormatError(origin + ": " + what + " at byte " + std::to_string(pos)); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) fail("expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (v > (1u << 30)) fail("dimension too large");
    }
    return v;
  };
  if (bytes.substr(0, 2) != "P5") fail("not a binary PGM (missing P5 magic)");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) fail("zero image dimension");
  if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing header terminator");
  ++pos;
  if (bytes.size() - pos < w * h) fail("truncated pixel data");
  GrayImage img(w, h);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), w * h, img.pixels.begin());
  return img;
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

inline GrayImage read_pgm(const std::string& path) { return decode_pgm(read_file(path), path); }
inline void write_pgm(const std::string& path, const GrayImage& img) { write_file(path, encode_pgm(img)); }

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

/// Bilinear resize with half-pixel centers and edge clamping.
inline GrayImage resize_bilinear(const GrayImage& img, std::size_t out_w, std::size_t out_h) {
  if (img.empty() || out_w == 0 || out_h == 0) throw ContractError("resize of an empty image");
  GrayImage out(out_w, out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = img.at(x0, y0) * (1 - wx) + img.at(x1, y0) * wx;
      const double bot = img.at(x0, y1) * (1 - wx) + img.at(x1, y1) * wx;
      out.at(x, y) = to_byte(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

inline constexpr std::size_t kLineHeight = 64;
inline constexpr std::size_t kMinLineWidth = 8;

/// Height `target`, width round(w·target/h) but at least 8, aspect preserved.
inline GrayImage scale_to_height(const GrayImage& img, std::size_t target = kLineHeight) {
  if (img.empty()) throw ContractError("scale_to_height: empty image");
  if (img.height == target && img.width >= kMinLineWidth) return img;
  const auto w = static_cast<std::size_t>(
      std::llround(static_cast<double>(img.width) * static_cast<double>(target) / static_cast<double>(img.height)));
  return resize_bilinear(img, std::max(kMinLineWidth, w), target);
}

inline GrayImage crop(const GrayImage& img, const BoundingBox& box) {
  if (box.w == 0 || box.h == 0 || box.right() > img.width || box.bottom() > img.height) {
    throw ContractError("crop box outside image");
  }
  GrayImage out(box.w, box.h);
  for (std::size_t y = 0; y < box.h; ++y)
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>((box.y + y) * img.width + box.x), box.w,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y * box.w));
  return out;
}

/// Copies `src` into `dst` with its top-left corner at (x, y); parts outside `dst` are dropped.
inline void paste(GrayImage& dst, const GrayImage& src, std::size_t x, std::size_t y) {
  for (std::size_t sy = 0; sy < src.height && y + sy < dst.height; ++sy)
    for (std::size_t sx = 0; sx < src.width && x + sx < dst.width; ++sx) dst.at(x + sx, y + sy) = src.at(sx, sy);
}

/**
 * Rotation by `degrees` about the image center (positive turns content
 * counterclockwise on screen); bilinear sampling, background outside.
 */
inline GrayImage rotate(const GrayImage& img, double degrees) {
  if (degrees == 0.0) return img;
  const double rad = degrees * std::acos(-1.0) / 180.0, c = std::cos(rad), s = std::sin(rad);
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  auto sample = [&](long x, long y) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) return kBackground;
    return img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  GrayImage out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      // Inverse map: screen-counterclockwise rotation with y pointing down.
      const double sx = c * dx - s * dy + cx, sy = s * dx + c * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const auto x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      const double top = sample(x0, y0) * (1 - wx) + sample(x0 + 1, y0) * wx;
      const double bot = sample(x0, y0 + 1) * (1 - wx) + sample(x0 + 1, y0 + 1) * wx;
      out.at(x, y) = to_byte(top * (1 - wy) + bot * wy);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Otsu
// ---------------------------------------------------------------------------

using Histogram = std::array<std::uint64_t, 256>;

inline Histogram histogram(const GrayImage& img) {
  Histogram h{};
  for (auto p : img.pixels) ++h[p];
  return h;
}

namespace detail {

using u128 = unsigned __int128;

// 192-bit product of a 128-bit and a 64-bit value as (high 64, low 128).
struct U192 {
  std::uint64_t hi;
  u128 lo;
  bool operator<(const U192& o) const { return hi != o.hi ? hi < o.hi : lo < o.lo; }
  bool operator==(const U192&) const = default;
};

inline U192 mul_128_64(u128 a, std::uint64_t b) {
  const u128 lo = static_cast<u128>(static_cast<std::uint64_t>(a)) * b;
  const u128 hi = static_cast<u128>(static_cast<std::uint64_t>(a >> 64)) * b;
  const u128 mid = (lo >> 64) + static_cast<std::uint64_t>(hi);
  const u128 low = (static_cast<u128>(static_cast<std::uint64_t>(mid)) << 64) | static_cast<std::uint64_t>(lo);
  return {static_cast<std::uint64_t>((hi >> 64) + (mid >> 64)), low};
}

}  // namespace detail

/// Pixel count limit that keeps the exact comparison within 192 bits.
inline constexpr std::uint64_t kOtsuMaxPixels = std::uint64_t{1} << 28;

/**
 * Otsu threshold of a histogram: the t maximizing the between-class variance
 * of {v <= t} versus {v > t}, ties to the smallest t, empty classes scoring 0.
 * With N pixels, n0 of them in the lower class and S, S0 the intensity sums,
 *   N²·σ_B²(t) = (N·S0 − n0·S)² / (n0·n1),
 * which is compared across t by exact integer cross-multiplication.
 */
inline int otsu_threshold(const Histogram& hist) {
  std::uint64_t total = 0, sum = 0;
  for (int v = 0; v < 256; ++v) total += hist[v], sum += hist[v] * static_cast<std::uint64_t>(v);
  if (total == 0) throw ContractError("otsu_threshold: empty histogram");
  if (total >= kOtsuMaxPixels) throw ContractError("otsu_threshold: more than 2^28 pixels");
  int best = 0;
  detail::u128 best_num = 0;   // (N·S0 − n0·S)²
  std::uint64_t best_den = 1;  // n0·n1
  std::uint64_t n0 = 0, s0 = 0;
  for (int t = 0; t < 256; ++t) {
    n0 += hist[t];
    s0 += hist[t] * static_cast<std::uint64_t>(t);
    const std::uint64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const detail::u128 a = static_cast<detail::u128>(total) * s0, b = static_cast<detail::u128>(n0) * sum;
    const auto diff = static_cast<std::uint64_t>(a > b ? a - b : b - a);
    const detail::u128 num = static_cast<detail::u128>(diff) * diff;
    const std::uint64_t den = n0 * n1;
    // num/den > best_num/best_den  <=>  num·best_den > best_num·den
    if (detail::mul_128_64(best_num, den) < detail::mul_128_64(num, best_den)) {
      best = t, best_num = num, best_den = den;
    }
  }
  return best;
}

struct OtsuResult {
  int threshold = 0;
  GrayImage binary;
};

inline GrayImage binarize(const GrayImage& img, int threshold) {
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    out.pixels[i] = static_cast<int>(img.pixels[i]) <= threshold ? kInk : kBackground;
  return out;
}

inline OtsuResult otsu(const GrayImage& img) {
  if (img.empty()) throw ContractError("otsu: empty image");
  const int t = otsu_threshold(histogram(img));
  return {t, binarize(img, t)};
}

// ---------------------------------------------------------------------------
// Morphology
// ---------------------------------------------------------------------------

inline bool is_binary(const GrayImage& img) {
  return std::all_of(img.pixels.begin(), img.pixels.end(), [](auto p) { return p == kInk || p == kBackground; });
}

namespace detail {

// 3x3 neighborhood filter over in-bounds pixels; `pick` folds neighbor values.
template <class Pick>
GrayImage filter3x3(const GrayImage& img, Pick pick) {
  GrayImage out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      std::uint8_t v = img.at(x, y);
      for (std::size_t ny = (y ? y - 1 : 0); ny <= std::min(y + 1, img.height - 1); ++ny)
        for (std::size_t nx = (x ? x - 1 : 0); nx <= std::min(x + 1, img.width - 1); ++nx) v = pick(v, img.at(nx, ny));
      out.at(x, y) = v;
    }
  return out;
}

inline std::uint8_t darker(std::uint8_t a, std::uint8_t b) { return std::min(a, b); }
inline std::uint8_t lighter(std::uint8_t a, std::uint8_t b) { return std::max(a, b); }

}  // namespace detail

/// Grows ink: a pixel becomes ink when any 3x3 neighbor is ink.
inline GrayImage dilate(const GrayImage& binary, std::size_t iterations = 1) {
  if (!is_binary(binary)) throw ContractError("dilate: input is not binary (values other than 0 and 255)");
  GrayImage out = binary;
  for (std::size_t i = 0; i < iterations; ++i) out = detail::filter3x3(out, detail::darker);
  return out;
}

/// Shrinks ink: a pixel stays ink only when every in-bounds 3x3 neighbor is ink.
inline GrayImage erode(const GrayImage& binary, std::size_t iterations = 1) {
  if (!is_binary(binary)) throw ContractError("erode: input is not binary (values other than 0 and 255)");
  GrayImage out = binary;
  for (std::size_t i = 0; i < iterations; ++i) out = detail::filter3x3(out, detail::lighter);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

enum class Morph { none, erode, dilate };

struct AugmentSpec {
  double speckle_prob = 0.0;
  Morph morph = Morph::none;
  double rotate_deg = 0.0;

  bool neutral() const { return speckle_prob == 0.0 && morph == Morph::none && rotate_deg == 0.0; }
  bool operator==(const AugmentSpec&) const = default;

  void validate() const {
    if (!(speckle_prob >= 0.0 && speckle_prob <= 1.0)) {
      throw ConfigError("speckle probability must lie in [0,1], got " + std::to_string(speckle_prob));
    }
    if (!(std::abs(rotate_deg) <= 10.0)) {
      throw ConfigError("rotation must lie in [-10,10] degrees, got " + std::to_string(rotate_deg));
    }
  }

  /// "speckle=P,morph=none|erode|dilate,rotate=DEG" with any subset of keys, or "none".
  static AugmentSpec parse(std::string_view text) {
    AugmentSpec spec;
    if (text == "none" || text.empty()) return spec;
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t end = std::min(text.find(',', start), text.size());
      const auto item = text.substr(start, end - start);
      const auto eq = item.find('=');
      if (eq == std::string_view::npos) throw ConfigError("augment item '" + std::string(item) + "' lacks '='");
      const std::string key(item.substr(0, eq)), value(item.substr(eq + 1));
      auto number = [&] {
        std::size_t used = 0;
        double v = 0;
        try {
          v = std::stod(value, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != value.size() || value.empty()) throw ConfigError("augment value '" + value + "' is not a number");
        return v;
      };
      if (key == "speckle") {
        spec.speckle_prob = number();
      } else if (key == "rotate") {
        spec.rotate_deg = number();
      } else if (key == "morph") {
        if (value == "none") spec.morph = Morph::none;
        else if (value == "erode") spec.morph = Morph::erode;
        else if (value == "dilate") spec.morph = Morph::dilate;
        else throw ConfigError("augment morph must be none, erode or dilate, got '" + value + "'");
      } else {
        throw ConfigError("unknown augment key '" + key + "'");
      }
      start = end + 1;
    }
    spec.validate();
    return spec;
  }

  std::string to_string() const {
    if (neutral()) return "none";
    char buf[96];
    const char* m = morph == Morph::erode ? "erode" : morph == Morph::dilate ? "dilate" : "none";
    std::snprintf(buf, sizeof buf, "speckle=%.17g,morph=%s,rotate=%.17g", speckle_prob, m, rotate_deg);
    return buf;
  }
};

/**
 * Speckle, then one 3x3 morphological pass, then rotation. Speckle sends a
 * pixel to the opposite extreme (dark -> 255, light -> 0) with probability
 * speckle_prob. On grayscale the ink morphology is a 3x3 min (dilate) or
 * max (erode) filter.
 */
inline GrayImage augment(const GrayImage& img, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  GrayImage out = img;
  if (spec.speckle_prob > 0.0) {
    for (auto& p : out.pixels)
      if (rng.bernoulli(spec.speckle_prob)) p = p < 128 ? kBackground : kInk;
  }
  if (spec.morph == Morph::dilate) out = detail::filter3x3(out, detail::darker);
  if (spec.morph == Morph::erode) out = detail::filter3x3(out, detail::lighter);
  return rotate(out, spec.rotate_deg);
}

// ---------------------------------------------------------------------------
// Connected components and line extraction
// ---------------------------------------------------------------------------

struct Component {
  BoundingBox box;
  std::size_t pixels = 0;
};

/// 8-connected components of ink pixels in a binary image, in raster order of first pixel.
inline std::vector<Component> connected_components(const GrayImage& binary) {
  if (!is_binary(binary)) throw ContractError("connected_components: input is not binary");
  const std::size_t w = binary.width, h = binary.height;
  std::vector<std::uint32_t> label(w * h, 0);
  std::vector<Component> out;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < w * h; ++start) {
    if (binary.pixels[start] != kInk || label[start]) continue;
    out.push_back({});
    const auto id = static_cast<std::uint32_t>(out.size());
    std::size_t x0 = w, y0 = h, x1 = 0, y1 = 0, count = 0;
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t x = p % w, y = p / w;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      ++count;
      for (std::size_t ny = (y ? y - 1 : 0); ny <= std::min(y + 1, h - 1); ++ny)
        for (std::size_t nx = (x ? x - 1 : 0); nx <= std::min(x + 1, w - 1); ++nx) {
          const std::size_t q = ny * w + nx;
          if (binary.pixels[q] == kInk && !label[q]) {
            label[q] = id;
            stack.push_back(q);
          }
        }
    }
    out.back() = {{x0, y0, x1 - x0 + 1, y1 - y0 + 1}, count};
  }
  return out;
}

/// Vertical overlap of two boxes as a fraction of the smaller height.
inline double vertical_overlap(const BoundingBox& a, const BoundingBox& b) {
  const std::size_t top = std::max(a.y, b.y), bottom = std::min(a.bottom(), b.bottom());
  if (bottom <= top) return 0.0;
  return static_cast<double>(bottom - top) / static_cast<double>(std::min(a.h, b.h));
}

/// Unions boxes whose vertical overlap reaches `min_overlap` (transitively); one merged box per group.
inline std::vector<BoundingBox> group_lines(const std::vector<BoundingBox>& boxes, double min_overlap) {
  std::vector<std::size_t> parent(boxes.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t j = i + 1; j < boxes.size(); ++j)
      if (vertical_overlap(boxes[i], boxes[j]) >= min_overlap) parent[find(i)] = find(j);
  std::vector<BoundingBox> merged;
  std::vector<std::size_t> slot(boxes.size(), boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const std::size_t r = find(i);
    if (slot[r] == boxes.size()) {
      slot[r] = merged.size();
      merged.push_back(boxes[i]);
    } else {
      merged[slot[r]] = merge(merged[slot[r]], boxes[i]);
    }
  }
  std::sort(merged.begin(), merged.end(),
            [](const BoundingBox& a, const BoundingBox& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; });
  return merged;
}

struct ExtractOptions {
  std::size_t dilation_iterations = 2;
  double min_overlap = 0.5;
  std::size_t crop_margin = 6;           // added around each merged line box, clipped to the page
  std::size_t min_component_pixels = 0;  // components smaller than this are ignored
};

struct ExtractedLine {
  BoundingBox box;  // crop region on the page
  GrayImage image;  // crop scaled to height 64
};

/**
 * Otsu -> dilation -> 8-connected components -> line grouping -> crops of
 * the original page, top to bottom, each scaled to height 64.
 */
inline std::vector<ExtractedLine> extract_lines(const GrayImage& page, const ExtractOptions& opt = {}) {
  if (page.empty()) return {};
  auto [threshold, binary] = otsu(page);
  (void)threshold;
  const auto grown = dilate(binary, opt.dilation_iterations);
  std::vector<BoundingBox> boxes;
  for (const auto& c : connected_components(grown))
    if (c.pixels >= opt.min_component_pixels) boxes.push_back(c.box);
  std::vector<ExtractedLine> out;
  for (const auto& line : group_lines(boxes, opt.min_overlap)) {
    const std::size_t x0 = line.x >= opt.crop_margin ? line.x - opt.crop_margin : 0;
    const std::size_t y0 = line.y >= opt.crop_margin ? line.y - opt.crop_margin : 0;
    const std::size_t x1 = std::min(page.width, line.right() + opt.crop_margin);
    const std::size_t y1 = std::min(page.height, line.bottom() + opt.crop_margin);
    const BoundingBox box{x0, y0, x1 - x0, y1 - y0};
    out.push_back({box, scale_to_height(crop(page, box))});
  }
  return out;
}

}  // namespace attnocr
