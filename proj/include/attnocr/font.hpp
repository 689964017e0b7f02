// SPDX-License-Identifier: Apache-2.0
//
// Bitmap glyph fonts and single-line text rendering.
//
// Font file (UTF-8 text):
//   font height=H spacing=S margin_x=MX margin_y=MY count=N
//   glyph U+XXXX width=W        (N times)
//   H rows of exactly W characters, '#' for ink and '.' for background
// Blank lines and lines starting with ';' are ignored.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "attnocr/image.hpp"
#include "attnocr/rng.hpp"
#include "attnocr/vocab.hpp"

namespace attnocr {

struct Glyph {
  std::size_t width = 0;
  std::vector<std::uint8_t> ink;  // row-major [height x width], 1 = ink

  bool operator==(const Glyph&) const = default;
};

struct GlyphFont {
  std::size_t height = 48;
  std::size_t spacing = 2;
  std::size_t margin_x = 8;
  std::size_t margin_y = 8;
  std::map<char32_t, Glyph> glyphs;

  bool operator==(const GlyphFont&) const = default;

  bool has(char32_t c) const { return glyphs.count(c) != 0; }

  const Glyph& glyph(char32_t c) const {
    auto it = glyphs.find(c);
    if (it == glyphs.end()) throw IndexError("font has no glyph for character " + codepoint_label(c));
    return it->second;
  }

  std::size_t line_height() const { return height + 2 * margin_y; }

  /// Rendered width: glyph widths plus spacing between glyphs plus both margins.
  std::size_t line_width(std::u32string_view text) const {
    std::size_t w = 2 * margin_x;
    for (std::size_t i = 0; i < text.size(); ++i) w += glyph(text[i]).width + (i ? spacing : 0);
    return w;
  }

  void save(std::ostream& out) const {
    out << "font height=" << height << " spacing=" << spacing << " margin_x=" << margin_x << " margin_y=" << margin_y
        << " count=" << glyphs.size() << '\n';
    for (const auto& [cp, g] : glyphs) {
      out << "glyph " << codepoint_label(cp) << " width=" << g.width << '\n';
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < g.width; ++x) out << (g.ink[y * g.width + x] ? '#' : '.');
        out << '\n';
      }
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write font file " + path);
    save(out);
    if (!out) throw IoError("failed writing font file " + path);
  }

  static GlyphFont load(std::istream& in, const std::string& origin = "<stream>") {
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& what) -> void {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": " + what);
    };
    auto next = [&]() -> bool {
      while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == ';') continue;
        return true;
      }
      return false;
    };
    // Parses "word k1=v1 k2=v2 ..." into a map, requiring the leading word.
    auto fields = [&](const std::string& word) {
      std::istringstream ls(line);
      std::string head, item;
      ls >> head;
      if (head != word) fail("expected '" + word + "'");
      std::map<std::string, std::string> kv;
      if (word == "glyph") {
        ls >> item;
        kv["code"] = item;
      }
      while (ls >> item) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) fail("malformed field '" + item + "'");
        kv[item.substr(0, eq)] = item.substr(eq + 1);
      }
      return kv;
    };
    auto number = [&](const std::map<std::string, std::string>& kv, const std::string& key) -> std::size_t {
      auto it = kv.find(key);
      if (it == kv.end()) fail("missing field '" + key + "'");
      const auto& s = it->second;
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) fail("field '" + key + "' is not a count");
      return std::stoull(s);
    };

    if (!next()) fail("empty font file");
    GlyphFont font;
    const auto header = fields("font");
    font.height = number(header, "height");
    font.spacing = number(header, "spacing");
    font.margin_x = number(header, "margin_x");
    font.margin_y = number(header, "margin_y");
    const std::size_t count = number(header, "count");
    if (font.height == 0) fail("glyph height must be positive");
    for (std::size_t k = 0; k < count; ++k) {
      if (!next()) fail("expected " + std::to_string(count) + " glyphs, found " + std::to_string(k));
      const auto kv = fields("glyph");
      const auto& code = kv.at("code");
      if (code.size() < 3 || code.substr(0, 2) != "U+" || code.find_first_not_of("0123456789ABCDEFabcdef", 2) != std::string::npos) {
        fail("malformed code point '" + code + "'");
      }
      const auto cp = static_cast<char32_t>(std::stoul(code.substr(2), nullptr, 16));
      Glyph g;
      g.width = number(kv, "width");
      if (g.width == 0) fail("glyph width must be positive");
      g.ink.reserve(g.width * font.height);
      for (std::size_t y = 0; y < font.height; ++y) {
        if (!next()) fail("truncated bitmap for " + code);
        if (line.size() != g.width) fail("bitmap row of " + code + " has " + std::to_string(line.size()) + " columns, expected " + std::to_string(g.width));
        for (char c : line) {
          if (c != '#' && c != '.') fail("bitmap rows may only contain '#' and '.'");
          g.ink.push_back(c == '#');
        }
      }
      if (!font.glyphs.emplace(cp, std::move(g)).second) fail("duplicate glyph " + code);
    }
    if (next()) fail("unexpected content after the last glyph");
    return font;
  }

  static GlyphFont load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read font file " + path);
    return load(in, path);
  }
};

/**
 * Glyphs placed left to right with fixed spacing inside the margins, ink 0
 * on background 255. Height is font.height + 2·margin_y.
 */
inline GrayImage render_text_line(std::u32string_view text, const GlyphFont& font) {
  GrayImage img(font.line_width(text), font.line_height());
  std::size_t x = font.margin_x;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto& g = font.glyph(text[i]);
    if (i) x += font.spacing;
    for (std::size_t gy = 0; gy < font.height; ++gy)
      for (std::size_t gx = 0; gx < g.width; ++gx)
        if (g.ink[gy * g.width + gx]) img.at(x + gx, font.margin_y + gy) = kInk;
    x += g.width;
  }
  return img;
}

inline GrayImage render_text_line(std::string_view utf8, const GlyphFont& font) {
  return render_text_line(utf8_decode(utf8), font);
}

struct SyntheticFontOptions {
  std::size_t cols = 3;         // coarse cells across
  std::size_t rows = 8;         // coarse cells down
  std::size_t cell_width = 3;   // pixels
  std::size_t cell_height = 6;  // pixels; rows * cell_height is the glyph height
  double fill = 0.45;           // probability a cell is inked
  std::size_t min_difference = 5;  // cells by which any two glyphs must differ
};

/**
 * Deterministic random block glyphs, one per character of `charset`. Every
 * glyph has ink in its first and last cell rows and columns, so the ink of a
 * rendered non-empty line fills exactly the area inside the margins; glyphs
 * differ pairwise in at least `min_difference` cells.
 */
inline GlyphFont make_synthetic_font(std::u32string_view charset, std::uint64_t seed,
                                     const SyntheticFontOptions& opt = {}) {
  GlyphFont font;
  font.height = opt.rows * opt.cell_height;
  Rng rng(seed);
  std::vector<std::vector<std::uint8_t>> patterns;
  const std::size_t cells = opt.cols * opt.rows;
  auto row_inked = [&](const std::vector<std::uint8_t>& p, std::size_t r) {
    for (std::size_t c = 0; c < opt.cols; ++c)
      if (p[r * opt.cols + c]) return true;
    return false;
  };
  auto col_inked = [&](const std::vector<std::uint8_t>& p, std::size_t c) {
    for (std::size_t r = 0; r < opt.rows; ++r)
      if (p[r * opt.cols + c]) return true;
    return false;
  };
  for (char32_t ch : charset) {
    if (font.has(ch)) throw FormatError("duplicate character " + codepoint_label(ch) + " in font charset");
    std::vector<std::uint8_t> p(cells);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw ContractError("cannot find enough distinct glyph patterns");
      for (auto& v : p) v = rng.bernoulli(opt.fill);
      if (!row_inked(p, 0) || !row_inked(p, opt.rows - 1) || !col_inked(p, 0) || !col_inked(p, opt.cols - 1)) continue;
      bool distinct = true;
      for (const auto& q : patterns) {
        std::size_t diff = 0;
        for (std::size_t i = 0; i < cells; ++i) diff += p[i] != q[i];
        if (diff < opt.min_difference) distinct = false;
      }
      if (distinct) break;
    }
    patterns.push_back(p);
    Glyph g;
    g.width = opt.cols * opt.cell_width;
    g.ink.assign(g.width * font.height, 0);
    for (std::size_t y = 0; y < font.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) g.ink[y * g.width + x] = p[(y / opt.cell_height) * opt.cols + x / opt.cell_width];
    font.glyphs.emplace(ch, std::move(g));
  }
  return font;
}

}  // namespace attnocr
