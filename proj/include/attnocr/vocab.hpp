// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "attnocr/errors.hpp"

namespace attnocr {

using TokenId = std::int64_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kFirstCharId = 3;

// ---------------------------------------------------------------------------
// UTF-8
// ---------------------------------------------------------------------------

inline std::u32string utf8_decode(std::string_view text) {
  std::u32string out;
  std::size_t i = 0;
  auto fail = [&] { throw FormatError("invalid UTF-8 at byte " + std::to_string(i)); };
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t extra = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      extra = 0, cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      extra = 1, cp = lead & 0x1F;
    } else if ((lead & 0xF0) == 0xE0) {
      extra = 2, cp = lead & 0x0F;
    } else if ((lead & 0xF8) == 0xF0) {
      extra = 3, cp = lead & 0x07;
    } else {
      fail();
    }
    if (i + extra >= text.size()) fail();
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto c = static_cast<unsigned char>(text[i + k]);
      if ((c & 0xC0) != 0x80) fail();
      cp = (cp << 6) | (c & 0x3F);
    }
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string utf8_encode(std::u32string_view text) {
  std::string out;
  for (char32_t cp : text) utf8_append(out, cp);
  return out;
}

/// "U+0061" style label used in error messages and file formats.
inline std::string codepoint_label(char32_t cp) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "U+%04X", static_cast<unsigned>(cp));
  return buf;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/**
 * Bijection between characters and token ids. Ids 0..2 are reserved for
 * PAD, SOS and EOS; the i-th character of the charset gets id 3 + i.
 */
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::u32string charset) : chars_(std::move(charset)) {
    for (std::size_t i = 0; i < chars_.size(); ++i) {
      if (!ids_.emplace(chars_[i], kFirstCharId + static_cast<TokenId>(i)).second) {
        throw FormatError("duplicate character " + codepoint_label(chars_[i]) + " in charset");
      }
    }
  }

  /// Charset file: UTF-8, one character per line (a line holding a single space is the space character).
  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read charset file " + path);
    std::u32string chars;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto cps = utf8_decode(line);
      if (cps.size() != 1) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": expected exactly one character per line");
      }
      chars.push_back(cps[0]);
    }
    return Vocabulary(std::move(chars));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write charset file " + path);
    for (char32_t c : chars_) out << utf8_encode(std::u32string(1, c)) << '\n';
    if (!out) throw IoError("failed writing charset file " + path);
  }

  std::size_t size() const { return chars_.size() + static_cast<std::size_t>(kFirstCharId); }
  const std::u32string& charset() const { return chars_; }
  bool contains(char32_t c) const { return ids_.count(c) != 0; }

  TokenId id(char32_t c) const {
    auto it = ids_.find(c);
    if (it == ids_.end()) throw IndexError("character " + codepoint_label(c) + " is not in the vocabulary");
    return it->second;
  }

  /// [SOS, ids..., EOS]; unknown characters are reported with their position.
  std::vector<TokenId> encode(std::string_view text) const {
    const auto cps = utf8_decode(text);
    std::vector<TokenId> out;
    out.reserve(cps.size() + 2);
    out.push_back(kSos);
    for (std::size_t i = 0; i < cps.size(); ++i) {
      auto it = ids_.find(cps[i]);
      if (it == ids_.end()) {
        throw IndexError("character " + codepoint_label(cps[i]) + " at position " + std::to_string(i) +
                         " is not in the vocabulary");
      }
      out.push_back(it->second);
    }
    out.push_back(kEos);
    return out;
  }

  /// Text for character ids; control tokens (PAD/SOS/EOS) are skipped.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < kFirstCharId) continue;
      const auto idx = static_cast<std::size_t>(id - kFirstCharId);
      if (idx >= chars_.size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
      utf8_append(out, chars_[idx]);
    }
    return out;
  }

  bool operator==(const Vocabulary& other) const { return chars_ == other.chars_; }

 private:
  std::u32string chars_;
  std::unordered_map<char32_t, TokenId> ids_;
};

}  // namespace attnocr
