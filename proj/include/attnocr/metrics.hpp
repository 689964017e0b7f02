// SPDX-License-Identifier: Apache-2.0
//
// Recognition metrics: edit distance with an explicit alignment, character
// error rate, sample-level word error rate, perplexity and confusion pairs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attnocr/errors.hpp"
#include "attnocr/vocab.hpp"

namespace attnocr {

enum class EditKind : std::uint8_t { match, substitute, insert, del };

/// One aligned operation turning the reference into the hypothesis.
/// `ref` is unused for insert, `hyp` is unused for delete.
template <class T>
struct EditOp {
  EditKind kind;
  T ref{};
  T hyp{};

  bool operator==(const EditOp&) const = default;
};

template <class T>
struct EditScript {
  std::vector<EditOp<T>> ops;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t reference_length = 0;

  std::size_t distance() const { return substitutions + insertions + deletions; }
};

/**
 * Unit-cost edit distance by dynamic programming, with the optimal alignment.
 * Traceback from the end prefers match, then substitution, then deletion,
 * then insertion, so the script is a deterministic function of the inputs.
 */
template <class T>
EditScript<T> levenshtein(const std::vector<T>& reference, const std::vector<T>& hypothesis) {
  const std::size_t n = reference.size(), m = hypothesis.size(), stride = m + 1;
  std::vector<std::size_t> dp((n + 1) * stride);
  for (std::size_t i = 0; i <= n; ++i) dp[i * stride] = i;
  for (std::size_t j = 0; j <= m; ++j) dp[j] = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = dp[(i - 1) * stride + j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      dp[i * stride + j] = std::min({diag, dp[(i - 1) * stride + j] + 1, dp[i * stride + j - 1] + 1});
    }

  EditScript<T> script;
  script.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = dp[i * stride + j];
    if (i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == dp[(i - 1) * stride + j - 1]) {
      script.ops.push_back({EditKind::match, reference[i - 1], hypothesis[j - 1]});
      --i, --j;
    } else if (i > 0 && j > 0 && here == dp[(i - 1) * stride + j - 1] + 1) {
      script.ops.push_back({EditKind::substitute, reference[i - 1], hypothesis[j - 1]});
      ++script.substitutions;
      --i, --j;
    } else if (i > 0 && here == dp[(i - 1) * stride + j] + 1) {
      script.ops.push_back({EditKind::del, reference[i - 1], T{}});
      ++script.deletions;
      --i;
    } else {
      script.ops.push_back({EditKind::insert, T{}, hypothesis[j - 1]});
      ++script.insertions;
      --j;
    }
  }
  std::reverse(script.ops.begin(), script.ops.end());
  return script;
}

template <class T>
std::size_t edit_distance(const std::vector<T>& reference, const std::vector<T>& hypothesis) {
  return levenshtein(reference, hypothesis).distance();
}

/// Rebuilds the reference from the hypothesis by undoing every operation.
template <class T>
std::vector<T> replay(const EditScript<T>& script, const std::vector<T>& hypothesis) {
  std::vector<T> out;
  std::size_t j = 0;
  for (const auto& op : script.ops) {
    switch (op.kind) {
      case EditKind::match:
      case EditKind::substitute:
        if (j >= hypothesis.size() || hypothesis[j] != op.hyp) throw ContractError("edit script does not fit hypothesis");
        out.push_back(op.ref);
        ++j;
        break;
      case EditKind::insert:
        if (j >= hypothesis.size() || hypothesis[j] != op.hyp) throw ContractError("edit script does not fit hypothesis");
        ++j;
        break;
      case EditKind::del:
        out.push_back(op.ref);
        break;
    }
  }
  if (j != hypothesis.size()) throw ContractError("edit script does not consume the whole hypothesis");
  return out;
}

/// Character error rate (S+I+D)/N of one pair; text is compared by code point.
inline double cer(std::string_view reference, std::string_view hypothesis) {
  const auto ref = utf8_decode(reference), hyp = utf8_decode(hypothesis);
  if (ref.empty()) throw ContractError("CER is undefined for an empty reference");
  const std::vector<char32_t> r(ref.begin(), ref.end()), h(hyp.begin(), hyp.end());
  return static_cast<double>(edit_distance(r, h)) / static_cast<double>(r.size());
}

struct SamplePair {
  std::string reference;
  std::string hypothesis;
};

struct CorpusScores {
  std::size_t edits = 0;
  std::size_t reference_chars = 0;
  std::size_t incorrect = 0;
  std::size_t samples = 0;

  /// Σ edits / Σ reference lengths.
  double cer() const {
    if (reference_chars == 0) throw ContractError("CER is undefined for a corpus with no reference characters");
    return static_cast<double>(edits) / static_cast<double>(reference_chars);
  }
  /// Incorrect samples / samples; a sample is incorrect unless it matches exactly.
  double wer() const {
    if (samples == 0) throw ContractError("WER is undefined for an empty sample list");
    return static_cast<double>(incorrect) / static_cast<double>(samples);
  }

  void add(std::string_view reference, std::string_view hypothesis) {
    const auto ref = utf8_decode(reference), hyp = utf8_decode(hypothesis);
    edits += edit_distance(std::vector<char32_t>(ref.begin(), ref.end()), std::vector<char32_t>(hyp.begin(), hyp.end()));
    reference_chars += ref.size();
    incorrect += reference != hypothesis;
    ++samples;
  }
};

inline CorpusScores score_corpus(const std::vector<SamplePair>& samples) {
  CorpusScores s;
  for (const auto& p : samples) s.add(p.reference, p.hypothesis);
  return s;
}

inline double corpus_cer(const std::vector<SamplePair>& samples) { return score_corpus(samples).cer(); }

inline double wer(const std::vector<SamplePair>& samples) {
  if (samples.empty()) throw ContractError("WER is undefined for an empty sample list");
  std::size_t wrong = 0;
  for (const auto& p : samples) wrong += p.reference != p.hypothesis;
  return static_cast<double>(wrong) / static_cast<double>(samples.size());
}

inline double perplexity(double mean_cross_entropy) { return std::exp(mean_cross_entropy); }

struct ConfusionPair {
  char32_t reference;
  char32_t hypothesis;
  std::size_t count;

  bool operator==(const ConfusionPair&) const = default;
};

/// Substitutions over all aligned pairs, most frequent first, ties by (reference, hypothesis) code.
inline std::vector<ConfusionPair> confusion_pairs(const std::vector<SamplePair>& samples) {
  std::map<std::pair<char32_t, char32_t>, std::size_t> counts;
  for (const auto& p : samples) {
    const auto ref = utf8_decode(p.reference), hyp = utf8_decode(p.hypothesis);
    const auto script =
        levenshtein(std::vector<char32_t>(ref.begin(), ref.end()), std::vector<char32_t>(hyp.begin(), hyp.end()));
    for (const auto& op : script.ops)
      if (op.kind == EditKind::substitute) ++counts[{op.ref, op.hyp}];
  }
  std::vector<ConfusionPair> out;
  for (const auto& [key, n] : counts) out.push_back({key.first, key.second, n});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
  return out;
}

/**
 * Evaluation report:
 *   #summary<TAB>samples<TAB>cer<TAB>wer
 *   index<TAB>reference<TAB>hypothesis<TAB>edits<TAB>correct   (one line per sample)
 *   #confusions
 *   reference<TAB>hypothesis<TAB>count                       (U+XXXX labels)
 */
inline void write_report(std::ostream& out, const std::vector<SamplePair>& samples) {
  const auto scores = score_corpus(samples);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g\t%.17g", scores.cer(), scores.wer());
  out << "#summary\t" << scores.samples << '\t' << buf << '\n';
  out << "index\treference\thypothesis\tedits\tcorrect\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto ref = utf8_decode(samples[i].reference), hyp = utf8_decode(samples[i].hypothesis);
    const auto edits =
        edit_distance(std::vector<char32_t>(ref.begin(), ref.end()), std::vector<char32_t>(hyp.begin(), hyp.end()));
    out << i << '\t' << samples[i].reference << '\t' << samples[i].hypothesis << '\t' << edits << '\t'
        << (samples[i].reference == samples[i].hypothesis ? 1 : 0) << '\n';
  }
  out << "#confusions\n";
  for (const auto& c : confusion_pairs(samples))
    out << codepoint_label(c.reference) << '\t' << codepoint_label(c.hypothesis) << '\t' << c.count << '\n';
}

}  // namespace attnocr
