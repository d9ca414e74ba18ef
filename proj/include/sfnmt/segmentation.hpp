#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sfnmt/bpe.hpp"

namespace sfnmt {

// One source sentence in both granularities.
struct SegmentedSentence {
  std::vector<std::string> words;
  std::vector<int> subwords;   // ids in the BPE vocab, length L_s
  std::vector<int> sub2word;   // word index per subword
  std::vector<int> chars;      // ids in the char vocab, length L_f
  std::vector<int> char2word;  // word index per character
};

// Symmetric boolean adjacency with self-loops plus its symmetric-normalized
// real form.
struct SparseAdjacency {
  std::size_t n = 0;
  std::set<std::pair<int, int>> edges;   // both directions + self-loops
  std::vector<double> normalized;        // dense n*n, D^{-1/2} A D^{-1/2}

  bool adjacent(int i, int j) const { return edges.count({i, j}) > 0; }
};

struct RelPosIndexMatrix {
  static constexpr int kOut = std::numeric_limits<int>::min();

  std::size_t n = 0;
  int k = 3;
  std::vector<int> indices;  // n*n, values in {-k..k} or kOut

  int at(std::size_t i, std::size_t j) const { return indices[i * n + j]; }

  // table row for the model's relative embedding lookup: 0..2k, or -1 for OUT
  int table_row(std::size_t i, std::size_t j) const {
    int v = at(i, j);
    return v == kOut ? -1 : v + k;
  }
};

inline SegmentedSentence segment(const std::vector<std::string>& words,
                                 const BpeModel& bpe, const Vocab& char_vocab) {
  if (words.empty()) throw InputError("segment: empty word list");
  SegmentedSentence s;
  s.words = words;
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (words[w].empty()) throw InputError("segment: empty word");
    for (const auto& sym : bpe.apply(words[w])) {
      s.subwords.push_back(bpe.vocab.id(sym));
      s.sub2word.push_back(static_cast<int>(w));
    }
    for (const auto& c : utf8_chars(words[w])) {
      s.chars.push_back(char_vocab.id(c));
      s.char2word.push_back(static_cast<int>(w));
    }
  }
  return s;
}

inline std::vector<double> normalize_adjacency(
    const std::set<std::pair<int, int>>& edges, std::size_t n) {
  std::vector<double> degree(n, 0.0);
  for (const auto& [i, j] : edges) degree[static_cast<std::size_t>(i)] += 1.0;
  std::vector<double> out(n * n, 0.0);
  for (const auto& [i, j] : edges)
    out[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)] =
        1.0 / std::sqrt(degree[static_cast<std::size_t>(i)] *
                        degree[static_cast<std::size_t>(j)]);
  return out;
}

namespace detail {

// complete graph within each word, plus self-loops
inline SparseAdjacency adjacency_from_word_map(const std::vector<int>& node2word) {
  SparseAdjacency a;
  a.n = node2word.size();
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.n; ++j)
      if (i == j || node2word[i] == node2word[j])
        a.edges.insert({static_cast<int>(i), static_cast<int>(j)});
  a.normalized = normalize_adjacency(a.edges, a.n);
  return a;
}

}  // namespace detail

inline SparseAdjacency build_char_adjacency(const SegmentedSentence& s) {
  return detail::adjacency_from_word_map(s.char2word);
}

inline SparseAdjacency build_subword_adjacency(const SegmentedSentence& s) {
  return detail::adjacency_from_word_map(s.sub2word);
}

// Relative positions restricted to within-word pairs inside window radius k;
// everything else gets the OUT sentinel.
inline RelPosIndexMatrix boundary_relative_indices(const std::vector<int>& node2word,
                                                   int k = 3) {
  if (k < 1) throw ConfigError("boundary_relative_indices: k must be >= 1");
  RelPosIndexMatrix m;
  m.n = node2word.size();
  m.k = k;
  m.indices.assign(m.n * m.n, RelPosIndexMatrix::kOut);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j) {
      long d = static_cast<long>(j) - static_cast<long>(i);
      if (node2word[i] == node2word[j] && d >= -k && d <= k)
        m.indices[i * m.n + j] = static_cast<int>(d);
    }
  return m;
}

inline RelPosIndexMatrix boundary_relative_indices(const SegmentedSentence& s,
                                                   int k = 3) {
  return boundary_relative_indices(s.char2word, k);
}

inline RelPosIndexMatrix vanilla_relative_indices(std::size_t len, int k = 3) {
  if (k < 1) throw ConfigError("vanilla_relative_indices: k must be >= 1");
  RelPosIndexMatrix m;
  m.n = len;
  m.k = k;
  m.indices.assign(len * len, RelPosIndexMatrix::kOut);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j) {
      long d = static_cast<long>(j) - static_cast<long>(i);
      if (d >= -k && d <= k) m.indices[i * len + j] = static_cast<int>(d);
    }
  return m;
}

// Characters-per-word and subwords-per-word histograms.
struct WordLengthStats {
  std::map<std::size_t, std::size_t> char_lengths;
  std::map<std::size_t, std::size_t> subword_lengths;
  std::size_t total_words = 0;
  double fraction_over_5_chars = 0.0;
};

inline WordLengthStats word_length_stats(
    const std::vector<std::vector<std::string>>& corpus, const BpeModel& bpe) {
  WordLengthStats stats;
  std::size_t over5 = 0;
  for (const auto& sent : corpus)
    for (const auto& w : sent) {
      if (w.empty()) continue;
      std::size_t nchars = utf8_chars(w).size();
      ++stats.char_lengths[nchars];
      ++stats.subword_lengths[bpe.apply(w).size()];
      ++stats.total_words;
      if (nchars > 5) ++over5;
    }
  if (stats.total_words > 0)
    stats.fraction_over_5_chars =
        static_cast<double>(over5) / static_cast<double>(stats.total_words);
  return stats;
}

}  // namespace sfnmt
