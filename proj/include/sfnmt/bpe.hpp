#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sfnmt/errors.hpp"

namespace sfnmt {

inline constexpr const char* kContinuationMarker = "@@";

// Splits a UTF-8 string into code points (each returned as a string).
inline std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline bool has_marker(const std::string& sym) {
  return sym.size() >= 2 && sym.compare(sym.size() - 2, 2, kContinuationMarker) == 0;
}

inline std::string strip_marker(const std::string& sym) {
  return has_marker(sym) ? sym.substr(0, sym.size() - 2) : sym;
}

// Dense 0-based token vocabulary; specials occupy the lowest ids.
struct Vocab {
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocab() { for (const char* s : {"<pad>", "<s>", "</s>", "<unk>"}) push(s); }

  int push(const std::string& tok) {
    auto it = token_to_id.find(tok);
    if (it != token_to_id.end()) return it->second;
    int id = static_cast<int>(id_to_token.size());
    id_to_token.push_back(tok);
    token_to_id.emplace(tok, id);
    return id;
  }

  int id(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const { return id_to_token.at(id); }
  std::size_t size() const { return id_to_token.size(); }
};

// Learned byte-pair-encoding model. Non-final subwords of a word carry a
// trailing continuation marker; applying merges in rank order reproduces the
// training-time segmentation deterministically.
struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;
  Vocab vocab;

  static std::vector<std::string> word_to_symbols(const std::string& word) {
    std::vector<std::string> syms = utf8_chars(word);
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) syms[i] += kContinuationMarker;
    return syms;
  }

  static std::string merge_symbols(const std::string& a, const std::string& b) {
    return strip_marker(a) + b;
  }

  // Apply merges in rank order to one word.
  std::vector<std::string> apply(const std::string& word) const {
    std::vector<std::string> syms = word_to_symbols(word);
    for (const auto& [a, b] : merges) {
      for (std::size_t i = 0; i + 1 < syms.size();) {
        if (syms[i] == a && syms[i + 1] == b) {
          syms[i] = merge_symbols(a, b);
          syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
          ++i;
        }
      }
    }
    return syms;
  }
};

// Greedy most-frequent-pair merging; ties broken by lexicographic order of
// the pair for determinism.
inline BpeModel learn_bpe(const std::vector<std::vector<std::string>>& corpus,
                          std::size_t num_merges) {
  if (corpus.empty()) throw InputError("learn_bpe: empty corpus");

  std::map<std::vector<std::string>, std::size_t> word_freq;  // ordered: determinism
  bool any_word = false;
  for (const auto& sent : corpus)
    for (const auto& w : sent) {
      if (w.empty()) continue;
      any_word = true;
      ++word_freq[BpeModel::word_to_symbols(w)];
    }
  if (!any_word) throw InputError("learn_bpe: corpus has no words");

  BpeModel model;
  // all single-character symbols (marked and unmarked) are always in vocab
  std::set<std::string> base_syms;
  for (const auto& [syms, freq] : word_freq)
    for (const auto& s : syms) base_syms.insert(s);

  for (std::size_t round = 0; round < num_merges; ++round) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_freq;
    for (const auto& [syms, freq] : word_freq)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        pair_freq[{syms[i], syms[i + 1]}] += freq;
    if (pair_freq.empty()) break;
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
      if (it->second > best->second) best = it;  // map order breaks ties lexicographically
    const auto [a, b] = best->first;
    model.merges.push_back({a, b});

    std::map<std::vector<std::string>, std::size_t> next;
    for (const auto& [syms, freq] : word_freq) {
      std::vector<std::string> merged = syms;
      for (std::size_t i = 0; i + 1 < merged.size();) {
        if (merged[i] == a && merged[i + 1] == b) {
          merged[i] = BpeModel::merge_symbols(a, b);
          merged.erase(merged.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
          ++i;
        }
      }
      next[merged] += freq;
    }
    word_freq = std::move(next);
  }

  std::set<std::string> final_syms = base_syms;
  for (const auto& [syms, freq] : word_freq)
    for (const auto& s : syms) final_syms.insert(s);
  for (const auto& s : final_syms) model.vocab.push(s);
  return model;
}

// --- persistence: `bpe-v1 <num_merges>`, merge pairs, then `#vocab` ---

inline void save_bpe(const BpeModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for write: " + path);
  out << "bpe-v1 " << model.merges.size() << "\n";
  for (const auto& [a, b] : model.merges) out << a << " " << b << "\n";
  out << "#vocab\n";
  for (std::size_t i = 0; i < model.vocab.size(); ++i)
    out << model.vocab.id_to_token[i] << "\t" << i << "\n";
}

inline BpeModel load_bpe(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path);
  std::string header;
  std::size_t n_merges = 0;
  in >> header >> n_merges;
  if (header != "bpe-v1") throw InputError("bad bpe file header in " + path);
  std::string line;
  std::getline(in, line);
  BpeModel model;
  for (std::size_t i = 0; i < n_merges; ++i) {
    if (!std::getline(in, line)) throw InputError("truncated bpe file: " + path);
    auto sp = line.find(' ');
    model.merges.push_back({line.substr(0, sp), line.substr(sp + 1)});
  }
  if (!std::getline(in, line) || line != "#vocab")
    throw InputError("missing #vocab section in " + path);
  model.vocab = Vocab();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    std::string tok = line.substr(0, tab);
    int id = std::stoi(line.substr(tab + 1));
    if (id < 4) continue;  // specials already present
    int got = model.vocab.push(tok);
    if (got != id) throw InputError("non-dense vocab ids in " + path);
  }
  return model;
}

inline void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for write: " + path);
  for (std::size_t i = 0; i < vocab.size(); ++i)
    out << vocab.id_to_token[i] << "\t" << i << "\n";
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path);
  Vocab vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    std::string tok = line.substr(0, tab);
    int id = std::stoi(line.substr(tab + 1));
    if (id < 4) continue;
    if (vocab.push(tok) != id) throw InputError("non-dense vocab ids in " + path);
  }
  return vocab;
}

// Joins subword ids back into words: continuation-marked symbols glue to the
// following symbol. Special ids are dropped.
inline std::vector<std::string> detokenize_subwords(const std::vector<int>& ids,
                                                    const Vocab& vocab) {
  std::vector<std::string> words;
  std::string pending;
  for (int id : ids) {
    if (id < 4) continue;
    const std::string& tok = vocab.token(id);
    pending += strip_marker(tok);
    if (!has_marker(tok)) {
      words.push_back(pending);
      pending.clear();
    }
  }
  if (!pending.empty()) words.push_back(pending);
  return words;
}

inline Vocab build_char_vocab(const std::vector<std::vector<std::string>>& corpus) {
  std::set<std::string> chars;
  for (const auto& sent : corpus)
    for (const auto& w : sent)
      for (const auto& c : utf8_chars(w)) chars.insert(c);
  Vocab v;
  for (const auto& c : chars) v.push(c);
  return v;
}

}  // namespace sfnmt
