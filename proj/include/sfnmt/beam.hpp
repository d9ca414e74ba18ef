#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "sfnmt/model.hpp"

namespace sfnmt {

struct BeamConfig {
  std::size_t beam_size = 4;
  double length_penalty = 0.6;
  std::size_t max_len = 64;

  void validate() const {
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // generated ids, including the terminating </s>
  double logprob = 0.0;
  bool finished = false;
  double score = 0.0;       // length-normalized logprob
};

// (5 + len)^a / 6^a length normalization; len counts generated tokens.
inline double length_normalizer(std::size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

inline double hypothesis_score(double logprob, std::size_t len, double alpha) {
  return logprob / length_normalizer(len, alpha);
}

// Beam search over an arbitrary autoregressive scorer.
// next_logprobs(prefix) returns the log-distribution over the vocabulary for
// the next token given the generated prefix (no <s>). Returns surviving
// hypotheses best-first; a hypothesis that hit max_len without emitting eos
// is returned with finished=false.
template <class NextLogProbs>
std::vector<Hypothesis> beam_search(NextLogProbs&& next_logprobs, int eos_id,
                                    const BeamConfig& cfg) {
  cfg.validate();
  std::vector<Hypothesis> active{Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0; step < cfg.max_len && !active.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : active) {
      std::vector<double> lp = next_logprobs(h.tokens);
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        Hypothesis c = h;
        c.tokens.push_back(static_cast<int>(tok));
        c.logprob += lp[tok];
        c.finished = static_cast<int>(tok) == eos_id;
        c.score = hypothesis_score(c.logprob, c.tokens.size(), cfg.length_penalty);
        candidates.push_back(std::move(c));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) {
                       return a.score > b.score;
                     });
    active.clear();
    for (Hypothesis& c : candidates) {
      if (c.finished) {
        finished.push_back(std::move(c));
      } else if (active.size() < cfg.beam_size) {
        active.push_back(std::move(c));
      }
    }
    // keep only the best finished hypotheses seen so far
    std::stable_sort(finished.begin(), finished.end(),
                     [](const Hypothesis& a, const Hypothesis& b) {
                       return a.score > b.score;
                     });
    if (finished.size() > cfg.beam_size) finished.resize(cfg.beam_size);
    // stop early once no live prefix can beat the worst kept finished score
    if (finished.size() >= cfg.beam_size) {
      double worst = finished.back().score;
      bool viable = false;
      for (const Hypothesis& h : active)
        viable = viable || hypothesis_score(h.logprob, cfg.max_len,
                                            cfg.length_penalty) > worst;
      if (!viable) active.clear();
    }
  }

  std::vector<Hypothesis> out = finished;
  for (Hypothesis& h : active) out.push_back(std::move(h));  // ran out of length
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.score > b.score;
  });
  if (out.size() > cfg.beam_size) out.resize(cfg.beam_size);
  return out;
}

// log-softmax of the final logits row
template <class T>
std::vector<double> last_row_logprobs(const Tensor<T>& logits) {
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  const T* row = logits.data().data() + (rows - 1) * v;
  double mx = static_cast<double>(*std::max_element(row, row + v));
  double z = 0.0;
  for (std::size_t i = 0; i < v; ++i) z += std::exp(static_cast<double>(row[i]) - mx);
  double lz = mx + std::log(z);
  std::vector<double> out(v);
  for (std::size_t i = 0; i < v; ++i) out[i] = static_cast<double>(row[i]) - lz;
  return out;
}

// Model-backed translation of one segmented sentence. The source is encoded
// once; each expansion re-runs the decoder on the full prefix.
template <class T>
std::vector<Hypothesis> beam_translate(Model<T>& m, const SentenceFeatures& f,
                                       const BeamConfig& cfg) {
  Rng rng;  // eval mode: never consulted
  auto enc = encode(m, f, rng, false);
  auto mem = encdec_interaction(m, enc, f);
  auto next = [&](const std::vector<int>& prefix) {
    std::vector<int> tgt_in{Vocab::kBos};
    tgt_in.insert(tgt_in.end(), prefix.begin(), prefix.end());
    std::vector<std::uint8_t> tv(tgt_in.size(), 1);
    auto logits = decode_forward(m, tgt_in, tv, mem, rng, false);
    auto lp = last_row_logprobs(logits);
    lp[Vocab::kPad] = -1e30;  // never emit padding
    lp[Vocab::kBos] = -1e30;
    return lp;
  };
  return beam_search(next, Vocab::kEos, cfg);
}

// teacher-forced total logprob of a fixed token sequence (for oracles/tests)
template <class T>
double sequence_logprob(Model<T>& m, const SentenceFeatures& f,
                        const std::vector<int>& tokens) {
  Rng rng;
  auto enc = encode(m, f, rng, false);
  auto mem = encdec_interaction(m, enc, f);
  double total = 0.0;
  std::vector<int> prefix;
  for (int tok : tokens) {
    std::vector<int> tgt_in{Vocab::kBos};
    tgt_in.insert(tgt_in.end(), prefix.begin(), prefix.end());
    std::vector<std::uint8_t> tv(tgt_in.size(), 1);
    auto logits = decode_forward(m, tgt_in, tv, mem, rng, false);
    total += last_row_logprobs(logits)[static_cast<std::size_t>(tok)];
    prefix.push_back(tok);
  }
  return total;
}

}  // namespace sfnmt
