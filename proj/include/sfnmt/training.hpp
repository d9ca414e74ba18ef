#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sfnmt/config.hpp"
#include "sfnmt/model.hpp"
#include "sfnmt/ops.hpp"
#include "sfnmt/segmentation.hpp"

namespace sfnmt {

// Inverse-square-root schedule with linear warmup:
// lr(step) = peak * min(step / warmup, sqrt(warmup / step)), step >= 1.
inline double lr_at(std::size_t step, double peak_lr, std::size_t warmup_steps) {
  if (step == 0) throw ContractError("lr_at: steps are 1-based");
  double s = static_cast<double>(step), w = static_cast<double>(warmup_steps);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.997;
  double eps = 1e-8;
};

// First and second moment estimates, kept in double regardless of the
// parameter scalar type; laid out in parameter registration order.
struct OptimState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;

  template <class T>
  static OptimState init(const ParamMap<T>& params) {
    OptimState s;
    for (const auto& name : params.names) {
      std::size_t n = params.at(name).numel();
      s.m.emplace_back(n, 0.0);
      s.v.emplace_back(n, 0.0);
    }
    return s;
  }
};

// One Adam update over every parameter; assumes gradients are populated and
// state.step has already been advanced to the current 1-based step.
template <class T>
void adam_step(ParamMap<T>& params, OptimState& state, double lr,
               const AdamConfig& adam = {}) {
  if (state.step == 0) throw ContractError("adam_step: state.step must be >= 1");
  if (state.m.size() != params.size())
    throw ContractError("adam_step: optimizer state does not match parameters");
  const double b1 = adam.beta1, b2 = adam.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.names.size(); ++pi) {
    Tensor<T>& p = params.at(params.names[pi]);
    const auto& g = p.grad();
    auto& data = p.mutable_data();
    if (g.size() != data.size())
      throw ContractError("adam_step: missing gradient for " + params.names[pi]);
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < data.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      if (!std::isfinite(gi))
        throw NumericError("adam_step: non-finite gradient in " + params.names[pi]);
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      double mhat = m[i] / bc1, vhat = v[i] / bc2;
      data[i] = static_cast<T>(static_cast<double>(data[i]) -
                               lr * mhat / (std::sqrt(vhat) + adam.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// corpus and batching

// One training pair: segmented source plus target subword ids (no <s>/</s>).
struct Example {
  SegmentedSentence src;
  std::vector<int> tgt;
};

inline std::vector<std::string> split_words(const std::string& line) {
  std::vector<std::string> words;
  std::istringstream ss(line);
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

inline std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file: " + path);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(split_words(line));
  return lines;
}

inline std::vector<int> encode_target(const std::vector<std::string>& words,
                                      const BpeModel& bpe) {
  std::vector<int> ids;
  for (const auto& w : words)
    for (const auto& sym : bpe.apply(w)) ids.push_back(bpe.vocab.id(sym));
  return ids;
}

inline std::vector<Example> prepare_examples(
    const std::vector<std::vector<std::string>>& src_lines,
    const std::vector<std::vector<std::string>>& tgt_lines, const BpeModel& src_bpe,
    const Vocab& char_vocab, const BpeModel& tgt_bpe) {
  if (src_lines.size() != tgt_lines.size())
    throw InputError("parallel corpus length mismatch: " +
                     std::to_string(src_lines.size()) + " vs " +
                     std::to_string(tgt_lines.size()));
  std::vector<Example> out;
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    if (src_lines[i].empty() || tgt_lines[i].empty()) continue;
    Example e;
    e.src = segment(src_lines[i], src_bpe, char_vocab);
    e.tgt = encode_target(tgt_lines[i], tgt_bpe);
    out.push_back(std::move(e));
  }
  if (out.empty()) throw InputError("parallel corpus has no usable pairs");
  return out;
}

// Length-bucketed token-budget batching: sort by source length, pack greedily
// until source+target subwords would exceed max_tokens, then shuffle the
// batch order. Over-long sentences are skipped with a warning.
inline std::vector<std::vector<std::size_t>> make_batches(
    const std::vector<Example>& examples, std::size_t max_tokens,
    std::size_t max_positions, Rng& rng, std::ostream* warn = nullptr) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return examples[a].src.subwords.size() < examples[b].src.subwords.size();
  });

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t cur_tokens = 0;
  for (std::size_t idx : order) {
    const Example& e = examples[idx];
    std::size_t cost = e.src.subwords.size() + e.tgt.size() + 2;  // + <s>, </s>
    std::size_t fast_len = std::max(e.src.chars.size(), e.src.subwords.size());
    if (cost > max_tokens || fast_len > max_positions ||
        e.tgt.size() + 1 > max_positions) {
      if (warn)
        *warn << "warning: skipping over-long sentence pair (" << cost
              << " tokens)\n";
      continue;
    }
    if (cur_tokens + cost > max_tokens && !cur.empty()) {
      batches.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
    cur.push_back(idx);
    cur_tokens += cost;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));

  for (std::size_t i = batches.size(); i > 1; --i)
    std::swap(batches[i - 1], batches[rng.next_below(i)]);
  return batches;
}

// ---------------------------------------------------------------------------
// the step

struct StepStats {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;        // mean per-token loss over the batch
  std::size_t tokens = 0;   // target tokens contributing to the loss
};

// Teacher-forced loss for one batch, averaged per target token. Each sentence
// runs at its own length; no cross-sentence padding is introduced.
template <class T>
Tensor<T> batch_loss(Model<T>& m, const std::vector<Example>& examples,
                     const std::vector<std::size_t>& batch, double label_smoothing,
                     Rng& rng, bool training, std::size_t* tokens_out = nullptr) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  Tensor<T> total;
  std::size_t total_tokens = 0;
  for (std::size_t idx : batch) {
    const Example& e = examples.at(idx);
    auto f = make_features(e.src, m.cfg);
    auto enc = encode(m, f, rng, training);
    auto mem = encdec_interaction(m, enc, f);

    std::vector<int> tgt_in{Vocab::kBos};
    tgt_in.insert(tgt_in.end(), e.tgt.begin(), e.tgt.end());
    std::vector<int> tgt_out(e.tgt.begin(), e.tgt.end());
    tgt_out.push_back(Vocab::kEos);
    std::vector<std::uint8_t> tv(tgt_in.size(), 1);

    auto logits = decode_forward(m, tgt_in, tv, mem, rng, training);
    std::size_t n = 0;
    auto loss = cross_entropy_label_smoothed(logits, tgt_out, Vocab::kPad,
                                             label_smoothing, Reduction::Sum, &n);
    total_tokens += n;
    total = total.node() ? add(total, loss) : loss;
  }
  if (tokens_out) *tokens_out = total_tokens;
  return scale(total, static_cast<T>(1.0 / static_cast<double>(total_tokens)));
}

template <class T>
StepStats train_step(Model<T>& m, const std::vector<Example>& examples,
                     const std::vector<std::size_t>& batch, OptimState& opt,
                     const TrainConfig& tc, Rng& rng) {
  ++opt.step;
  std::size_t tokens = 0;
  auto loss = batch_loss(m, examples, batch, tc.label_smoothing, rng, true, &tokens);
  double loss_val = static_cast<double>(loss.item());
  if (!std::isfinite(loss_val))
    throw NumericError("train_step: non-finite loss at step " +
                       std::to_string(opt.step));
  m.params.zero_grads();
  loss.backward();
  double lr = lr_at(opt.step, tc.peak_lr, tc.warmup_steps);
  adam_step(m.params, opt, lr);
  return {opt.step, lr, loss_val, tokens};
}

// Deterministic training loop. Everything is a pure function of the config
// seed and the step index: epoch e uses batches shuffled by a seed-derived
// stream, and step s uses its own dropout stream. Resuming from a checkpoint
// at any step therefore reproduces the original run bitwise.
template <class T, class PerStep>
void run_training(Model<T>& m, const std::vector<Example>& examples,
                  const TrainConfig& tc, OptimState& opt, PerStep&& per_step,
                  std::ostream* warn = nullptr) {
  std::vector<std::vector<std::size_t>> batches;
  std::size_t batches_epoch = static_cast<std::size_t>(-1);
  while (opt.step < tc.max_steps) {
    std::size_t nb;
    {
      Rng probe = Rng(tc.seed).split(0xba7c4e5);
      nb = make_batches(examples, tc.max_tokens, m.cfg.max_positions, probe).size();
      if (nb == 0) throw InputError("run_training: no usable batches");
    }
    std::size_t epoch = opt.step / nb;
    if (epoch != batches_epoch) {
      Rng shuffle = Rng(tc.seed).split(0xba7c4e5 + epoch);
      batches = make_batches(examples, tc.max_tokens, m.cfg.max_positions, shuffle,
                             epoch == 0 ? warn : nullptr);
      batches_epoch = epoch;
    }
    Rng dropout_rng = Rng(tc.seed).split(0xd20b0 + opt.step);
    auto stats = train_step(m, examples, batches[opt.step % nb], opt, tc, dropout_rng);
    per_step(stats);
  }
}

// metrics log: one CSV row per step
inline void write_metrics_header(std::ostream& out) {
  out << "step,lr,loss,tokens_per_step\n";
}

inline void write_metrics_row(std::ostream& out, const StepStats& s) {
  out << s.step << "," << s.lr << "," << s.loss << "," << s.tokens << "\n";
}

}  // namespace sfnmt
