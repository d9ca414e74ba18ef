#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "sfnmt/errors.hpp"

namespace sfnmt {

// Corpus-level BLEU-4 (unsmoothed, single reference per segment) with the
// exponential brevity penalty. Tokens are compared as whole strings.
inline double corpus_bleu(const std::vector<std::vector<std::string>>& references,
                          const std::vector<std::vector<std::string>>& hypotheses,
                          std::size_t max_order = 4) {
  if (references.size() != hypotheses.size())
    throw InputError("corpus_bleu: reference/hypothesis count mismatch");
  if (references.empty()) throw InputError("corpus_bleu: empty corpus");

  std::vector<std::size_t> matches(max_order, 0), totals(max_order, 0);
  std::size_t ref_len = 0, hyp_len = 0;

  auto ngrams = [](const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    if (toks.size() >= n)
      for (std::size_t i = 0; i + n <= toks.size(); ++i)
        ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
    return counts;
  };

  for (std::size_t s = 0; s < references.size(); ++s) {
    ref_len += references[s].size();
    hyp_len += hypotheses[s].size();
    for (std::size_t n = 1; n <= max_order; ++n) {
      auto ref_counts = ngrams(references[s], n);
      for (const auto& [gram, count] : ngrams(hypotheses[s], n)) {
        totals[n - 1] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  double log_precision_sum = 0.0;
  for (std::size_t n = 0; n < max_order; ++n) {
    if (totals[n] == 0 || matches[n] == 0) return 0.0;
    log_precision_sum += std::log(static_cast<double>(matches[n]) /
                                  static_cast<double>(totals[n]));
  }
  double bp = 1.0;
  if (hyp_len == 0) return 0.0;
  if (hyp_len < ref_len)
    bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_precision_sum / static_cast<double>(max_order));
}

}  // namespace sfnmt
