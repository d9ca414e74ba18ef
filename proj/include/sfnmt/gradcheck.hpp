#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "sfnmt/ops.hpp"
#include "sfnmt/tensor.hpp"

namespace sfnmt {

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_coords_per_leaf = 8;  // sampled; 0 = all
  std::uint64_t sample_seed = 17;
};

// Central finite-difference verification of reverse-mode gradients.
// f must be a deterministic 64-bit computation over the given leaves
// (dropout off); returns max over sampled coordinates of
// |analytic − numeric| / max(1, |analytic|).
template <class F>
double grad_check(F&& f, const std::vector<Tensor<double>>& leaves,
                  GradCheckOptions opt = {}) {
  Tensor<double> loss0 = f();
  if (loss0.numel() != 1) throw ContractError("grad_check: f must return a scalar");
  Tensor<double> loss_again = f();
  if (loss0.item() != loss_again.item())
    throw ContractError(
        "grad_check: computation is not deterministic (is dropout enabled?)");
  if (!std::isfinite(loss0.item()))
    throw NumericError("grad_check: non-finite loss");

  for (auto& leaf : leaves) const_cast<Tensor<double>&>(leaf).zero_grad();
  loss0.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  Rng rng(opt.sample_seed);
  double max_rel = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = const_cast<Tensor<double>&>(leaves[li]);
    const std::size_t n = leaf.numel();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_leaf == 0 || n <= opt.max_coords_per_leaf) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_coords_per_leaf; ++i)
        coords.push_back(rng.next_below(n));
    }
    for (std::size_t c : coords) {
      const double orig = leaf.mutable_data()[c];
      leaf.mutable_data()[c] = orig + opt.h;
      double fp = f().item();
      leaf.mutable_data()[c] = orig - opt.h;
      double fm = f().item();
      leaf.mutable_data()[c] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite perturbed loss");
      double numeric = (fp - fm) / (2.0 * opt.h);
      double a = analytic[li][c];
      double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace sfnmt
