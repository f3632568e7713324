#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "pmlab/matrix.hpp"

namespace pmlab {

// Numerically stable softmax (max-subtraction). Throws on empty input.
Vector softmax(const Vector& v);

// log(sum(exp(v))) with max-subtraction.
double log_sum_exp(const Vector& v);

// -log softmax(logits)[target]. Throws if target is out of range.
double cross_entropy(const Vector& logits, std::size_t target);

// Pearson correlation coefficient. Requires equal lengths >= 2 and throws
// "zero variance" if either sequence is constant; callers must report the
// correlation as undefined rather than substituting 0.
double pearson_corr(std::span<const double> x, std::span<const double> y);

// Two-sided permutation p-value: (1 + #{perm : |r_perm| >= |r_obs|}) / (1 + n_perm).
// Deterministic for a fixed seed. Requires n_perm >= 100.
double perm_pvalue(std::span<const double> x, std::span<const double> y,
                   std::size_t n_perm, std::uint64_t seed);

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Throws if h <= 0 or if f evaluates to a non-finite value.
Vector finite_diff_grad(const std::function<double(const Vector&)>& f,
                        const Vector& x, double h);

}  // namespace pmlab
