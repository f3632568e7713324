#include "pmlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pmlab/rng.hpp"

namespace pmlab {

Vector softmax(const Vector& v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) throw std::invalid_argument("softmax: non-finite input");
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (auto& p : out) p /= sum;
  return out;
}

double log_sum_exp(const Vector& v) {
  if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

double cross_entropy(const Vector& logits, std::size_t target) {
  if (target >= logits.size()) throw std::out_of_range("cross_entropy: target index out of range");
  return log_sum_exp(logits) - logits[target];
}

double pearson_corr(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson_corr: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("pearson_corr: need at least 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson_corr: zero variance");
  double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

double perm_pvalue(std::span<const double> x, std::span<const double> y,
                   std::size_t n_perm, std::uint64_t seed) {
  if (n_perm < 100) throw std::invalid_argument("perm_pvalue: n_perm must be >= 100");
  const double r_obs = std::abs(pearson_corr(x, y));
  Vector shuffled(y.begin(), y.end());
  Rng rng(seed);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < n_perm; ++p) {
    rng.shuffle(shuffled);
    double r = std::abs(pearson_corr(x, shuffled));
    if (r >= r_obs) ++hits;
  }
  return static_cast<double>(1 + hits) / static_cast<double>(1 + n_perm);
}

Vector finite_diff_grad(const std::function<double(const Vector&)>& f,
                        const Vector& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Vector grad(x.size(), 0.0);
  Vector probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    double fp = f(probe);
    probe[i] = orig - h;
    double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_grad: non-finite function value");
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace pmlab
