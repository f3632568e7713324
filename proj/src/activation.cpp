#include "pmlab/activation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "pmlab/numerics.hpp"
#include "pmlab/rng.hpp"

namespace pmlab {

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::UaGap: return "ua_gap";
    case SelectionStrategy::Bottom: return "bottom";
    case SelectionStrategy::Middle: return "middle";
    case SelectionStrategy::Random: return "random";
  }
  throw std::logic_error("unknown selection strategy");
}

SelectionStrategy selection_strategy_from_string(const std::string& s) {
  if (s == "ua_gap") return SelectionStrategy::UaGap;
  if (s == "bottom") return SelectionStrategy::Bottom;
  if (s == "middle") return SelectionStrategy::Middle;
  if (s == "random") return SelectionStrategy::Random;
  throw std::invalid_argument("unknown selection strategy '" + s + "'");
}

double position_ratio(const Vector& coefficients) {
  if (coefficients.empty()) throw std::invalid_argument("position_ratio: empty coefficient vector");
  std::size_t active = 0;
  for (double a : coefficients) {
    if (a > 0.0) ++active;
  }
  return static_cast<double>(active) / static_cast<double>(coefficients.size());
}

double response_ratio(const ActivationTrace& trace, int layer, std::size_t span_begin,
                      std::size_t span_end) {
  if (layer < 0 || layer >= trace.n_layers()) {
    throw std::invalid_argument("response_ratio: layer out of range");
  }
  if (span_begin >= span_end) throw std::invalid_argument("response_ratio: empty span");
  const auto& ratios = trace.ratios[static_cast<std::size_t>(layer)];
  if (span_end > ratios.size()) throw std::invalid_argument("response_ratio: span beyond traced positions");
  double sum = 0.0;
  for (std::size_t i = span_begin; i < span_end; ++i) sum += ratios[i];
  return sum / static_cast<double>(span_end - span_begin);
}

namespace {

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<LayerStats> activation_gap(const std::vector<std::vector<double>>& unfaithful_ratios,
                                       const std::vector<std::vector<double>>& faithful_ratios) {
  if (unfaithful_ratios.size() != faithful_ratios.size()) {
    throw std::invalid_argument("activation_gap: layer count mismatch");
  }
  std::vector<LayerStats> stats;
  for (std::size_t l = 0; l < unfaithful_ratios.size(); ++l) {
    if (unfaithful_ratios[l].empty() || faithful_ratios[l].empty()) {
      throw std::invalid_argument("activation_gap: empty subset at layer " + std::to_string(l));
    }
    LayerStats s;
    s.layer = static_cast<int>(l);
    s.mean_ratio_unfaithful = mean(unfaithful_ratios[l]);
    s.mean_ratio_faithful = mean(faithful_ratios[l]);
    s.gap = s.mean_ratio_unfaithful - s.mean_ratio_faithful;
    s.pcc = std::numeric_limits<double>::quiet_NaN();
    s.p_value = std::numeric_limits<double>::quiet_NaN();
    stats.push_back(s);
  }
  return stats;
}

std::vector<LayerCorr> layer_pcc(const std::vector<std::vector<double>>& ratios,
                                 const std::vector<int>& labels, std::size_t n_perm,
                                 std::uint64_t seed) {
  if (ratios.size() != labels.size()) throw std::invalid_argument("layer_pcc: length mismatch");
  if (ratios.size() < 2) throw std::invalid_argument("layer_pcc: need at least 2 instances");
  bool has0 = false, has1 = false;
  for (int y : labels) {
    if (y == 0) has0 = true;
    else if (y == 1) has1 = true;
    else throw std::invalid_argument("layer_pcc: labels must be 0/1");
  }
  if (!has0 || !has1) throw std::invalid_argument("layer_pcc: undefined correlation (single-class labels)");

  const std::size_t n_layers = ratios[0].size();
  Vector indicator(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) indicator[i] = 1.0 - labels[i];

  std::vector<LayerCorr> out(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    Vector r(ratios.size());
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      if (ratios[i].size() != n_layers) throw std::invalid_argument("layer_pcc: ragged ratio matrix");
      r[i] = ratios[i][l];
    }
    out[l].pcc = pearson_corr(r, indicator);
    out[l].p_value = perm_pvalue(r, indicator, n_perm, derive_seed(seed, "layer" + std::to_string(l)));
  }
  return out;
}

std::vector<LayerStats> compute_layer_stats(const std::vector<std::vector<double>>& ratios,
                                            const std::vector<int>& labels, std::size_t n_perm,
                                            std::uint64_t seed) {
  if (ratios.empty()) throw std::invalid_argument("compute_layer_stats: no instances");
  const std::size_t n_layers = ratios[0].size();
  std::vector<std::vector<double>> unfaithful(n_layers), faithful(n_layers);
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      (labels[i] == 0 ? unfaithful[l] : faithful[l]).push_back(ratios[i][l]);
    }
  }
  std::vector<LayerStats> stats = activation_gap(unfaithful, faithful);
  std::vector<LayerCorr> corr = layer_pcc(ratios, labels, n_perm, seed);
  for (std::size_t l = 0; l < n_layers; ++l) {
    stats[l].pcc = corr[l].pcc;
    stats[l].p_value = corr[l].p_value;
  }
  return stats;
}

SelectionResult select_layers(const std::vector<LayerStats>& stats, int n,
                              SelectionStrategy strategy, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("select_layers: n must be >= 1");
  const int n_layers = static_cast<int>(stats.size());
  if (n_layers == 0) throw std::invalid_argument("select_layers: empty stats");

  SelectionResult res;
  res.strategy = strategy;
  res.n_requested = n;
  res.seed = seed;
  res.clamped = n > n_layers;
  const int take = std::min(n, n_layers);

  switch (strategy) {
    case SelectionStrategy::UaGap: {
      std::vector<int> idx(static_cast<std::size_t>(n_layers));
      std::iota(idx.begin(), idx.end(), 0);
      // Largest gap first; ties go to the lower layer index.
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return stats[static_cast<std::size_t>(a)].gap > stats[static_cast<std::size_t>(b)].gap;
      });
      res.layers.assign(idx.begin(), idx.begin() + take);
      break;
    }
    case SelectionStrategy::Bottom: {
      for (int i = 0; i < take; ++i) res.layers.push_back(i);
      break;
    }
    case SelectionStrategy::Middle: {
      // n consecutive layers centered at floor(n_layers/2), biased toward the
      // lower index when n is even; the window is shifted to stay in range.
      const int center = n_layers / 2;
      int start = center - take / 2;
      start = std::clamp(start, 0, n_layers - take);
      for (int i = 0; i < take; ++i) res.layers.push_back(start + i);
      break;
    }
    case SelectionStrategy::Random: {
      std::vector<int> idx(static_cast<std::size_t>(n_layers));
      std::iota(idx.begin(), idx.end(), 0);
      Rng rng(seed);
      rng.shuffle(idx);
      res.layers.assign(idx.begin(), idx.begin() + take);
      break;
    }
  }
  std::sort(res.layers.begin(), res.layers.end());
  return res;
}

}  // namespace pmlab
