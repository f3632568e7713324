#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmlab/model.hpp"

namespace pmlab {

struct LayerStats {
  int layer = 0;
  double mean_ratio_unfaithful = 0.0;
  double mean_ratio_faithful = 0.0;
  double gap = 0.0;  // mean over unfaithful minus mean over faithful
  double pcc = 0.0;
  double p_value = 1.0;
};

enum class SelectionStrategy { UaGap, Bottom, Middle, Random };

std::string to_string(SelectionStrategy s);
SelectionStrategy selection_strategy_from_string(const std::string& s);

struct SelectionResult {
  SelectionStrategy strategy = SelectionStrategy::UaGap;
  int n_requested = 0;
  std::vector<int> layers;  // sorted ascending, unique
  std::uint64_t seed = 0;
  bool clamped = false;  // n exceeded the layer count and was clamped
};

// Fraction of strictly positive coefficients.
double position_ratio(const Vector& coefficients);

// Mean position ratio over [span_begin, span_end) at one layer.
double response_ratio(const ActivationTrace& trace, int layer, std::size_t span_begin,
                      std::size_t span_end);

// Per-layer activation gap between the unfaithful and faithful sample sets.
// ratios_*[layer] holds the response-level ratios of that subset. The pcc and
// p_value fields of the result are left NaN; layer_pcc fills them.
std::vector<LayerStats> activation_gap(const std::vector<std::vector<double>>& unfaithful_ratios,
                                       const std::vector<std::vector<double>>& faithful_ratios);

struct LayerCorr {
  double pcc = 0.0;
  double p_value = 1.0;
};

// Correlation of R^l with the unfaithfulness indicator (1 - y_f) per layer,
// with a seeded permutation p-value. ratios[instance][layer]; labels are the
// faithfulness bits y_f. Throws if only one label class is present.
std::vector<LayerCorr> layer_pcc(const std::vector<std::vector<double>>& ratios,
                                 const std::vector<int>& labels, std::size_t n_perm,
                                 std::uint64_t seed);

// activation_gap + layer_pcc merged into one table.
std::vector<LayerStats> compute_layer_stats(const std::vector<std::vector<double>>& ratios,
                                            const std::vector<int>& labels, std::size_t n_perm,
                                            std::uint64_t seed);

SelectionResult select_layers(const std::vector<LayerStats>& stats, int n,
                              SelectionStrategy strategy, std::uint64_t seed);

}  // namespace pmlab
