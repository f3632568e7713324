#include "pmlab/plan.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "pmlab/model.hpp"

namespace pmlab {

std::string to_string(SuppressionKind kind) {
  switch (kind) {
    case SuppressionKind::FFN: return "ffn";
    case SuppressionKind::MHA: return "mha";
    case SuppressionKind::Layer: return "layer";
    case SuppressionKind::Parameter: return "parameter";
  }
  throw std::logic_error("unknown suppression kind");
}

SuppressionKind suppression_kind_from_string(const std::string& s) {
  if (s == "ffn") return SuppressionKind::FFN;
  if (s == "mha") return SuppressionKind::MHA;
  if (s == "layer") return SuppressionKind::Layer;
  if (s == "parameter") return SuppressionKind::Parameter;
  throw std::invalid_argument("unknown suppression kind '" + s + "'");
}

void SuppressionPlan::validate(const ModelConfig& config) const {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw std::invalid_argument("SuppressionPlan: lambda must be finite and >= 0");
  }
  if (kind == SuppressionKind::Parameter) {
    if (param_mask.empty()) throw std::invalid_argument("SuppressionPlan: parameter plan needs a non-empty mask");
    if (!layers.empty()) throw std::invalid_argument("SuppressionPlan: parameter plan must not name layers");
  } else {
    if (!param_mask.empty()) throw std::invalid_argument("SuppressionPlan: param_mask only valid for parameter plans");
    std::set<int> seen;
    for (int l : layers) {
      if (l < 0 || l >= config.n_layers) {
        throw std::invalid_argument("SuppressionPlan: layer index out of range");
      }
      if (!seen.insert(l).second) throw std::invalid_argument("SuppressionPlan: duplicate layer index");
    }
  }
}

bool SuppressionPlan::applies_to(SuppressionKind k, int layer) const {
  if (kind != k) return false;
  return std::find(layers.begin(), layers.end(), layer) != layers.end();
}

}  // namespace pmlab
