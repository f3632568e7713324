#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

namespace pmlab {

struct ModelConfig;

enum class SuppressionKind { FFN, MHA, Layer, Parameter };

std::string to_string(SuppressionKind kind);
SuppressionKind suppression_kind_from_string(const std::string& s);

// A single weight addressed by parameter name and flat index into its storage.
struct ParamRef {
  std::string name;
  std::size_t index = 0;
  auto operator<=>(const ParamRef&) const = default;
};

// Which components to scale by lambda during the forward pass. FFN/MHA/Layer
// plans name transformer layers; Parameter plans name individual weights.
struct SuppressionPlan {
  SuppressionKind kind = SuppressionKind::FFN;
  std::vector<int> layers;
  double lambda = 1.0;
  std::vector<ParamRef> param_mask;

  // Throws std::invalid_argument if the plan is malformed or does not fit the
  // given model shape.
  void validate(const ModelConfig& config) const;

  bool applies_to(SuppressionKind k, int layer) const;
};

}  // namespace pmlab
