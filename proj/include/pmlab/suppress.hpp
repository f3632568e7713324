#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pmlab/model.hpp"
#include "pmlab/plan.hpp"

namespace pmlab {

// Read-only view of a model with a suppression plan applied at forward time.
// FFN/MHA/Layer plans are applied as lambda scaling inside the forward pass;
// Parameter plans are materialized into a private patched copy. The base
// model is never modified.
class ModelView {
 public:
  ModelView(const ToyTransformer& base, SuppressionPlan plan);

  const ToyTransformer& model() const { return patched_ ? *patched_ : *base_; }
  const SuppressionPlan* forward_plan() const { return patched_ ? nullptr : &plan_; }
  const SuppressionPlan& plan() const { return plan_; }

  std::vector<Vector> forward(std::span<const int> tokens, ActivationTrace* trace = nullptr) const;
  double sequence_nll(std::span<const int> prompt, std::span<const int> target) const;
  std::vector<int> sample(std::span<const int> prompt, int max_new, double temperature,
                          std::uint64_t seed) const;

 private:
  const ToyTransformer* base_;
  SuppressionPlan plan_;
  std::optional<ToyTransformer> patched_;
};

ModelView apply_plan(const ToyTransformer& model, const SuppressionPlan& plan);

// SNIP-style saliency |w * dL/dw| over the FFN key/value parameters of the
// given layers, with L the mean sequence NLL over the sample. Returns the
// top_k refs by saliency, ties broken lexicographically by name then index.
std::vector<ParamRef> snip_saliency(const ToyTransformer& model,
                                    const std::vector<SeqExample>& sample,
                                    const std::vector<int>& layers, std::size_t top_k);

struct InterventionResult {
  Vector lambdas;
  Vector nll_unfaithful;
  Vector nll_faithful;
};

// Appendix-style causal sweep: for each lambda, the mean sequence NLL of the
// recorded answers under FFN suppression of `layers`, separately for the
// unfaithful and faithful example sets.
InterventionResult intervention_sweep(const ToyTransformer& model,
                                      const std::vector<SeqExample>& d_minus,
                                      const std::vector<SeqExample>& d_plus,
                                      const std::vector<int>& layers, const Vector& lambdas);

}  // namespace pmlab
