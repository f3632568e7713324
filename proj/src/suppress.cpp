#include "pmlab/suppress.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pmlab {

namespace {

ToyTransformer materialize_parameter_plan(const ToyTransformer& base, const SuppressionPlan& plan) {
  ToyTransformer patched = base;
  for (const ParamRef& ref : plan.param_mask) {
    Matrix* m = find_param_matrix(patched, ref.name);
    if (m == nullptr) throw std::invalid_argument("apply_plan: unknown parameter name '" + ref.name + "'");
    if (ref.index >= m->size()) {
      throw std::invalid_argument("apply_plan: mask index out of range for '" + ref.name + "'");
    }
    m->data()[ref.index] *= plan.lambda;
  }
  return patched;
}

}  // namespace

ModelView::ModelView(const ToyTransformer& base, SuppressionPlan plan)
    : base_(&base), plan_(std::move(plan)) {
  plan_.validate(base.config);
  if (plan_.kind == SuppressionKind::Parameter) {
    patched_ = materialize_parameter_plan(base, plan_);
  }
}

std::vector<Vector> ModelView::forward(std::span<const int> tokens, ActivationTrace* trace) const {
  return pmlab::forward(model(), tokens, forward_plan(), trace);
}

double ModelView::sequence_nll(std::span<const int> prompt, std::span<const int> target) const {
  return pmlab::sequence_nll(model(), prompt, target, forward_plan());
}

std::vector<int> ModelView::sample(std::span<const int> prompt, int max_new, double temperature,
                                   std::uint64_t seed) const {
  return pmlab::sample(model(), prompt, max_new, temperature, seed, forward_plan());
}

ModelView apply_plan(const ToyTransformer& model, const SuppressionPlan& plan) {
  return ModelView(model, plan);
}

std::vector<ParamRef> snip_saliency(const ToyTransformer& model,
                                    const std::vector<SeqExample>& sample,
                                    const std::vector<int>& layers, std::size_t top_k) {
  if (sample.empty()) throw std::invalid_argument("snip_saliency: empty sample");
  if (top_k < 1) throw std::invalid_argument("snip_saliency: top_k must be >= 1");
  for (int l : layers) {
    if (l < 0 || l >= model.config.n_layers) {
      throw std::invalid_argument("snip_saliency: layer index out of range");
    }
  }

  Gradients grads = Gradients::zeros_like(model);
  const double w = 1.0 / static_cast<double>(sample.size());
  for (const auto& e : sample) {
    nll_backward(model, e.prompt, e.target, nullptr, w, grads);
  }

  struct Scored {
    double saliency;
    ParamRef ref;
  };
  std::vector<Scored> scored;
  for (int l : layers) {
    const LayerParams& p = model.layers[static_cast<std::size_t>(l)];
    const LayerGrads& g = grads.layers[static_cast<std::size_t>(l)];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    auto scan = [&](const std::string& name, const Matrix& wm, const Matrix& gm) {
      for (std::size_t i = 0; i < wm.size(); ++i) {
        scored.push_back({std::abs(wm.data()[i] * gm.data()[i]), {name, i}});
      }
    };
    scan(prefix + "ffn_key", p.ffn_key, g.ffn_key);
    scan(prefix + "ffn_value", p.ffn_value, g.ffn_value);
  }

  // Highest saliency first; ties lexicographic by (name, index).
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.saliency != b.saliency) return a.saliency > b.saliency;
    return a.ref < b.ref;
  });
  const std::size_t take = std::min(top_k, scored.size());
  std::vector<ParamRef> mask;
  mask.reserve(take);
  for (std::size_t i = 0; i < take; ++i) mask.push_back(scored[i].ref);
  return mask;
}

InterventionResult intervention_sweep(const ToyTransformer& model,
                                      const std::vector<SeqExample>& d_minus,
                                      const std::vector<SeqExample>& d_plus,
                                      const std::vector<int>& layers, const Vector& lambdas) {
  if (d_minus.empty() || d_plus.empty()) {
    throw std::invalid_argument("intervention_sweep: both subsets must be non-empty");
  }
  if (lambdas.empty()) throw std::invalid_argument("intervention_sweep: empty lambda list");

  InterventionResult res;
  res.lambdas = lambdas;
  for (double lambda : lambdas) {
    SuppressionPlan plan;
    plan.kind = SuppressionKind::FFN;
    plan.layers = layers;
    plan.lambda = lambda;
    ModelView view = apply_plan(model, plan);
    auto mean_nll = [&view](const std::vector<SeqExample>& set) {
      double total = 0.0;
      for (const auto& e : set) total += view.sequence_nll(e.prompt, e.target);
      return total / static_cast<double>(set.size());
    };
    res.nll_unfaithful.push_back(mean_nll(d_minus));
    res.nll_faithful.push_back(mean_nll(d_plus));
  }
  return res;
}

}  // namespace pmlab
