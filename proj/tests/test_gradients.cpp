#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pmlab/adapt.hpp"
#include "pmlab/model.hpp"
#include "pmlab/rng.hpp"
#include "pmlab/suppress.hpp"

using namespace pmlab;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  c.seed = 2024;
  return c;
}

const std::vector<int> kPrompt = {0, 3, 7};
const std::vector<int> kTarget = {5, 1, 9, 2};

bool grad_close(double analytic, double fd) {
  const double tol = 1e-4 * std::max({1e-4, std::abs(analytic), std::abs(fd)});
  return std::abs(analytic - fd) <= tol;
}

// Central-difference check of every entry of one tensor against the analytic
// gradient, under an arbitrary scalar loss of the model.
int check_tensor(ToyTransformer& model, double* param, const double* analytic, std::size_t n,
                 const std::function<double()>& loss, const std::string& name) {
  const double h = 1e-5;
  int failures = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double orig = param[i];
    param[i] = orig + h;
    const double fp = loss();
    param[i] = orig - h;
    const double fm = loss();
    param[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    if (!grad_close(analytic[i], fd)) {
      ++failures;
      if (failures <= 3) {
        MESSAGE(name << "[" << i << "]: analytic=" << analytic[i] << " fd=" << fd);
      }
    }
  }
  (void)model;
  return failures;
}

int check_all_params(const SuppressionPlan* plan) {
  ToyTransformer model = init_model(micro_config());
  Gradients grads = Gradients::zeros_like(model);
  nll_backward(model, kPrompt, kTarget, plan, 1.0, grads);

  auto loss = [&]() { return sequence_nll(model, kPrompt, kTarget, plan); };

  int failures = 0;
  failures += check_tensor(model, model.embedding.data(), grads.embedding.data(),
                           model.embedding.size(), loss, "embedding");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& p = model.layers[l];
    auto& g = grads.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    failures += check_tensor(model, p.wq.data(), g.wq.data(), p.wq.size(), loss, pre + "wq");
    failures += check_tensor(model, p.wk.data(), g.wk.data(), p.wk.size(), loss, pre + "wk");
    failures += check_tensor(model, p.wv.data(), g.wv.data(), p.wv.size(), loss, pre + "wv");
    failures += check_tensor(model, p.wo.data(), g.wo.data(), p.wo.size(), loss, pre + "wo");
    failures += check_tensor(model, p.ffn_key.data(), g.ffn_key.data(), p.ffn_key.size(), loss,
                             pre + "ffn_key");
    failures += check_tensor(model, p.ffn_value.data(), g.ffn_value.data(), p.ffn_value.size(),
                             loss, pre + "ffn_value");
    failures += check_tensor(model, p.attn_norm.data(), g.attn_norm.data(), p.attn_norm.size(),
                             loss, pre + "attn_norm");
    failures += check_tensor(model, p.ffn_norm.data(), g.ffn_norm.data(), p.ffn_norm.size(), loss,
                             pre + "ffn_norm");
  }
  failures += check_tensor(model, model.final_norm.data(), grads.final_norm.data(),
                           model.final_norm.size(), loss, "final_norm");
  return failures;
}

}  // namespace

TEST_CASE("analytic gradients match finite differences (no plan)") {
  CHECK(check_all_params(nullptr) == 0);
}

TEST_CASE("analytic gradients match finite differences (ffn lambda=0.5)") {
  SuppressionPlan plan;
  plan.kind = SuppressionKind::FFN;
  plan.layers = {1};
  plan.lambda = 0.5;
  CHECK(check_all_params(&plan) == 0);
}

TEST_CASE("analytic gradients match finite differences (mha lambda=0.25)") {
  SuppressionPlan plan;
  plan.kind = SuppressionKind::MHA;
  plan.layers = {0};
  plan.lambda = 0.25;
  CHECK(check_all_params(&plan) == 0);
}

TEST_CASE("analytic gradients match finite differences (layer lambda=0.5)") {
  SuppressionPlan plan;
  plan.kind = SuppressionKind::Layer;
  plan.layers = {0, 1};
  plan.lambda = 0.5;
  CHECK(check_all_params(&plan) == 0);
}

TEST_CASE("adapter factor gradients match finite differences") {
  ToyTransformer base = init_model(micro_config());
  base.vocab = Vocab::build(
      {"one two three four five six seven eight nine"});  // 9 words + specials = 11
  REQUIRE(base.vocab.size() == base.config.vocab_size);

  SuppressionPlan plan;
  plan.kind = SuppressionKind::FFN;
  plan.layers = {1};
  plan.lambda = 0.0;

  AdaptConfig ac;
  ac.rank = 2;
  ac.seed = 7;
  Adapter adapter = init_adapter(base, plan, ac);
  // Nudge B off zero so both factors carry signal through the product.
  {
    Rng rng(91);
    for (auto& t : adapter.targets) {
      for (std::size_t i = 0; i < t.b.size(); ++i) t.b.data()[i] = 0.05 * rng.normal();
    }
  }

  // Suppressed layers keep their FFN matrices out of the target set.
  for (const auto& t : adapter.targets) {
    CHECK(t.name.find("layer1.ffn") == std::string::npos);
  }

  const std::string question = "one two three";
  const std::string context = "four five six";
  const std::string answer = "seven";
  const double gamma = 8.0;  // far from satisfied: the hinge stays active
  const double alpha = 0.5, beta = 0.5;

  auto ctx_prompt = [&]() {
    std::vector<int> p = {Vocab::kBosId};
    for (int t : base.vocab.encode(context)) p.push_back(t);
    for (int t : base.vocab.encode(question)) p.push_back(t);
    return p;
  }();
  auto q_prompt = [&]() {
    std::vector<int> p = {Vocab::kBosId};
    for (int t : base.vocab.encode(question)) p.push_back(t);
    return p;
  }();
  auto target = [&]() {
    std::vector<int> t = base.vocab.encode(answer);
    t.push_back(Vocab::kEosId);
    return t;
  }();

  auto combined = [&](const Adapter& ad) {
    ToyTransformer eff = merge_adapter(base, ad);
    const double nll_ctx = sequence_nll(eff, ctx_prompt, target, &plan);
    const double nll_noctx = sequence_nll(eff, q_prompt, target, &plan);
    return alpha * nll_ctx + beta * kpo_from_scores(-nll_ctx, -nll_noctx, gamma);
  };
  REQUIRE(kpo_from_scores(-sequence_nll(merge_adapter(base, adapter), ctx_prompt, target, &plan),
                          -sequence_nll(merge_adapter(base, adapter), q_prompt, target, &plan),
                          gamma) > 0.0);

  // Analytic: dW from both scoring passes, then dA = dW B^T, dB = A^T dW.
  ToyTransformer eff = merge_adapter(base, adapter);
  Gradients grads = Gradients::zeros_like(eff);
  nll_backward(eff, ctx_prompt, target, &plan, alpha + beta, grads);
  nll_backward(eff, q_prompt, target, &plan, -beta, grads);

  const double h = 1e-5;
  int failures = 0;
  for (std::size_t ti = 0; ti < adapter.targets.size(); ++ti) {
    AdapterTarget& t = adapter.targets[ti];
    const auto dotpos = t.name.find('.');
    const int layer = std::stoi(t.name.substr(5, dotpos - 5));
    const std::string field = t.name.substr(dotpos + 1);
    const LayerGrads& gl = grads.layers[static_cast<std::size_t>(layer)];
    const Matrix* dw = nullptr;
    if (field == "wq") dw = &gl.wq;
    else if (field == "wk") dw = &gl.wk;
    else if (field == "wv") dw = &gl.wv;
    else if (field == "wo") dw = &gl.wo;
    else if (field == "ffn_key") dw = &gl.ffn_key;
    else if (field == "ffn_value") dw = &gl.ffn_value;
    REQUIRE(dw != nullptr);
    Matrix da = matmul_abt(*dw, t.b);
    Matrix db = matmul_atb(t.a, *dw);

    for (Matrix* factor : {&t.a, &t.b}) {
      const Matrix& analytic = factor == &t.a ? da : db;
      for (std::size_t i = 0; i < factor->size(); ++i) {
        const double orig = factor->data()[i];
        factor->data()[i] = orig + h;
        const double fp = combined(adapter);
        factor->data()[i] = orig - h;
        const double fm = combined(adapter);
        factor->data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        if (!grad_close(analytic.data()[i], fd)) ++failures;
      }
    }
  }
  CHECK(failures == 0);
}
