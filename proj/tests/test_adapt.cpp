#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "pmlab/adapt.hpp"
#include "pmlab/rng.hpp"

using namespace pmlab;

namespace {

ModelConfig micro_config(std::uint64_t seed = 61) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 32;
  c.seed = seed;
  return c;
}

ToyTransformer micro_model(std::uint64_t seed = 61) {
  ToyTransformer m = init_model(micro_config(seed));
  m.vocab = Vocab::build({"one two three four five six seven eight nine"});
  REQUIRE(m.vocab.size() == m.config.vocab_size);
  return m;
}

SuppressionPlan ffn_plan(std::vector<int> layers, double lambda) {
  SuppressionPlan plan;
  plan.kind = SuppressionKind::FFN;
  plan.layers = std::move(layers);
  plan.lambda = lambda;
  return plan;
}

bool same_forward(const ToyTransformer& a, const ToyTransformer& b,
                  const std::vector<int>& tokens) {
  auto la = forward(a, tokens);
  auto lb = forward(b, tokens);
  for (std::size_t i = 0; i < la.size(); ++i) {
    if (la[i] != lb[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("kat_loss on a uniform model is log vocab") {
  ToyTransformer m = micro_model();
  m.embedding.fill(0.0);
  ModelView view = apply_plan(m, ffn_plan({}, 1.0));
  double loss = kat_loss(view, "one two", "three four", "five");
  CHECK(loss == doctest::Approx(std::log(11.0)).epsilon(1e-12));
  CHECK(loss >= 0.0);
}

TEST_CASE("kpo_from_scores arithmetic") {
  CHECK(kpo_from_scores(-2.0, -5.0, 1.0) == 0.0);
  CHECK(kpo_from_scores(-2.0, -5.0, 5.0) == doctest::Approx(2.0));
  CHECK(kpo_from_scores(-3.0, -3.0, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("kpo_from_scores hinge properties on random triples") {
  Rng rng(67);
  for (int i = 0; i < 10000; ++i) {
    double llc = -8.0 * rng.uniform();
    double llq = -8.0 * rng.uniform();
    double gamma = 6.0 * rng.uniform();
    double v = kpo_from_scores(llc, llq, gamma);
    CHECK(v >= 0.0);
    if (llc - llq >= gamma) CHECK(v == 0.0);
    else CHECK(v > 0.0);
  }
}

TEST_CASE("kpo_loss of a context-blind model equals gamma") {
  ToyTransformer m = micro_model();
  m.embedding.fill(0.0);  // uniform either way: both scores coincide
  ModelView view = apply_plan(m, ffn_plan({}, 1.0));
  CHECK(kpo_loss(view, "one two", "three four", "five", 1.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gamma_at schedule") {
  AdaptConfig c;
  c.gamma_start = 1.0;
  c.gamma_end = 5.0;
  CHECK(gamma_at(0, 100, c) == doctest::Approx(1.0));
  CHECK(gamma_at(100, 100, c) == doctest::Approx(5.0));
  CHECK(gamma_at(50, 100, c) == doctest::Approx(3.0));
  CHECK_THROWS(gamma_at(0, 0, c));
  CHECK_THROWS(gamma_at(5, 4, c));

  // monotone nondecreasing
  double prev = -1.0;
  for (int s = 0; s <= 20; ++s) {
    double g = gamma_at(s, 20, c);
    CHECK(g >= prev);
    prev = g;
  }
}

TEST_CASE("combined_loss degenerate weightings") {
  ToyTransformer m = micro_model(63);
  ModelView view = apply_plan(m, ffn_plan({1}, 0.0));
  AdaptExample ex{"one two", "three four", "five"};

  AdaptConfig kat_only;
  kat_only.alpha = 0.7;
  kat_only.beta = 0.0;
  double kat = kat_loss(view, ex.question, ex.context, ex.answer);
  CHECK(combined_loss(view, ex, kat_only, 0, 10) == doctest::Approx(0.7 * kat).epsilon(1e-12));

  // combined is linear in (alpha, beta)
  AdaptConfig ab;
  ab.alpha = 0.3;
  ab.beta = 0.6;
  AdaptConfig ab2;
  ab2.alpha = 0.6;
  ab2.beta = 1.2;
  CHECK(combined_loss(view, ex, ab2, 3, 10) ==
        doctest::Approx(2.0 * combined_loss(view, ex, ab, 3, 10)).epsilon(1e-12));

  AdaptConfig both_zero;
  both_zero.alpha = 0.0;
  both_zero.beta = 0.0;
  CHECK_THROWS(both_zero.validate());
}

TEST_CASE("adapter target set excludes suppressed ffn matrices") {
  ToyTransformer m = micro_model(65);
  AdaptConfig c;
  c.rank = 2;
  Adapter adapter = init_adapter(m, ffn_plan({0}, 0.0), c);

  bool saw_l1_ffn = false;
  for (const auto& t : adapter.targets) {
    CHECK(t.name.find("layer0.ffn") == std::string::npos);
    if (t.name.find("layer1.ffn") != std::string::npos) saw_l1_ffn = true;
    // attention matrices adapt everywhere, including suppressed layers
  }
  CHECK(saw_l1_ffn);
  int attn_targets = 0;
  for (const auto& t : adapter.targets) {
    if (t.name.find(".w") != std::string::npos) ++attn_targets;
  }
  CHECK(attn_targets == 8);  // 2 layers x Q,K,V,O
}

TEST_CASE("zero-step training and zero-B adapters leave the model unchanged") {
  ToyTransformer m = micro_model(69);
  std::vector<AdaptExample> data = {{"one two", "three four", "five"}};
  AdaptConfig c;
  c.steps = 0;
  c.rank = 2;
  SuppressionPlan plan = ffn_plan({1}, 0.0);

  AdaptResult res = train_adapter(m, plan, data, c);
  for (const auto& t : res.adapter.targets) {
    for (std::size_t i = 0; i < t.b.size(); ++i) CHECK(t.b.data()[i] == 0.0);
  }
  ToyTransformer merged = merge_adapter(m, res.adapter);
  CHECK(same_forward(m, merged, {0, 3, 5, 2}));
  CHECK(res.initial_mean_loss == res.final_mean_loss);
}

TEST_CASE("train_adapter is deterministic and only touches the adapter") {
  ToyTransformer m = micro_model(71);
  std::vector<AdaptExample> data = {
      {"one two", "three four", "five"},
      {"two three", "four five", "six"},
      {"three four", "five six", "seven"},
  };
  AdaptConfig c;
  c.steps = 12;
  c.batch = 2;
  c.rank = 2;
  c.lr = 1e-3;
  c.seed = 5;
  SuppressionPlan plan = ffn_plan({1}, 0.0);

  ToyTransformer base_copy = m;
  AdaptResult r1 = train_adapter(m, plan, data, c);
  AdaptResult r2 = train_adapter(m, plan, data, c);
  CHECK(same_forward(m, base_copy, {0, 3, 5, 2}));  // base untouched
  REQUIRE(r1.adapter.targets.size() == r2.adapter.targets.size());
  for (std::size_t i = 0; i < r1.adapter.targets.size(); ++i) {
    CHECK(r1.adapter.targets[i].a == r2.adapter.targets[i].a);
    CHECK(r1.adapter.targets[i].b == r2.adapter.targets[i].b);
  }
  REQUIRE(r1.log.size() == 12);
  CHECK(r1.log.front().gamma == doctest::Approx(1.0));
  for (const auto& e : r1.log) CHECK(std::isfinite(e.combined));
}

TEST_CASE("merge_adapter materializes W + AB") {
  ToyTransformer m = micro_model(73);
  AdaptConfig c;
  c.rank = 2;
  c.seed = 99;
  Adapter adapter = init_adapter(m, ffn_plan({}, 1.0), c);
  Rng rng(101);
  for (auto& t : adapter.targets) {
    for (std::size_t i = 0; i < t.b.size(); ++i) t.b.data()[i] = 0.1 * rng.normal();
  }

  // independent materialization path: explicit triple loop per target
  ToyTransformer expected = m;
  for (const auto& t : adapter.targets) {
    Matrix* w = find_param_matrix(expected, t.name);
    REQUIRE(w != nullptr);
    for (std::size_t r = 0; r < w->rows(); ++r) {
      for (std::size_t k = 0; k < t.a.cols(); ++k) {
        for (std::size_t col = 0; col < w->cols(); ++col) {
          (*w)(r, col) += t.a(r, k) * t.b(k, col);
        }
      }
    }
  }
  ToyTransformer merged = merge_adapter(m, adapter);
  std::vector<int> tokens = {0, 2, 6, 4};
  auto lm = forward(merged, tokens);
  auto le = forward(expected, tokens);
  for (std::size_t i = 0; i < lm.size(); ++i) {
    for (std::size_t v = 0; v < lm[i].size(); ++v) {
      CHECK(lm[i][v] == doctest::Approx(le[i][v]).epsilon(1e-9));
    }
  }

  // merging twice applies the update twice
  ToyTransformer twice = merge_adapter(merged, adapter);
  CHECK_FALSE(same_forward(twice, merged, tokens));
}

TEST_CASE("adapter checkpoints round-trip") {
  namespace fs = std::filesystem;
  ToyTransformer m = micro_model(75);
  AdaptConfig c;
  c.rank = 3;
  c.seed = 42;
  Adapter adapter = init_adapter(m, ffn_plan({0}, 0.0), c);
  Rng rng(7);
  for (auto& t : adapter.targets) {
    for (std::size_t i = 0; i < t.b.size(); ++i) t.b.data()[i] = rng.normal();
  }

  const std::string path = (fs::temp_directory_path() / "pmlab_test_adapter.pmck").string();
  nlohmann::ordered_json meta;
  meta["config_hash"] = "deadbeef";
  save_adapter(adapter, path, meta);
  Adapter loaded = load_adapter(path);
  CHECK(loaded.config.rank == 3);
  CHECK(loaded.plan.kind == SuppressionKind::FFN);
  CHECK(loaded.plan.layers == std::vector<int>{0});
  REQUIRE(loaded.targets.size() == adapter.targets.size());
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    CHECK(loaded.targets[i].name == adapter.targets[i].name);
    CHECK(loaded.targets[i].a == adapter.targets[i].a);
    CHECK(loaded.targets[i].b == adapter.targets[i].b);
  }
  fs::remove(path);
}
