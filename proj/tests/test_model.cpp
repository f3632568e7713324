#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pmlab/checkpoint.hpp"
#include "pmlab/model.hpp"
#include "pmlab/numerics.hpp"
#include "pmlab/rng.hpp"

using namespace pmlab;

namespace {

ModelConfig micro_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  c.seed = seed;
  return c;
}

Vector random_input(int d, std::uint64_t seed) {
  Rng rng(seed);
  Vector x(static_cast<std::size_t>(d));
  for (auto& v : x) v = rng.normal();
  return x;
}

bool params_equal(const ToyTransformer& a, const ToyTransformer& b) {
  if (!(a.embedding == b.embedding) || a.final_norm != b.final_norm) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    if (!(x.wq == y.wq && x.wk == y.wk && x.wv == y.wv && x.wo == y.wo &&
          x.ffn_key == y.ffn_key && x.ffn_value == y.ffn_value) ||
        x.attn_norm != y.attn_norm || x.ffn_norm != y.ffn_norm) {
      return false;
    }
  }
  return true;
}

// All-zero embedding makes every logit exactly zero: a uniform model.
ToyTransformer uniform_model(int vocab) {
  ModelConfig c = micro_config();
  c.vocab_size = vocab;
  ToyTransformer m = init_model(c);
  m.embedding.fill(0.0);
  return m;
}

}  // namespace

TEST_CASE("init_model determinism and validation") {
  ToyTransformer a = init_model(micro_config(5));
  ToyTransformer b = init_model(micro_config(5));
  CHECK(params_equal(a, b));

  ToyTransformer c = init_model(micro_config(6));
  CHECK_FALSE(params_equal(a, c));

  ModelConfig bad = micro_config();
  bad.d_model = 63;
  bad.n_heads = 4;
  CHECK_THROWS(init_model(bad));

  ModelConfig narrow = micro_config();
  narrow.d_ffn = narrow.d_model - 1;
  CHECK_THROWS(init_model(narrow));
}

TEST_CASE("ffn_forward lambda behavior") {
  ToyTransformer m = init_model(micro_config(3));
  Vector x = random_input(m.config.d_model, 17);

  // lambda = 0 silences the sublayer exactly
  for (double v : ffn_forward(m, x, 0, 0.0)) CHECK(v == 0.0);

  // lambda = 1 equals the plain two-matrix computation bit-exactly
  Vector z = matvec(m.layers[0].ffn_key, x);
  for (auto& v : z) v = v > 0.0 ? v : 0.0;
  Vector manual = matvec_transposed(m.layers[0].ffn_value, z);
  Vector one = ffn_forward(m, x, 0, 1.0);
  for (std::size_t i = 0; i < manual.size(); ++i) CHECK(one[i] == manual[i]);

  // exact linearity in lambda
  for (double lambda : {0.25, 0.5, 0.75, 1.25, 2.0}) {
    Vector scaled = ffn_forward(m, x, 0, lambda);
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(scaled[i] == lambda * one[i]);
  }

  CHECK_THROWS(ffn_forward(m, x, 99, 1.0));
  CHECK_THROWS(ffn_forward(m, Vector{1.0}, 0, 1.0));
  CHECK_THROWS(ffn_forward(m, x, 0, -0.5));
}

TEST_CASE("ffn_decompose matches the matrix form") {
  ToyTransformer m = init_model(micro_config(4));
  for (int trial = 0; trial < 100; ++trial) {
    Vector x = random_input(m.config.d_model, 100 + trial);
    int layer = trial % m.config.n_layers;
    auto [coeff, recon] = ffn_decompose(m, x, layer);
    Vector direct = ffn_forward(m, x, layer, 1.0);
    for (std::size_t i = 0; i < recon.size(); ++i) {
      CHECK(std::abs(recon[i] - direct[i]) < 1e-9);
    }
    for (double a : coeff) CHECK(a >= 0.0);
  }
}

TEST_CASE("ffn_decompose handcrafted cases") {
  ModelConfig c = micro_config();
  c.n_layers = 1;
  ToyTransformer m = init_model(c);
  auto& p = m.layers[0];

  // x in the null space of relu(Kx): make every row dot negative
  p.ffn_key.fill(1.0);
  Vector x(static_cast<std::size_t>(c.d_model), -1.0);
  auto [coeff, recon] = ffn_decompose(m, x, 0);
  for (double a : coeff) CHECK(a == 0.0);
  for (double r : recon) CHECK(r == 0.0);

  // a single active subkey reconstructs c * v_j
  p.ffn_key.fill(0.0);
  p.ffn_key(3, 0) = 2.0;  // a_3 = 2 * x[0]
  Vector e0(static_cast<std::size_t>(c.d_model), 0.0);
  e0[0] = 1.5;
  auto [coeff2, recon2] = ffn_decompose(m, e0, 0);
  CHECK(coeff2[3] == doctest::Approx(3.0));
  for (std::size_t i = 0; i < recon2.size(); ++i) {
    CHECK(recon2[i] == doctest::Approx(3.0 * p.ffn_value(3, i)).epsilon(1e-12));
  }
}

TEST_CASE("forward is causal") {
  ToyTransformer m = init_model(micro_config(9));
  std::vector<int> tokens = {1, 4, 7, 2, 9, 3};
  auto logits = forward(m, tokens);

  std::vector<int> permuted = tokens;
  std::swap(permuted[4], permuted[5]);
  auto logits2 = forward(m, permuted);
  for (std::size_t pos = 0; pos < 4; ++pos) {
    for (std::size_t v = 0; v < logits[pos].size(); ++v) {
      CHECK(logits[pos][v] == logits2[pos][v]);
    }
  }
}

TEST_CASE("forward with identity plan is bit-identical") {
  ToyTransformer m = init_model(micro_config(10));
  std::vector<int> tokens = {0, 5, 2, 8};

  SuppressionPlan plan;
  plan.kind = SuppressionKind::FFN;
  plan.layers = {0, 1};
  plan.lambda = 1.0;

  auto base = forward(m, tokens);
  auto planned = forward(m, tokens, &plan);
  for (std::size_t i = 0; i < base.size(); ++i) {
    for (std::size_t v = 0; v < base[i].size(); ++v) CHECK(base[i][v] == planned[i][v]);
  }
}

TEST_CASE("forward traces activation ratios in range") {
  ToyTransformer m = init_model(micro_config(12));
  std::vector<int> tokens = {1, 2, 3, 4, 5};
  ActivationTrace trace;
  forward(m, tokens, nullptr, &trace);
  CHECK(trace.n_layers() == m.config.n_layers);
  CHECK(trace.n_positions() == tokens.size());
  for (const auto& layer : trace.ratios) {
    for (double r : layer) {
      CHECK(r >= 0.0);
      CHECK(r <= 1.0);
    }
  }
  for (const auto& layer : trace.coefficients) {
    for (const auto& pos : layer) {
      for (double a : pos) CHECK(a >= 0.0);
    }
  }

  CHECK_THROWS(forward(m, std::vector<int>{0, 99}));
  std::vector<int> toolong(static_cast<std::size_t>(m.config.max_seq_len) + 1, 1);
  CHECK_THROWS(forward(m, toolong));
}

TEST_CASE("sequence_nll on a uniform model") {
  ToyTransformer m = uniform_model(16);
  std::vector<int> prompt = {0, 3};
  std::vector<int> target = {5, 9, 2};
  CHECK(sequence_nll(m, prompt, target) == doctest::Approx(std::log(16.0)).epsilon(1e-12));

  // identity plan changes nothing
  SuppressionPlan plan;
  plan.kind = SuppressionKind::Layer;
  plan.layers = {0};
  plan.lambda = 1.0;
  CHECK(sequence_nll(m, prompt, target, &plan) == sequence_nll(m, prompt, target));

  CHECK_THROWS(sequence_nll(m, prompt, std::vector<int>{}));
}

TEST_CASE("sequence_nll of a two-token target is the mean of per-token losses") {
  ToyTransformer m = init_model(micro_config(23));
  std::vector<int> prompt = {1, 2};
  std::vector<int> t1 = {7};
  std::vector<int> t2 = {7, 4};
  double first = sequence_nll(m, prompt, t1);
  std::vector<int> prompt2 = {1, 2, 7};
  double second = sequence_nll(m, prompt2, std::vector<int>{4});
  CHECK(sequence_nll(m, prompt, t2) == doctest::Approx((first + second) / 2.0).epsilon(1e-12));
}

TEST_CASE("sample determinism") {
  ToyTransformer m = init_model(micro_config(29));
  std::vector<int> prompt = {3, 4};

  auto greedy1 = sample(m, prompt, 6, 0.0, 0);
  auto greedy2 = sample(m, prompt, 6, 0.0, 12345);  // seed ignored at temperature 0
  CHECK(greedy1 == greedy2);

  auto hot1 = sample(m, prompt, 6, 1.0, 77);
  auto hot2 = sample(m, prompt, 6, 1.0, 77);
  CHECK(hot1 == hot2);

  CHECK(sample(m, prompt, 0, 1.0, 77).empty());
  CHECK_THROWS(sample(m, prompt, 4, -1.0, 0));
}

TEST_CASE("train_lm basics") {
  ToyTransformer m = init_model(micro_config(31));
  std::vector<SeqExample> corpus = {
      {{0, 3, 5}, {7, 1}},
      {{0, 4, 5}, {8, 1}},
      {{0, 2, 6}, {9, 1}},
  };

  ToyTransformer untouched = m;
  auto log0 = train_lm(m, corpus, 0, 1e-2, 2, 42);
  CHECK(log0.empty());
  CHECK(params_equal(m, untouched));

  ToyTransformer m1 = init_model(micro_config(31));
  ToyTransformer m2 = init_model(micro_config(31));
  auto log1 = train_lm(m1, corpus, 40, 1e-2, 2, 42);
  auto log2 = train_lm(m2, corpus, 40, 1e-2, 2, 42);
  CHECK(params_equal(m1, m2));
  REQUIRE(log1.size() == 40);
  CHECK(log1.back().loss < log1.front().loss);
  CHECK(m1.all_parameters_finite());

  CHECK_THROWS(train_lm(m, {}, 10, 1e-2, 2, 1));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "pmlab_test_ckpt.pmck").string();

  ModelConfig c = micro_config(37);
  ToyTransformer m = init_model(c);
  m.vocab = Vocab::build({"alpha beta gamma delta epsilon zeta eta theta iota"});
  // vocab must match the config used at init
  CHECK(m.vocab.size() == c.vocab_size);

  nlohmann::ordered_json meta;
  meta["steps"] = 123;
  save_checkpoint(m, path, meta);
  ToyTransformer loaded = load_checkpoint(path);
  CHECK(params_equal(m, loaded));
  CHECK(loaded.vocab.tokens() == m.vocab.tokens());
  CHECK(checkpoint_metadata(path).at("steps").get<int>() == 123);

  std::vector<int> tokens = {0, 5, 2, 8, 1};
  auto a = forward(m, tokens);
  auto b = forward(loaded, tokens);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t v = 0; v < a[i].size(); ++v) CHECK(a[i][v] == b[i][v]);
  }
  fs::remove(path);
}

TEST_CASE("checkpoint rejects corruption") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "pmlab_test_corrupt.pmck").string();
  ToyTransformer m = init_model(micro_config(41));
  save_checkpoint(m, path, {});

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS(load_checkpoint(path));

  // truncate the blob
  save_checkpoint(m, path, {});
  const auto full_size = fs::file_size(path);
  fs::resize_file(path, full_size - 16);
  CHECK_THROWS(load_checkpoint(path));
  fs::remove(path);
}
