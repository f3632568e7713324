#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "pmlab/activation.hpp"
#include "pmlab/rng.hpp"

using namespace pmlab;

TEST_CASE("position_ratio counts strictly positive coefficients") {
  CHECK(position_ratio({0, 2, 0, 3}) == 0.5);
  CHECK(position_ratio({0, 0, 0}) == 0.0);
  CHECK(position_ratio({1, 2, 3}) == 1.0);
  CHECK_THROWS(position_ratio({}));
}

TEST_CASE("position_ratio is invariant under positive rescaling") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Vector a(16);
    for (auto& v : a) v = rng.uniform() < 0.4 ? 0.0 : std::abs(rng.normal());
    double base = position_ratio(a);
    double scale = 0.01 + 10 * rng.uniform();
    Vector scaled = a;
    for (auto& v : scaled) v *= scale;
    CHECK(position_ratio(scaled) == base);
  }
}

TEST_CASE("response_ratio averages over the span") {
  ActivationTrace trace;
  trace.coefficients = {{{1.0}, {0.0}, {1.0}}};  // unused by response_ratio
  trace.ratios = {{0.25, 0.75, 0.5}};

  CHECK(response_ratio(trace, 0, 1, 2) == 0.75);
  CHECK(response_ratio(trace, 0, 0, 2) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS(response_ratio(trace, 0, 1, 1));
  CHECK_THROWS(response_ratio(trace, 0, 0, 5));
  CHECK_THROWS(response_ratio(trace, 3, 0, 1));
}

TEST_CASE("activation_gap arithmetic") {
  std::vector<std::vector<double>> unfaithful = {{0.6, 0.6}, {0.4}};
  std::vector<std::vector<double>> faithful = {{0.45}, {0.4, 0.4}};
  auto stats = activation_gap(unfaithful, faithful);
  REQUIRE(stats.size() == 2);
  CHECK(stats[0].gap == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(stats[1].gap == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(stats[0].mean_ratio_unfaithful == doctest::Approx(0.6));
  CHECK(stats[0].mean_ratio_faithful == doctest::Approx(0.45));

  // negative gaps are allowed
  auto neg = activation_gap({{0.2}}, {{0.5}});
  CHECK(neg[0].gap == doctest::Approx(-0.3));

  CHECK_THROWS(activation_gap({{}}, {{0.5}}));
}

TEST_CASE("activation_gap is antisymmetric") {
  Rng rng(17);
  std::vector<std::vector<double>> a(4), b(4);
  for (int l = 0; l < 4; ++l) {
    for (int i = 0; i < 10; ++i) {
      a[l].push_back(rng.uniform());
      b[l].push_back(rng.uniform());
    }
  }
  auto ab = activation_gap(a, b);
  auto ba = activation_gap(b, a);
  for (int l = 0; l < 4; ++l) CHECK(std::abs(ab[l].gap + ba[l].gap) < 1e-12);
}

TEST_CASE("layer_pcc identity and error cases") {
  // ratios exactly equal to the unfaithfulness indicator (1 - y_f)
  std::vector<std::vector<double>> ratios;
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) {
    int y = i % 2;
    labels.push_back(y);
    ratios.push_back({1.0 - y, 0.3 + 0.01 * i});
  }
  auto corr = layer_pcc(ratios, labels, 500, 9);
  CHECK(corr[0].pcc == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(corr[0].p_value > 0.0);
  CHECK(corr[0].p_value <= 1.0);

  std::vector<int> ones(labels.size(), 1);
  CHECK_THROWS(layer_pcc(ratios, ones, 500, 9));
}

TEST_CASE("layer_pcc sign flips when labels are complemented") {
  Rng rng(23);
  std::vector<std::vector<double>> ratios;
  std::vector<int> labels, flipped;
  for (int i = 0; i < 30; ++i) {
    int y = rng.uniform() < 0.5 ? 0 : 1;
    labels.push_back(y);
    flipped.push_back(1 - y);
    ratios.push_back({rng.uniform(), 0.2 + 0.6 * rng.uniform()});
  }
  const int sum = std::accumulate(labels.begin(), labels.end(), 0);
  REQUIRE(sum > 0);
  REQUIRE(sum < 30);
  auto a = layer_pcc(ratios, labels, 500, 10);
  auto b = layer_pcc(ratios, flipped, 500, 10);
  for (std::size_t l = 0; l < a.size(); ++l) {
    CHECK(std::abs(a[l].pcc + b[l].pcc) < 1e-12);
  }
}

namespace {

std::vector<LayerStats> stats_from_gaps(const Vector& gaps) {
  std::vector<LayerStats> stats;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    LayerStats s;
    s.layer = static_cast<int>(i);
    s.gap = gaps[i];
    stats.push_back(s);
  }
  return stats;
}

}  // namespace

TEST_CASE("select_layers examples") {
  auto stats = stats_from_gaps({0.01, 0.05, 0.03, 0.08});
  auto top2 = select_layers(stats, 2, SelectionStrategy::UaGap, 0);
  CHECK(top2.layers == std::vector<int>{1, 3});

  auto bottom = select_layers(stats_from_gaps(Vector(8, 0.0)), 2, SelectionStrategy::Bottom, 0);
  CHECK(bottom.layers == std::vector<int>{0, 1});

  auto ties = select_layers(stats_from_gaps(Vector(6, 0.7)), 3, SelectionStrategy::UaGap, 0);
  CHECK(ties.layers == std::vector<int>{0, 1, 2});

  auto middle = select_layers(stats_from_gaps(Vector(8, 0.0)), 3, SelectionStrategy::Middle, 0);
  CHECK(middle.layers == std::vector<int>{3, 4, 5});
  auto middle2 = select_layers(stats_from_gaps(Vector(8, 0.0)), 2, SelectionStrategy::Middle, 0);
  CHECK(middle2.layers == std::vector<int>{3, 4});

  auto clamped = select_layers(stats_from_gaps(Vector(4, 0.0)), 9, SelectionStrategy::Bottom, 0);
  CHECK(clamped.clamped);
  CHECK(clamped.layers.size() == 4);

  auto r1 = select_layers(stats_from_gaps(Vector(8, 0.0)), 3, SelectionStrategy::Random, 42);
  auto r2 = select_layers(stats_from_gaps(Vector(8, 0.0)), 3, SelectionStrategy::Random, 42);
  CHECK(r1.layers == r2.layers);
  std::set<int> unique(r1.layers.begin(), r1.layers.end());
  CHECK(unique.size() == 3);

  CHECK_THROWS(select_layers(stats, 0, SelectionStrategy::UaGap, 0));
}

TEST_CASE("select_layers(ua_gap) equals a brute-force sort oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n_layers = 2 + static_cast<int>(rng.index(14));
    Vector gaps(static_cast<std::size_t>(n_layers));
    // quantized values force frequent ties
    for (auto& g : gaps) g = 0.05 * static_cast<double>(rng.index(7)) - 0.1;
    const int n = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n_layers)));

    auto got = select_layers(stats_from_gaps(gaps), n, SelectionStrategy::UaGap, 0);

    std::vector<int> idx(static_cast<std::size_t>(n_layers));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (gaps[static_cast<std::size_t>(a)] != gaps[static_cast<std::size_t>(b)]) {
        return gaps[static_cast<std::size_t>(a)] > gaps[static_cast<std::size_t>(b)];
      }
      return a < b;
    });
    std::vector<int> expected(idx.begin(), idx.begin() + n);
    std::sort(expected.begin(), expected.end());
    CHECK(got.layers == expected);
  }
}
