#include <cmath>
#include <random>

#include "doctest.h"

#include "brainage/error.hpp"
#include "brainage/stats.hpp"
#include "oracles.hpp"

using namespace brainage;

TEST_CASE("wilcoxon rejects identical or too-short samples") {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};
  CHECK_THROWS_AS(wilcoxon_signed_rank(a, a), InsufficientDataError);
  CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2, 3, 4}, {0, 0, 0, 0}), InsufficientDataError);
  CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {1}), ValidationError);
}

TEST_CASE("wilcoxon exact hand cases") {
  // All six differences positive: only the all-plus assignment is as extreme.
  const auto r = wilcoxon_signed_rank({2, 3, 4, 5, 6, 7}, {1, 1, 1, 1, 1, 1});
  CHECK(r.exact);
  CHECK(r.n_effective == 6);
  CHECK(r.w_plus == 21.0);
  CHECK(r.w_minus == 0.0);
  CHECK(r.p_value == 2.0 / 64.0);

  // Antisymmetric differences: W+ = W-, p = 1.
  const auto s = wilcoxon_signed_rank({1, -1, 2, -2, 3, -3}, {0, 0, 0, 0, 0, 0});
  CHECK(s.w_plus == s.w_minus);
  CHECK(s.p_value == 1.0);
}

TEST_CASE("wilcoxon exact path equals full enumeration") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> level(-4, 4);
  std::uniform_real_distribution<double> cont(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + trial % 8;
    std::vector<double> a(n), b(n, 0.0);
    for (auto& x : a) {
      // Mix of tied integer differences and continuous ones.
      x = trial % 2 == 0 ? static_cast<double>(level(rng)) : cont(rng);
    }
    std::size_t nonzero = 0;
    for (double x : a) nonzero += x != 0.0;
    if (nonzero < 5) continue;
    const auto r = wilcoxon_signed_rank(a, b);
    CHECK(r.exact);
    CHECK(std::fabs(r.p_value - oracle::wilcoxon_enumerated(a, b)) < 1e-12);
  }
}

TEST_CASE("wilcoxon normal approximation") {
  const std::vector<double> a{5.1, 6.3, 4.2, 7.7, 5.5, 6.1, 4.9, 5.8, 6.6, 7.2,
                              5.0, 6.4, 5.9, 4.4, 6.8, 5.3, 7.0, 6.0, 5.6, 4.8};
  const std::vector<double> b{4.8, 6.0, 4.5, 7.0, 5.1, 6.3, 4.1, 5.2, 6.0, 6.5,
                              5.4, 5.9, 5.5, 4.6, 6.1, 5.0, 6.2, 6.1, 5.0, 4.3};
  const auto r = wilcoxon_signed_rank(a, b);
  CHECK_FALSE(r.exact);
  REQUIRE(r.z.has_value());
  CHECK(r.statistic == 20.5);
  // Reference value from a tie-corrected normal approximation without
  // continuity correction.
  CHECK(r.p_value == doctest::Approx(0.0015725556801807292).epsilon(1e-9));
}

TEST_CASE("wilcoxon swaps sides symmetrically") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> a(15), b(15);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = g(rng) + 0.3;
    b[i] = g(rng);
  }
  const auto ab = wilcoxon_signed_rank(a, b);
  const auto ba = wilcoxon_signed_rank(b, a);
  CHECK(ab.w_plus == ba.w_minus);
  CHECK(ab.p_value == doctest::Approx(ba.p_value).epsilon(1e-12));
}

TEST_CASE("average ranks") {
  const auto r = average_ranks({3.0, 1.0, 3.0, 2.0});
  CHECK(r == std::vector<double>{3.5, 1.0, 3.5, 2.0});
}

TEST_CASE("holm worked examples") {
  const auto all = holm_bonferroni({0.01, 0.02, 0.03}, 0.05);
  CHECK(all.reject == std::vector<bool>{true, true, true});
  const auto none = holm_bonferroni({0.04, 0.04}, 0.05);
  CHECK(none.reject == std::vector<bool>{false, false});
  const auto single = holm_bonferroni({0.05}, 0.05);
  CHECK(single.reject == std::vector<bool>{true});
  CHECK(single.adjusted[0] == 0.05);
  // Step-down stops at the first failure even if a later p would pass.
  const auto stop = holm_bonferroni({0.001, 0.04, 0.03}, 0.05);
  CHECK(stop.reject == std::vector<bool>{true, false, false});
  CHECK(stop.order == std::vector<std::size_t>{0, 2, 1});
}

TEST_CASE("holm sits between bonferroni and uncorrected and ignores input order") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(1 + trial % 7);
    for (auto& x : p) x = u(rng);
    const auto h = holm_bonferroni(p);
    const double m = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] <= 0.05 / m) CHECK(h.reject[i]);
      if (p[i] > 0.05) CHECK_FALSE(h.reject[i]);
      CHECK(h.adjusted[i] >= p[i]);
    }
    std::vector<std::size_t> perm(p.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> q(p.size());
    for (std::size_t i = 0; i < perm.size(); ++i) q[i] = p[perm[i]];
    const auto hq = holm_bonferroni(q);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(hq.reject[i] == h.reject[perm[i]]);
  }
}

TEST_CASE("holm rejects invalid p-values") {
  CHECK_THROWS_AS(holm_bonferroni({0.1, 1.5}), ValidationError);
  CHECK_THROWS_AS(holm_bonferroni({-0.1}), ValidationError);
  CHECK_THROWS_AS(holm_bonferroni({std::nan("")}), ValidationError);
  CHECK_THROWS_AS(holm_bonferroni({}), ValidationError);
}
