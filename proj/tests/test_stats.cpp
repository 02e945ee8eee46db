#include "mahgcn/stats.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace mahgcn;
using namespace mahgcn::stats;

namespace {

// Independent enumeration oracle for the signed-rank test: walks all 2^n sign
// patterns of the observed |differences| and counts tail probabilities.
double wilcoxon_oracle(const std::vector<double>& x, const std::vector<double>& y,
                       Side side) {
  std::vector<double> abs_d;
  std::vector<int> sign;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    if (d == 0.0) continue;
    abs_d.push_back(std::abs(d));
    sign.push_back(d > 0 ? 1 : 0);
  }
  auto rank = midranks(abs_d);
  double w_obs = 0.0;
  for (std::size_t i = 0; i < sign.size(); ++i)
    if (sign[i]) w_obs += rank[i];

  std::size_t n = abs_d.size();
  double ge = 0.0, le = 0.0, total = std::pow(2.0, static_cast<double>(n));
  for (std::size_t mask = 0; mask < (1u << n); ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) w += rank[i];
    if (w >= w_obs - 1e-12) ge += 1.0;
    if (w <= w_obs + 1e-12) le += 1.0;
  }
  switch (side) {
    case Side::Greater: return ge / total;
    case Side::Less: return le / total;
    case Side::TwoSided:
      return std::min(1.0, 2.0 * std::min(ge / total, le / total));
  }
  return 1.0;
}

// Enumeration oracle for the rank-sum test over all group-a index subsets.
double mann_whitney_oracle(const std::vector<double>& a,
                           const std::vector<double>& b, Side side) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  auto rank = midranks(pooled);
  std::size_t m = a.size(), n_tot = pooled.size();
  double offset = static_cast<double>(m) * (m + 1) / 2.0;
  double u_obs = -offset;
  for (std::size_t i = 0; i < m; ++i) u_obs += rank[i];

  std::vector<int> mask(n_tot, 0);
  std::fill(mask.begin(), mask.begin() + static_cast<long>(m), 1);
  std::sort(mask.begin(), mask.end());
  double ge = 0.0, le = 0.0, total = 0.0;
  do {
    double u = -offset;
    for (std::size_t i = 0; i < n_tot; ++i)
      if (mask[i]) u += rank[i];
    total += 1.0;
    if (u >= u_obs - 1e-12) ge += 1.0;
    if (u <= u_obs + 1e-12) le += 1.0;
  } while (std::next_permutation(mask.begin(), mask.end()));
  switch (side) {
    case Side::Greater: return ge / total;
    case Side::Less: return le / total;
    case Side::TwoSided: return std::min(1.0, 2.0 * std::min(ge / total, le / total));
  }
  return 1.0;
}

}  // namespace

TEST_CASE("wilcoxon all-positive differences, n=3, one-sided") {
  std::vector<double> x = {2.0, 3.0, 4.0}, y = {1.0, 1.5, 2.0};
  CHECK(wilcoxon_signed_rank(x, y, Side::Greater) == doctest::Approx(0.125));
}

TEST_CASE("wilcoxon symmetric swap sits at distribution center") {
  std::vector<double> x = {1.0, 5.0, 2.0, 7.0}, y = {5.0, 1.0, 2.0, 7.0};
  double p = wilcoxon_signed_rank(x, y, Side::TwoSided);
  CHECK(p == doctest::Approx(1.0));
}

TEST_CASE("wilcoxon rejects all-zero differences") {
  std::vector<double> x = {1.0, 2.0, 3.0};
  CHECK_THROWS_AS(wilcoxon_signed_rank(x, x, Side::TwoSided), Error);
}

TEST_CASE("wilcoxon normal approximation tracks exact at n=12") {
  // same data evaluated by exact enumeration and by the large-sample path
  Rng rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x, y;
    for (int i = 0; i < 12; ++i) {
      x.push_back(rng.normal() + 0.4);
      y.push_back(rng.normal());
    }
    double exact = wilcoxon_signed_rank(x, y, Side::Greater);
    // rebuild with 18 padding pairs to force the approximation path, using
    // symmetric noise that cancels in distribution; instead compare the
    // approximation formula directly via the oracle at the same statistic
    std::vector<double> diffs;
    for (std::size_t i = 0; i < x.size(); ++i) diffs.push_back(x[i] - y[i]);
    std::vector<double> abs_d;
    for (double d : diffs) abs_d.push_back(std::abs(d));
    auto rank = midranks(abs_d);
    double w = 0.0;
    for (std::size_t i = 0; i < diffs.size(); ++i)
      if (diffs[i] > 0) w += rank[i];
    double n = 12.0;
    double mean = n * (n + 1) / 4.0, sd = std::sqrt(n * (n + 1) * (2 * n + 1) / 24.0);
    double approx = normal_cdf(-(w - 0.5 - mean) / sd);
    CHECK(std::abs(exact - approx) < 0.01);
  }
}

TEST_CASE("wilcoxon exact agrees with enumeration oracle up to 10 pairs") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t n = 3 + trial % 8;
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid provokes ties
      x.push_back(std::round(rng.normal() * 2.0) / 2.0 + 0.25);
      y.push_back(std::round(rng.normal() * 2.0) / 2.0);
    }
    bool all_zero = true;
    for (std::size_t i = 0; i < n; ++i)
      if (x[i] != y[i]) all_zero = false;
    if (all_zero) continue;
    for (Side side : {Side::Less, Side::Greater, Side::TwoSided}) {
      CHECK(wilcoxon_signed_rank(x, y, side) ==
            doctest::Approx(wilcoxon_oracle(x, y, side)).epsilon(1e-12));
    }
  }
}

TEST_CASE("mann-whitney textbook case") {
  std::vector<double> a = {1.0, 2.0}, b = {3.0, 4.0};
  CHECK(mann_whitney_u(a, b, Side::Less) == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("mann-whitney identical groups is central") {
  std::vector<double> a = {1.0, 2.0, 3.0}, b = {1.0, 2.0, 3.0};
  CHECK(mann_whitney_u(a, b, Side::TwoSided) == doctest::Approx(1.0));
}

TEST_CASE("mann-whitney p decreases with shift") {
  Rng rng(13);
  std::vector<double> base;
  for (int i = 0; i < 40; ++i) base.push_back(rng.normal());
  double prev = 1.1;
  for (double shift : {0.0, 0.3, 0.6, 0.9, 1.2}) {
    std::vector<double> shifted;
    for (double v : base) shifted.push_back(v + shift + 0.001 * shift);
    std::vector<double> other;
    Rng rng2(14);
    for (int i = 0; i < 40; ++i) other.push_back(rng2.normal());
    double p = mann_whitney_u(other, shifted, Side::Less);
    CHECK(p <= prev + 1e-12);
    prev = p;
  }
}

TEST_CASE("mann-whitney exact agrees with enumeration oracle up to 10 obs") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t m = 2 + trial % 4, n = 2 + (trial / 4) % 4;
    std::vector<double> a, b;
    for (std::size_t i = 0; i < m; ++i)
      a.push_back(std::round(rng.normal() * 2.0) / 2.0);
    for (std::size_t i = 0; i < n; ++i)
      b.push_back(std::round(rng.normal() * 2.0) / 2.0);
    for (Side side : {Side::Less, Side::Greater, Side::TwoSided}) {
      CHECK(mann_whitney_u(a, b, side) ==
            doctest::Approx(mann_whitney_oracle(a, b, side)).epsilon(1e-12));
    }
  }
}

TEST_CASE("benjamini-hochberg hand-checked case") {
  auto adj = fdr_correct({0.01, 0.02, 0.03, 0.04});
  for (double v : adj) CHECK(v == doctest::Approx(0.04));
}

TEST_CASE("benjamini-hochberg edge cases") {
  CHECK(fdr_correct({0.3})[0] == doctest::Approx(0.3));
  auto equal = fdr_correct({0.2, 0.2, 0.2});
  for (double v : equal) CHECK(v == doctest::Approx(0.2));
  auto adj = fdr_correct({0.001, 0.5, 0.04});
  CHECK(adj[0] >= 0.001);
  CHECK(adj[1] >= adj[2]);  // monotone in sorted order
}

TEST_CASE("chi-square identical proportions") {
  auto [stat, p] = chi_square_2x2(10, 20, 5, 10);
  CHECK(stat == doctest::Approx(0.0));
  CHECK(p == doctest::Approx(1.0));
}

TEST_CASE("chi-square diagonal table") {
  auto [stat, p] = chi_square_2x2(10, 0, 0, 10);
  CHECK(stat == doctest::Approx(20.0));
  CHECK(p == doctest::Approx(7.744e-6).epsilon(1e-3));
}

TEST_CASE("chi-square row swap invariance and zero marginal") {
  auto [s1, p1] = chi_square_2x2(8, 3, 2, 9);
  auto [s2, p2] = chi_square_2x2(2, 9, 8, 3);
  CHECK(s1 == doctest::Approx(s2));
  CHECK_THROWS_AS(chi_square_2x2(0, 0, 5, 5), Error);
}

TEST_CASE("permutation chance distribution is centered for random scores") {
  Rng rng(31);
  std::vector<FoldPredictions> folds;
  for (int f = 0; f < 10; ++f) {
    FoldPredictions fp;
    for (int i = 0; i < 60; ++i) {
      fp.scores.push_back(rng.uniform());
      fp.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    folds.push_back(fp);
  }
  auto res = permutation_chance(folds, 100, 99);
  double mean = 0.0;
  for (double v : res.chance["auc"]) mean += v;
  mean /= static_cast<double>(res.chance["auc"].size());
  CHECK(mean == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("permutation p is small for a perfect predictor") {
  Rng rng(37);
  std::vector<FoldPredictions> folds;
  for (int f = 0; f < 10; ++f) {
    FoldPredictions fp;
    for (int i = 0; i < 200; ++i) {
      int y = rng.bernoulli(0.5) ? 1 : 0;
      fp.scores.push_back(y == 1 ? 0.9 + 0.1 * rng.uniform()
                                 : 0.1 * rng.uniform());
      fp.labels.push_back(y);
    }
    folds.push_back(fp);
  }
  auto res = permutation_chance(folds, 100, 17);
  CHECK(res.p["auc"] < 0.001);
  CHECK(res.p["acc"] < 0.001);
}
