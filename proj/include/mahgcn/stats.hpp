#pragma once

#include "mahgcn/common.hpp"
#include "mahgcn/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace mahgcn::stats {

enum class Side { Less, Greater, TwoSided };

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Midranks of v (average rank for ties, 1-based).
inline std::vector<double> midranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j + 1 < v.size() && v[order[j + 1]] == v[order[i]]) ++j;
    double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  return rank;
}

inline double tie_term(const std::vector<double>& pooled) {
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double t3_minus_t = 0.0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    double t = static_cast<double>(j - i + 1);
    t3_minus_t += t * t * t - t;
    i = j + 1;
  }
  return t3_minus_t;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test (paired)
// ---------------------------------------------------------------------------

/// Exact by enumeration of sign assignments for n <= 25 (via a distribution
/// convolution over doubled ranks), normal approximation with tie and
/// continuity corrections above. Zero differences are dropped.
/// Side::Greater tests the alternative x > y.
inline double wilcoxon_signed_rank(const std::vector<double>& x,
                                   const std::vector<double>& y, Side side) {
  require(x.size() == y.size() && x.size() >= 3, "stats",
          "paired samples of equal length >= 3 required");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) diffs.push_back(x[i] - y[i]);
  require(!diffs.empty(), "stats", "all differences are zero");

  std::vector<double> abs_diffs;
  for (double d : diffs) abs_diffs.push_back(std::abs(d));
  std::vector<double> rank = midranks(abs_diffs);
  double w_plus = 0.0;
  for (std::size_t i = 0; i < diffs.size(); ++i)
    if (diffs[i] > 0) w_plus += rank[i];
  std::size_t n = diffs.size();

  if (n <= 25) {
    // doubled ranks are integers even under midrank ties
    std::vector<long> r2;
    long total = 0;
    for (double r : rank) {
      r2.push_back(std::lround(2.0 * r));
      total += r2.back();
    }
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    for (long r : r2)
      for (long w = total; w >= r; --w)
        count[static_cast<std::size_t>(w)] += count[static_cast<std::size_t>(w - r)];
    double denom = std::pow(2.0, static_cast<double>(n));
    long w_obs = std::lround(2.0 * w_plus);
    auto tail_ge = [&](long w) {
      double s = 0.0;
      for (long k = w; k <= total; ++k) s += count[static_cast<std::size_t>(k)];
      return s / denom;
    };
    auto tail_le = [&](long w) {
      double s = 0.0;
      for (long k = 0; k <= w; ++k) s += count[static_cast<std::size_t>(k)];
      return s / denom;
    };
    switch (side) {
      case Side::Greater: return tail_ge(w_obs);
      case Side::Less: return tail_le(w_obs);
      case Side::TwoSided:
        return std::min(1.0, 2.0 * std::min(tail_ge(w_obs), tail_le(w_obs)));
    }
  }

  double mean = static_cast<double>(n) * (n + 1) / 4.0;
  double var = static_cast<double>(n) * (n + 1) * (2.0 * n + 1) / 24.0 -
               tie_term(abs_diffs) / 48.0;
  double sd = std::sqrt(var);
  auto p_greater = normal_cdf(-(w_plus - 0.5 - mean) / sd);
  auto p_less = normal_cdf((w_plus + 0.5 - mean) / sd);
  switch (side) {
    case Side::Greater: return p_greater;
    case Side::Less: return p_less;
    case Side::TwoSided: return std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Mann-Whitney U test (unpaired)
// ---------------------------------------------------------------------------

namespace detail {

/// Tail probabilities of the U statistic of group a over all C(m+n, m)
/// arrangements of the observed pooled values (handles ties exactly).
inline void mw_exact_tails(const std::vector<double>& rank_pool, std::size_t m,
                           double u_obs, double& p_le, double& p_ge) {
  std::size_t n_total = rank_pool.size();
  double count_le = 0.0, count_ge = 0.0, count_all = 0.0;
  std::vector<std::size_t> pick(m);
  for (std::size_t i = 0; i < m; ++i) pick[i] = i;
  const double eps = 1e-9;
  double offset = static_cast<double>(m) * (m + 1) / 2.0;
  while (true) {
    double rank_sum = 0.0;
    for (std::size_t i : pick) rank_sum += rank_pool[i];
    double u = rank_sum - offset;
    count_all += 1.0;
    if (u <= u_obs + eps) count_le += 1.0;
    if (u >= u_obs - eps) count_ge += 1.0;
    // next combination
    std::size_t i = m;
    while (i > 0 && pick[i - 1] == n_total - m + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < m; ++j) pick[j] = pick[j - 1] + 1;
  }
  p_le = count_le / count_all;
  p_ge = count_ge / count_all;
}

}  // namespace detail

/// Exact for m+n <= 20, normal approximation with tie correction otherwise.
/// Side::Less tests the alternative that a tends smaller than b.
inline double mann_whitney_u(const std::vector<double>& a,
                             const std::vector<double>& b, Side side) {
  require(!a.empty() && !b.empty(), "stats", "both groups must be nonempty");
  std::size_t m = a.size(), n = b.size();
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<double> rank = midranks(pooled);
  double rank_sum_a = 0.0;
  for (std::size_t i = 0; i < m; ++i) rank_sum_a += rank[i];
  double u = rank_sum_a - static_cast<double>(m) * (m + 1) / 2.0;

  if (m + n <= 20) {
    double p_le, p_ge;
    detail::mw_exact_tails(rank, m, u, p_le, p_ge);
    switch (side) {
      case Side::Less: return p_le;
      case Side::Greater: return p_ge;
      case Side::TwoSided: return std::min(1.0, 2.0 * std::min(p_le, p_ge));
    }
  }

  double mn = static_cast<double>(m) * static_cast<double>(n);
  double n_tot = static_cast<double>(m + n);
  double mean = mn / 2.0;
  double var = mn / 12.0 *
               (n_tot + 1.0 - tie_term(pooled) / (n_tot * (n_tot - 1.0)));
  double sd = std::sqrt(std::max(var, 1e-300));
  double p_ge = normal_cdf(-(u - 0.5 - mean) / sd);
  double p_le = normal_cdf((u + 0.5 - mean) / sd);
  switch (side) {
    case Side::Less: return p_le;
    case Side::Greater: return p_ge;
    case Side::TwoSided: return std::min(1.0, 2.0 * std::min(p_le, p_ge));
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Benjamini-Hochberg FDR
// ---------------------------------------------------------------------------

inline std::vector<double> fdr_correct(const std::vector<double>& pvals) {
  std::size_t m = pvals.size();
  for (double p : pvals)
    require(p >= 0.0 && p <= 1.0, "stats", "p-value out of [0,1]");
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
  std::vector<double> adjusted(m);
  double running_min = 1.0;
  for (std::size_t k = m; k > 0; --k) {
    std::size_t idx = order[k - 1];
    double v = pvals[idx] * static_cast<double>(m) / static_cast<double>(k);
    running_min = std::min(running_min, v);
    adjusted[idx] = std::min(1.0, running_min);
  }
  return adjusted;
}

// ---------------------------------------------------------------------------
// Chi-square (2x2, no continuity correction, df = 1)
// ---------------------------------------------------------------------------

inline double chi2_sf_df1(double x) {
  // survival function of chi-square with 1 dof
  return std::erfc(std::sqrt(x / 2.0));
}

inline std::pair<double, double> chi_square_2x2(double a, double b, double c,
                                                double d) {
  require(a >= 0 && b >= 0 && c >= 0 && d >= 0, "stats", "negative count");
  double n = a + b + c + d;
  double r1 = a + b, r2 = c + d, c1 = a + c, c2 = b + d;
  require(r1 > 0 && r2 > 0 && c1 > 0 && c2 > 0, "stats", "zero marginal");
  double diff = a * d - b * c;
  double stat = n * diff * diff / (r1 * r2 * c1 * c2);
  return {stat, chi2_sf_df1(stat)};
}

// ---------------------------------------------------------------------------
// Permutation chance-level test
// ---------------------------------------------------------------------------

struct FoldPredictions {
  std::vector<double> scores;
  std::vector<int> labels;
};

struct ChanceResult {
  // pooled chance distributions per metric
  std::map<std::string, std::vector<double>> chance;
  // observed per-fold metric values
  std::map<std::string, std::vector<double>> observed;
  // one-sided (observed > chance) Mann-Whitney p per metric
  std::map<std::string, double> p;
};

/// Permutes labels n_perm times per fold, pools all permutation metrics into
/// a chance distribution, and tests the observed fold metrics against it.
inline ChanceResult permutation_chance(const std::vector<FoldPredictions>& folds,
                                       int n_perm_per_fold, std::uint64_t seed) {
  require(!folds.empty(), "stats", "no folds");
  ChanceResult result;
  const std::vector<std::string> names = {"acc", "sen", "spe", "auc"};
  auto push = [&](std::map<std::string, std::vector<double>>& dest,
                  const MetricsRecord& rec) {
    if (rec.acc) dest["acc"].push_back(*rec.acc);
    if (rec.sen) dest["sen"].push_back(*rec.sen);
    if (rec.spe) dest["spe"].push_back(*rec.spe);
    if (rec.auc) dest["auc"].push_back(*rec.auc);
  };

  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto& fold = folds[f];
    require(fold.scores.size() == fold.labels.size() && !fold.scores.empty(),
            "stats", "bad fold predictions");
    push(result.observed, compute_metrics(fold.scores, fold.labels));
    Rng rng = Rng::stream(seed, 0xc4a7 + f);
    for (int p = 0; p < n_perm_per_fold; ++p) {
      std::vector<int> permuted = fold.labels;
      rng.shuffle(permuted);
      push(result.chance, compute_metrics(fold.scores, permuted));
    }
  }
  for (const auto& name : names) {
    if (result.observed[name].empty() || result.chance[name].empty()) continue;
    result.p[name] =
        mann_whitney_u(result.observed[name], result.chance[name], Side::Greater);
  }
  return result;
}

}  // namespace mahgcn::stats
