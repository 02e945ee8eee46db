#pragma once

#include "mahgcn/cohort.hpp"
#include "mahgcn/common.hpp"
#include "mahgcn/model.hpp"
#include "mahgcn/stats.hpp"

#include <algorithm>
#include <iostream>
#include <limits>
#include <vector>

namespace mahgcn::spectrum {

/// Third-FL activation vector (post batchnorm and ReLU) per subject.
inline Matrix deep_features(Model& model, const Cohort& cohort,
                            const std::vector<std::size_t>& indices) {
  Rng rng(0);
  Matrix out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t at = 0; at < indices.size(); at += kChunk) {
    std::vector<const SubjectRecord*> batch;
    for (std::size_t i = at; i < std::min(at + kChunk, indices.size()); ++i)
      batch.push_back(&cohort.subjects[indices[i]]);
    ForwardTrace trace = mahgcn_forward(model, batch, nn::Mode::Eval, rng);
    const Matrix& f = trace.fl3.value();
    if (out.size() == 0) out.resize(static_cast<Index>(indices.size()), f.cols());
    out.middleRows(static_cast<Index>(at), f.rows()) = f;
  }
  return out;
}

/// Pairwise correlation distance 1 - r between subject feature vectors.
/// A constant feature vector gets distance 1 (neutral) to everything.
inline Matrix relation_matrix(const Matrix& features) {
  Index n = features.rows();
  require(n >= 3, "spectrum", "need at least 3 subjects");
  Matrix centered = features.colwise() - features.rowwise().mean();
  Vector norms(n);
  bool warned = false;
  for (Index i = 0; i < n; ++i) {
    norms(i) = centered.row(i).norm();
    if (norms(i) == 0.0 && !warned) {
      std::cerr << "warning: constant feature vector, using neutral distance 1\n";
      warned = true;
    }
  }
  Matrix rel = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < i; ++j) {
      double d;
      if (norms(i) == 0.0 || norms(j) == 0.0) {
        d = 1.0;
      } else {
        double r = centered.row(i).dot(centered.row(j)) / (norms(i) * norms(j));
        d = 1.0 - std::clamp(r, -1.0, 1.0);
      }
      rel(i, j) = d;
      rel(j, i) = d;
    }
  }
  return rel;
}

inline Matrix consensus_relation(const std::vector<Matrix>& matrices,
                                 const std::vector<double>& aucs) {
  require(matrices.size() == aucs.size() && !matrices.empty(), "spectrum",
          "matrices and weights must match");
  double total = 0.0;
  for (double a : aucs) total += a;
  require(total > 0.0, "spectrum", "all-zero AUC weights");
  Matrix out = Matrix::Zero(matrices.front().rows(), matrices.front().cols());
  for (std::size_t k = 0; k < matrices.size(); ++k) {
    require(matrices[k].rows() == out.rows() && matrices[k].cols() == out.cols(),
            "spectrum", "relation matrix shape mismatch");
    out += matrices[k] * (aucs[k] / total);
  }
  return out;
}

struct Embedding {
  Matrix coordinates;       // n x m, NaN rows for subjects outside the
                            // largest connected component
  std::vector<double> lambdas;  // normalized component variances, non-increasing
  std::vector<bool> embedded;   // false where coordinates are missing
};

/// Diffusion-map embedding of a correlation-distance matrix. Affinity is
/// 1 - d/2, rows keep only their top (1 - sparsity) fraction, the graph is
/// symmetrized by max, anisotropically normalized with exponent alpha, and
/// the transition operator's nontrivial eigenvectors (scaled by
/// lambda / (1 - lambda), the diffusion-time-0 convention) become gradients.
inline Embedding diffusion_embed(const Matrix& rel, int n_components,
                                 double alpha = 0.5, double sparsity = 0.9) {
  Index n = rel.rows();
  require(rel.cols() == n, "spectrum", "relation matrix must be square");
  require(n >= n_components + 2, "spectrum", "too few subjects for components");
  require(sparsity >= 0.0 && sparsity < 1.0, "spectrum", "sparsity out of range");

  Matrix affinity = (1.0 - rel.array() / 2.0).matrix();
  affinity.diagonal().setZero();

  // per-row sparsification: keep the strongest (1 - sparsity) fraction
  Index keep = std::max<Index>(1, static_cast<Index>(
                                      std::ceil((1.0 - sparsity) *
                                                static_cast<double>(n - 1))));
  Matrix sparse = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    std::vector<Index> order;
    for (Index j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      return affinity(i, a) > affinity(i, b);
    });
    for (Index k = 0; k < keep; ++k)
      sparse(i, order[static_cast<std::size_t>(k)]) =
          affinity(i, order[static_cast<std::size_t>(k)]);
  }
  Matrix w = sparse.cwiseMax(sparse.transpose());

  // connected components of the affinity graph
  std::vector<int> component(static_cast<std::size_t>(n), -1);
  int n_components_graph = 0;
  for (Index start = 0; start < n; ++start) {
    if (component[static_cast<std::size_t>(start)] >= 0) continue;
    std::vector<Index> stack = {start};
    component[static_cast<std::size_t>(start)] = n_components_graph;
    while (!stack.empty()) {
      Index u = stack.back();
      stack.pop_back();
      for (Index v = 0; v < n; ++v)
        if (w(u, v) > 0.0 && component[static_cast<std::size_t>(v)] < 0) {
          component[static_cast<std::size_t>(v)] = n_components_graph;
          stack.push_back(v);
        }
    }
    ++n_components_graph;
  }
  std::vector<Index> keep_idx;
  if (n_components_graph > 1) {
    std::cerr << "warning: affinity graph has " << n_components_graph
              << " components; embedding the largest\n";
    std::vector<int> sizes(static_cast<std::size_t>(n_components_graph), 0);
    for (int c : component) ++sizes[static_cast<std::size_t>(c)];
    int largest = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) -
                                   sizes.begin());
    for (Index i = 0; i < n; ++i)
      if (component[static_cast<std::size_t>(i)] == largest) keep_idx.push_back(i);
  } else {
    for (Index i = 0; i < n; ++i) keep_idx.push_back(i);
  }
  Index nc = static_cast<Index>(keep_idx.size());
  require(nc >= n_components + 2, "spectrum",
          "largest component too small for requested components");
  Matrix wc(nc, nc);
  for (Index i = 0; i < nc; ++i)
    for (Index j = 0; j < nc; ++j)
      wc(i, j) = w(keep_idx[static_cast<std::size_t>(i)],
                   keep_idx[static_cast<std::size_t>(j)]);

  // anisotropic normalization, then symmetric conjugate of the transition op
  Vector deg = wc.rowwise().sum();
  Vector deg_alpha = deg.array().pow(-alpha);
  Matrix k_alpha =
      deg_alpha.asDiagonal() * wc * deg_alpha.asDiagonal();
  Vector d2 = k_alpha.rowwise().sum();
  Vector d2_inv_sqrt = d2.array().sqrt().inverse();
  Matrix sym = d2_inv_sqrt.asDiagonal() * k_alpha * d2_inv_sqrt.asDiagonal();
  sym = 0.5 * (sym + sym.transpose());  // guard rounding asymmetry

  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  require(eig.info() == Eigen::Success, "spectrum", "eigendecomposition failed");

  // eigenvalues ascending; take the top n_components + 1 and drop the trivial
  std::vector<std::pair<double, Index>> sorted;
  for (Index i = 0; i < nc; ++i) sorted.emplace_back(eig.eigenvalues()(i), i);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  Embedding emb;
  emb.coordinates = Matrix::Constant(n, n_components,
                                     std::numeric_limits<double>::quiet_NaN());
  emb.embedded.assign(static_cast<std::size_t>(n), false);

  std::vector<double> raw_lambdas;
  Matrix grads(nc, n_components);
  for (int k = 0; k < n_components; ++k) {
    double lam = sorted[static_cast<std::size_t>(k) + 1].first;
    Vector v = eig.eigenvectors().col(sorted[static_cast<std::size_t>(k) + 1].second);
    // right eigenvector of the transition operator
    Vector phi = d2_inv_sqrt.asDiagonal() * v;
    // normalize against the trivial eigenvector scaling
    phi /= phi.norm();
    double scale = lam >= 1.0 ? std::numeric_limits<double>::infinity()
                              : lam / (1.0 - lam);
    if (!std::isfinite(scale)) scale = 0.0;
    grads.col(k) = phi * scale;
    raw_lambdas.push_back(lam);
  }
  double lam_sq_sum = 0.0;
  for (double l : raw_lambdas) lam_sq_sum += l * l;
  for (double l : raw_lambdas)
    emb.lambdas.push_back(lam_sq_sum > 0.0 ? l * l / lam_sq_sum : 0.0);

  for (Index i = 0; i < nc; ++i) {
    emb.coordinates.row(keep_idx[static_cast<std::size_t>(i)]) = grads.row(i);
    emb.embedded[static_cast<std::size_t>(keep_idx[static_cast<std::size_t>(i)])] = true;
  }
  return emb;
}

struct AsdPartition {
  std::vector<std::size_t> adhd_like;
  std::vector<std::size_t> mci_like;
};

/// Percentile box over ADHD subjects' first two gradients (10%-100% in
/// gradient 1, 0%-90% in gradient 2, inclusive bounds); ASD subjects inside
/// the box are ADHD-like, the rest MCI-like.
inline AsdPartition partition_asd(const Embedding& emb, const Cohort& cohort) {
  std::vector<double> g1_ref, g2_ref;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (cohort.subjects[i].diagnosis == Diagnosis::ADHD && emb.embedded[i]) {
      g1_ref.push_back(emb.coordinates(static_cast<Index>(i), 0));
      g2_ref.push_back(emb.coordinates(static_cast<Index>(i), 1));
    }
  }
  require(!g1_ref.empty(), "spectrum", "no ADHD reference subjects");

  auto percentile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  double g1_lo = percentile(g1_ref, 0.10);
  double g2_hi = percentile(g2_ref, 0.90);

  AsdPartition part;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (cohort.subjects[i].diagnosis != Diagnosis::ASD || !emb.embedded[i]) continue;
    double g1 = emb.coordinates(static_cast<Index>(i), 0);
    double g2 = emb.coordinates(static_cast<Index>(i), 1);
    if (g1 >= g1_lo && g2 <= g2_hi)
      part.adhd_like.push_back(i);
    else
      part.mci_like.push_back(i);
  }
  return part;
}

struct Association {
  double statistic = 0.0;  // Pearson r for continuous, U for binary
  double p = 1.0;
};

inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 3, "stats", "bad sample");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0 && syy > 0, "stats", "constant input");
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman_rho(const std::vector<double>& x,
                           const std::vector<double>& y) {
  auto rx = stats::midranks(x);
  auto ry = stats::midranks(y);
  return pearson_r(rx, ry);
}

/// Continuous covariate: Pearson r with a t-based two-sided p. Binary
/// covariate (exactly two distinct values): Mann-Whitney U two-sided.
inline Association covariate_association(const std::vector<double>& gradient,
                                         const std::vector<double>& covariate) {
  require(gradient.size() == covariate.size() && gradient.size() >= 10, "stats",
          "need at least 10 paired observations");
  std::vector<double> distinct = covariate;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  require(distinct.size() >= 2, "stats", "constant covariate");

  Association out;
  if (distinct.size() == 2) {
    std::vector<double> g0, g1;
    for (std::size_t i = 0; i < gradient.size(); ++i)
      (covariate[i] == distinct[0] ? g0 : g1).push_back(gradient[i]);
    out.p = stats::mann_whitney_u(g0, g1, stats::Side::TwoSided);
    double rank_sum = 0.0;
    auto ranks = stats::midranks(gradient);  // statistic: U of group 0
    for (std::size_t i = 0; i < gradient.size(); ++i)
      if (covariate[i] == distinct[0]) rank_sum += ranks[i];
    out.statistic =
        rank_sum - static_cast<double>(g0.size()) * (g0.size() + 1) / 2.0;
    return out;
  }

  double r = pearson_r(gradient, covariate);
  double n = static_cast<double>(gradient.size());
  double t = r * std::sqrt((n - 2.0) / std::max(1e-12, 1.0 - r * r));
  // two-sided p via normal approximation of the t distribution with a
  // Cornish-Fisher style correction adequate for n >= 10
  double df = n - 2.0;
  double z = t * (1.0 - 1.0 / (4.0 * df)) / std::sqrt(1.0 + t * t / (2.0 * df));
  out.statistic = r;
  out.p = 2.0 * stats::normal_cdf(-std::abs(z));
  return out;
}

}  // namespace mahgcn::spectrum
