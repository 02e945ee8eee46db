#pragma once

#include "mahgcn/cohort.hpp"
#include "mahgcn/common.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace mahgcn {

/// Parametric empirical-Bayes location/scale model (ComBat). Features are
/// modeled as grand mean + covariate effects + batch shift, with per-batch
/// multiplicative noise; batch parameters are shrunk toward their priors.
struct CombatModel {
  std::vector<std::string> batch_names;
  Eigen::RowVectorXd feature_mean;   // alpha-hat, 1 x p
  Matrix covariate_coeffs;           // c x p
  Eigen::RowVectorXd pooled_var;     // 1 x p
  Matrix site_additive;              // B x p, shrunken gamma*
  Matrix site_multiplicative;        // B x p, shrunken delta* (variance scale)
  bool converged = true;
  int iterations = 0;

  int batch_index(const std::string& name) const {
    for (std::size_t i = 0; i < batch_names.size(); ++i)
      if (batch_names[i] == name) return static_cast<int>(i);
    fail("batch", "unknown batch label " + name);
  }
};

namespace detail {

inline std::vector<std::string> unique_sorted(const std::vector<std::string>& v) {
  std::vector<std::string> out = v;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

/// Fits the ComBat model. `features` is subjects x p, `covariates` is the
/// subjects x c design (no intercept; batch indicators are added internally).
inline CombatModel fit_combat(const Matrix& features,
                              const std::vector<std::string>& batch,
                              const Matrix& covariates, double tol = 1e-6,
                              int max_iter = 200) {
  const Index n = features.rows(), p = features.cols();
  require(static_cast<Index>(batch.size()) == n, "shape", "batch label count mismatch");
  require(covariates.rows() == n || covariates.size() == 0, "shape",
          "covariate row count mismatch");
  const Index c = covariates.size() == 0 ? 0 : covariates.cols();

  CombatModel model;
  model.batch_names = detail::unique_sorted(batch);
  const int n_batches = static_cast<int>(model.batch_names.size());
  std::vector<int> batch_of(static_cast<std::size_t>(n));
  std::vector<int> counts(static_cast<std::size_t>(n_batches), 0);
  for (Index i = 0; i < n; ++i) {
    batch_of[static_cast<std::size_t>(i)] = model.batch_index(batch[static_cast<std::size_t>(i)]);
    ++counts[static_cast<std::size_t>(batch_of[static_cast<std::size_t>(i)])];
  }
  for (int b = 0; b < n_batches; ++b)
    require(counts[static_cast<std::size_t>(b)] >= 2, "batch",
            "batch " + model.batch_names[static_cast<std::size_t>(b)] +
                " has fewer than 2 subjects");

  // design: batch one-hot followed by covariates
  Matrix design = Matrix::Zero(n, n_batches + c);
  for (Index i = 0; i < n; ++i) design(i, batch_of[static_cast<std::size_t>(i)]) = 1.0;
  if (c > 0) design.rightCols(c) = covariates;

  Eigen::FullPivLU<Matrix> lu(design.transpose() * design);
  require(lu.rank() == design.cols(), "design", "design matrix is rank deficient");
  Matrix coeffs = lu.solve(design.transpose() * features);  // (B+c) x p

  // grand mean: batch-size-weighted average of batch intercepts
  Eigen::RowVectorXd alpha = Eigen::RowVectorXd::Zero(p);
  for (int b = 0; b < n_batches; ++b)
    alpha += coeffs.row(b) * (static_cast<double>(counts[static_cast<std::size_t>(b)]) /
                              static_cast<double>(n));
  Matrix beta = c > 0 ? Matrix(coeffs.bottomRows(c)) : Matrix(0, p);

  Matrix stand_mean = Matrix::Ones(n, 1) * alpha;
  if (c > 0) stand_mean += covariates * beta;

  Matrix residual = features - design * coeffs;
  Eigen::RowVectorXd var_pooled =
      residual.array().square().colwise().sum() / static_cast<double>(n);
  var_pooled = var_pooled.cwiseMax(1e-12);
  Eigen::RowVectorXd sd_pooled = var_pooled.array().sqrt();

  Matrix z = (features - stand_mean).array().rowwise() / sd_pooled.array();

  // per-batch location/scale estimates on standardized data
  Matrix gamma_hat(n_batches, p), delta_hat(n_batches, p);
  for (int b = 0; b < n_batches; ++b) {
    int nb = counts[static_cast<std::size_t>(b)];
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(p);
    for (Index i = 0; i < n; ++i)
      if (batch_of[static_cast<std::size_t>(i)] == b) mean += z.row(i);
    mean /= static_cast<double>(nb);
    Eigen::RowVectorXd ssq = Eigen::RowVectorXd::Zero(p);
    for (Index i = 0; i < n; ++i)
      if (batch_of[static_cast<std::size_t>(i)] == b)
        ssq += (z.row(i) - mean).array().square().matrix();
    gamma_hat.row(b) = mean;
    delta_hat.row(b) = ssq / static_cast<double>(nb - 1);
  }

  // parametric priors: normal on gamma, inverse-gamma on delta
  model.site_additive.resize(n_batches, p);
  model.site_multiplicative.resize(n_batches, p);
  model.iterations = 0;
  for (int b = 0; b < n_batches; ++b) {
    int nb = counts[static_cast<std::size_t>(b)];
    double gamma_bar = gamma_hat.row(b).mean();
    double tau2 =
        (gamma_hat.row(b).array() - gamma_bar).square().sum() / std::max(1.0, static_cast<double>(p - 1));
    double d_mean = delta_hat.row(b).mean();
    double d_var = (delta_hat.row(b).array() - d_mean).square().sum() /
                   std::max(1.0, static_cast<double>(p - 1));
    d_var = std::max(d_var, 1e-12);
    double aprior = (2.0 * d_var + d_mean * d_mean) / d_var;
    double bprior = (d_mean * d_var + d_mean * d_mean * d_mean) / d_var;

    Eigen::RowVectorXd g_old = gamma_hat.row(b);
    Eigen::RowVectorXd d_old = delta_hat.row(b);
    int it = 0;
    for (; it < max_iter; ++it) {
      Eigen::RowVectorXd g_new =
          (tau2 * nb * gamma_hat.row(b).array() + d_old.array() * gamma_bar) /
          (tau2 * nb + d_old.array());
      // sum over batch subjects of (z - g_new)^2
      Eigen::RowVectorXd ssq = Eigen::RowVectorXd::Zero(p);
      for (Index i = 0; i < n; ++i)
        if (batch_of[static_cast<std::size_t>(i)] == b)
          ssq += (z.row(i).array() - g_new.array()).square().matrix();
      Eigen::RowVectorXd d_new =
          (bprior + 0.5 * ssq.array()) / (nb / 2.0 + aprior - 1.0);
      double change = std::max((g_new - g_old).cwiseAbs().maxCoeff(),
                               (d_new - d_old).cwiseAbs().maxCoeff());
      g_old = g_new;
      d_old = d_new;
      if (change < tol) break;
    }
    if (it == max_iter) {
      model.converged = false;
      std::cerr << "warning: ComBat EB iteration did not converge for batch "
                << model.batch_names[static_cast<std::size_t>(b)] << "\n";
    }
    model.iterations = std::max(model.iterations, it + 1);
    model.site_additive.row(b) = g_old;
    model.site_multiplicative.row(b) = d_old.cwiseMax(1e-12);
  }

  model.feature_mean = alpha;
  model.covariate_coeffs = beta;
  model.pooled_var = var_pooled;
  return model;
}

/// Removes batch location/scale effects, re-adding mean and covariate effects.
inline Matrix apply_combat(const CombatModel& model, const Matrix& features,
                           const std::vector<std::string>& batch,
                           const Matrix& covariates) {
  const Index n = features.rows(), p = features.cols();
  require(static_cast<Index>(batch.size()) == n, "shape", "batch label count mismatch");
  require(model.feature_mean.cols() == p, "shape", "feature count mismatch");
  const Index c = model.covariate_coeffs.rows();
  require((c == 0 && covariates.size() == 0) || covariates.cols() == c, "shape",
          "covariate column mismatch");

  Matrix stand_mean = Matrix::Ones(n, 1) * model.feature_mean;
  if (c > 0) stand_mean += covariates * model.covariate_coeffs;
  Eigen::RowVectorXd sd_pooled = model.pooled_var.array().sqrt();

  Matrix out(n, p);
  for (Index i = 0; i < n; ++i) {
    int b = model.batch_index(batch[static_cast<std::size_t>(i)]);
    Eigen::RowVectorXd zi =
        (features.row(i) - stand_mean.row(i)).array() / sd_pooled.array();
    Eigen::RowVectorXd adj =
        (zi - model.site_additive.row(b)).array() /
        model.site_multiplicative.row(b).array().sqrt();
    out.row(i) = (adj.array() * sd_pooled.array()).matrix() + stand_mean.row(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cohort-level harmonization over BFN upper triangles
// ---------------------------------------------------------------------------

/// Covariate design for biologically preserved effects: centered age, gender
/// indicator, one indicator per non-HC diagnosis present in the cohort.
inline Matrix combat_design(const Cohort& cohort) {
  const Index n = static_cast<Index>(cohort.size());
  std::vector<Diagnosis> bd_levels;
  for (const auto& s : cohort.subjects)
    if (s.diagnosis != Diagnosis::HC &&
        std::find(bd_levels.begin(), bd_levels.end(), s.diagnosis) == bd_levels.end())
      bd_levels.push_back(s.diagnosis);
  std::sort(bd_levels.begin(), bd_levels.end());

  double mean_age = 0.0;
  for (const auto& s : cohort.subjects) mean_age += s.age;
  mean_age /= static_cast<double>(n);

  Matrix design(n, 2 + static_cast<Index>(bd_levels.size()));
  for (Index i = 0; i < n; ++i) {
    const auto& s = cohort.subjects[static_cast<std::size_t>(i)];
    design(i, 0) = s.age - mean_age;
    design(i, 1) = s.gender == Gender::F ? 1.0 : 0.0;
    for (std::size_t d = 0; d < bd_levels.size(); ++d)
      design(i, 2 + static_cast<Index>(d)) = s.diagnosis == bd_levels[d] ? 1.0 : 0.0;
  }
  return design;
}

inline std::vector<std::string> scanner_labels(const Cohort& cohort) {
  std::vector<std::string> out;
  out.reserve(cohort.size());
  for (const auto& s : cohort.subjects) out.push_back(s.scanner_id);
  return out;
}

/// Upper-triangle (i<j) feature vector of one scale across all subjects.
inline Matrix upper_triangle_features(const Cohort& cohort, std::size_t scale_idx) {
  int s = cohort.scales[scale_idx];
  Index p = static_cast<Index>(s) * (s - 1) / 2;
  Matrix out(static_cast<Index>(cohort.size()), p);
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const Matrix& w = cohort.subjects[i].networks[scale_idx].weights;
    Index at = 0;
    for (Index a = 0; a < s; ++a)
      for (Index b = a + 1; b < s; ++b) out(static_cast<Index>(i), at++) = w(a, b);
  }
  return out;
}

inline void set_upper_triangle(Cohort& cohort, std::size_t scale_idx,
                               const Matrix& features) {
  int s = cohort.scales[scale_idx];
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    Matrix& w = cohort.subjects[i].networks[scale_idx].weights;
    Index at = 0;
    for (Index a = 0; a < s; ++a) {
      for (Index b = a + 1; b < s; ++b) {
        double v = features(static_cast<Index>(i), at++);
        w(a, b) = v;
        w(b, a) = v;
      }
      w(a, a) = 1.0;
    }
  }
}

/// Fits and applies ComBat per scale, batching by scanner_id. Returns the
/// fitted models (one per scale) for audit.
inline std::vector<CombatModel> harmonize_cohort(Cohort& cohort) {
  cohort.validate(true);
  auto batch = scanner_labels(cohort);
  Matrix design = combat_design(cohort);
  std::vector<CombatModel> models;
  for (std::size_t k = 0; k < cohort.scales.size(); ++k) {
    Matrix features = upper_triangle_features(cohort, k);
    CombatModel model = fit_combat(features, batch, design);
    set_upper_triangle(cohort, k, apply_combat(model, features, batch, design));
    models.push_back(std::move(model));
  }
  return models;
}

/// Audit dump of the fitted parameters (summary statistics per batch).
inline void write_combat_audit(const std::string& path,
                               const std::vector<CombatModel>& models,
                               const std::vector<int>& scales) {
  std::ofstream out(path);
  require(out.good(), "io", "cannot write " + path);
  out << "scale batch mean_gamma_star mean_delta_star converged iterations\n";
  for (std::size_t k = 0; k < models.size(); ++k) {
    const auto& m = models[k];
    for (std::size_t b = 0; b < m.batch_names.size(); ++b) {
      out << scales[k] << ' ' << m.batch_names[b] << ' '
          << io::format_double(m.site_additive.row(static_cast<Index>(b)).mean()) << ' '
          << io::format_double(m.site_multiplicative.row(static_cast<Index>(b)).mean())
          << ' ' << (m.converged ? 1 : 0) << ' ' << m.iterations << '\n';
    }
  }
}

}  // namespace mahgcn
