#pragma once

#include "mahgcn/cohort.hpp"
#include "mahgcn/common.hpp"
#include "mahgcn/model.hpp"
#include "mahgcn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mahgcn {

struct TrainConfig {
  int epochs = 150;
  double lr_initial = 0.01;
  double lr_later = 0.001;
  int lr_switch_epoch = 50;  // lr_initial for epochs [1, switch], lr_later after
  double weight_decay = 0.01;
  int per_site_batch = 100;
  std::uint64_t seed = 0;
  int k_folds = 10;

  void validate() const {
    require(epochs >= 1 && per_site_batch >= 2 && k_folds >= 2, "config",
            "invalid training configuration");
    require(lr_switch_epoch <= epochs, "config", "lr schedule boundary past epochs");
  }

  double lr_at(int epoch) const {  // 1-based epoch
    return epoch <= lr_switch_epoch ? lr_initial : lr_later;
  }
};

// ---------------------------------------------------------------------------
// Adam with classic L2 weight decay (decay term added to the gradient)
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Matrix> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(const std::vector<nn::Var>& params) {
    for (const auto& p : params) {
      m.push_back(Matrix::Zero(p.rows(), p.cols()));
      v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
};

/// One Adam update over `params`; parameters with no accumulated gradient
/// (frozen or unused this step) are skipped. Grads are cleared afterwards.
inline void adam_step(std::vector<nn::Var>& params, AdamState& state, double lr,
                      double weight_decay) {
  ++state.step;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad().size() == 0) continue;
    require(p.grad().allFinite(), "non-finite", "non-finite gradient");
    Matrix g = p.grad() + weight_decay * p.value();
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] +
                 (1.0 - state.beta2) * g.cwiseProduct(g).eval();
    Matrix m_hat = state.m[i] / bc1;
    Matrix v_hat = state.v[i] / bc2;
    p.mutable_value() -=
        lr * (m_hat.array() / (v_hat.array().sqrt() + state.eps)).matrix();
    p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Site-weighted loss
// ---------------------------------------------------------------------------

struct SiteStats {
  int n_hc = 0, n_bd = 0;
  int total() const { return n_hc + n_bd; }
  /// Inverse-ratio class weights, normalized to mean 1 within the site.
  std::pair<double, double> class_weights() const {
    require(n_hc > 0 && n_bd > 0, "site",
            "site with a missing class in the training set");
    double w0 = 1.0 / n_hc, w1 = 1.0 / n_bd;
    double norm = 2.0 / (w0 + w1);
    return {w0 * norm, w1 * norm};
  }
  double penalty() const { return 1.0 / std::sqrt(static_cast<double>(total())); }
};

inline std::map<std::string, SiteStats> collect_site_stats(
    const Cohort& cohort, const std::vector<std::size_t>& train_idx) {
  std::map<std::string, SiteStats> stats;
  for (std::size_t i : train_idx) {
    const auto& s = cohort.subjects[i];
    auto& st = stats[s.site_id];
    if (s.binary_label() == 0)
      ++st.n_hc;
    else
      ++st.n_bd;
  }
  return stats;
}

/// Linear sum over sites of penalty(site) * mean(classweight * ce) within the
/// site's batch samples.
inline nn::LossResult site_weighted_loss(
    const nn::Var& logits, const std::vector<int>& labels,
    const std::vector<std::string>& site_of_sample,
    const std::map<std::string, SiteStats>& site_stats) {
  Index n = logits.rows();
  require(static_cast<Index>(labels.size()) == n &&
              static_cast<Index>(site_of_sample.size()) == n,
          "shape", "loss input length mismatch");
  std::map<std::string, int> batch_count;
  for (const auto& s : site_of_sample) ++batch_count[s];

  std::vector<double> weights(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& site = site_of_sample[static_cast<std::size_t>(i)];
    auto it = site_stats.find(site);
    require(it != site_stats.end(), "site", "unknown site " + site);
    auto [w0, w1] = it->second.class_weights();
    double wc = labels[static_cast<std::size_t>(i)] == 0 ? w0 : w1;
    weights[static_cast<std::size_t>(i)] =
        it->second.penalty() * wc / static_cast<double>(batch_count[site]);
  }
  return nn::softmax_crossentropy(logits, labels, weights, nn::Reduction::Sum);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::optional<double> acc, sen, spe, auc;

  static std::optional<double> mean_defined(
      const std::vector<std::optional<double>>& vals) {
    double sum = 0.0;
    int n = 0;
    for (const auto& v : vals)
      if (v) {
        sum += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / n;
  }
};

/// AUC by the Mann-Whitney pair statistic (ties count 1/2).
inline std::optional<double> auc_score(const std::vector<double>& scores,
                                       const std::vector<int>& labels) {
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  // midranks of pooled scores
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (labels[k] == 1) rank_sum_pos += rank[k];
  double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Positive class is BD; decision threshold 0.5 on the BD probability.
inline MetricsRecord compute_metrics(const std::vector<double>& scores,
                                     const std::vector<int>& labels) {
  require(!scores.empty() && scores.size() == labels.size(), "shape",
          "metrics need matching nonempty scores and labels");
  int tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred_bd = scores[i] >= 0.5;
    if (labels[i] == 1)
      (pred_bd ? tp : fn)++;
    else
      (pred_bd ? fp : tn)++;
  }
  MetricsRecord rec;
  rec.acc = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  if (tp + fn > 0) rec.sen = static_cast<double>(tp) / (tp + fn);
  if (tn + fp > 0) rec.spe = static_cast<double>(tn) / (tn + fp);
  rec.auc = auc_score(scores, labels);
  return rec;
}

/// Unweighted mean over sites; metrics undefined at a site are skipped.
inline MetricsRecord aggregate_site_metrics(
    const std::map<std::string, MetricsRecord>& per_site) {
  require(!per_site.empty(), "metrics", "no sites to aggregate");
  std::vector<std::optional<double>> accs, sens, spes, aucs;
  for (const auto& [site, rec] : per_site) {
    accs.push_back(rec.acc);
    sens.push_back(rec.sen);
    spes.push_back(rec.spe);
    aucs.push_back(rec.auc);
  }
  MetricsRecord out;
  out.acc = MetricsRecord::mean_defined(accs);
  out.sen = MetricsRecord::mean_defined(sens);
  out.spe = MetricsRecord::mean_defined(spes);
  out.auc = MetricsRecord::mean_defined(aucs);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Runs one epoch of per-site equal sampling. Each iteration draws
/// `per_site_batch` samples from every site pool (with replacement when the
/// pool is smaller); iterations per epoch follow the largest site pool.
/// Returns per-iteration losses.
inline std::vector<double> run_epoch(Model& model, const Cohort& cohort,
                                     const std::map<std::string, std::vector<std::size_t>>& site_pools,
                                     const std::map<std::string, SiteStats>& site_stats,
                                     std::vector<nn::Var>& params, AdamState& adam,
                                     const TrainConfig& config, int epoch, Rng& rng) {
  std::size_t max_pool = 0;
  for (const auto& [site, pool] : site_pools) {
    require(!pool.empty(), "site", "empty training pool for site " + site);
    max_pool = std::max(max_pool, pool.size());
  }
  int iterations = static_cast<int>(
      (max_pool + static_cast<std::size_t>(config.per_site_batch) - 1) /
      static_cast<std::size_t>(config.per_site_batch));

  std::vector<double> losses;
  for (int it = 0; it < iterations; ++it) {
    std::vector<const SubjectRecord*> batch;
    std::vector<int> labels;
    std::vector<std::string> sites;
    for (const auto& [site, pool] : site_pools) {
      std::size_t take = static_cast<std::size_t>(config.per_site_batch);
      if (pool.size() >= take) {
        std::vector<std::size_t> shuffled = pool;
        rng.shuffle(shuffled);
        shuffled.resize(take);
        for (std::size_t idx : shuffled) {
          batch.push_back(&cohort.subjects[idx]);
          labels.push_back(cohort.subjects[idx].binary_label());
          sites.push_back(site);
        }
      } else {
        for (std::size_t k = 0; k < take; ++k) {
          std::size_t idx = pool[rng.below(pool.size())];
          batch.push_back(&cohort.subjects[idx]);
          labels.push_back(cohort.subjects[idx].binary_label());
          sites.push_back(site);
        }
      }
    }
    ForwardTrace trace = mahgcn_forward(model, batch, nn::Mode::Train, rng);
    nn::LossResult loss = site_weighted_loss(trace.logits, labels, sites, site_stats);
    nn::backward(loss.loss);
    adam_step(params, adam, config.lr_at(epoch), config.weight_decay);
    losses.push_back(loss.loss.value()(0, 0));
  }
  return losses;
}

/// Full training run on the given subject indices; returns per-epoch mean loss.
inline std::vector<double> train_model(Model& model, const Cohort& cohort,
                                       const std::vector<std::size_t>& train_idx,
                                       const TrainConfig& config, Rng& rng,
                                       std::vector<nn::Var>* trainable = nullptr) {
  config.validate();
  std::map<std::string, std::vector<std::size_t>> site_pools;
  for (std::size_t i : train_idx)
    site_pools[cohort.subjects[i].site_id].push_back(i);
  auto site_stats = collect_site_stats(cohort, train_idx);
  for (const auto& [site, st] : site_stats) st.class_weights();  // fail early

  std::vector<nn::Var> params;
  if (trainable) {
    params = *trainable;
  } else {
    for (auto& [name, var] : model.named_params()) params.push_back(var);
  }
  AdamState adam(params);

  std::vector<double> trace;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto losses = run_epoch(model, cohort, site_pools, site_stats, params, adam,
                            config, epoch, rng);
    double mean = 0.0;
    for (double l : losses) mean += l;
    trace.push_back(mean / static_cast<double>(losses.size()));
  }
  return trace;
}

/// Eval-mode BD probabilities for the given subjects, processed in chunks.
inline std::vector<double> predict(Model& model, const Cohort& cohort,
                                   const std::vector<std::size_t>& indices) {
  std::vector<double> scores;
  scores.reserve(indices.size());
  Rng rng(0);  // unused in eval mode
  constexpr std::size_t kChunk = 64;
  for (std::size_t at = 0; at < indices.size(); at += kChunk) {
    std::vector<const SubjectRecord*> batch;
    for (std::size_t i = at; i < std::min(at + kChunk, indices.size()); ++i)
      batch.push_back(&cohort.subjects[indices[i]]);
    ForwardTrace trace = mahgcn_forward(model, batch, nn::Mode::Eval, rng);
    for (Index r = 0; r < trace.probs.rows(); ++r)
      scores.push_back(trace.probs(r, 1));
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldResult {
  int fold = 0;
  std::vector<std::size_t> test_indices;
  std::vector<double> test_scores;
  std::vector<int> test_labels;
  std::vector<std::string> test_sites;
  std::map<std::string, MetricsRecord> site_specific;
  MetricsRecord site_averaged;
  MetricsRecord global;
  std::vector<double> loss_trace;
  io::NamedTensors checkpoint;
};

struct CvResult {
  std::vector<FoldResult> folds;

  MetricsRecord mean_site_averaged() const {
    std::vector<std::optional<double>> a, s, p, u;
    for (const auto& f : folds) {
      a.push_back(f.site_averaged.acc);
      s.push_back(f.site_averaged.sen);
      p.push_back(f.site_averaged.spe);
      u.push_back(f.site_averaged.auc);
    }
    MetricsRecord out;
    out.acc = MetricsRecord::mean_defined(a);
    out.sen = MetricsRecord::mean_defined(s);
    out.spe = MetricsRecord::mean_defined(p);
    out.auc = MetricsRecord::mean_defined(u);
    return out;
  }
};

inline MetricsRecord evaluate_fold(FoldResult& fold) {
  std::map<std::string, std::vector<std::size_t>> by_site;
  for (std::size_t i = 0; i < fold.test_sites.size(); ++i)
    by_site[fold.test_sites[i]].push_back(i);
  for (const auto& [site, rows] : by_site) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t r : rows) {
      s.push_back(fold.test_scores[r]);
      y.push_back(fold.test_labels[r]);
    }
    fold.site_specific[site] = compute_metrics(s, y);
  }
  fold.site_averaged = aggregate_site_metrics(fold.site_specific);
  fold.global = compute_metrics(fold.test_scores, fold.test_labels);
  return fold.site_averaged;
}

/// Ten-fold (configurable) cross-validation; each fold trains a fresh model
/// from `builder` on its own deterministic RNG stream.
inline CvResult cross_validate(const Cohort& cohort, const TrainConfig& config,
                               const std::function<Model(std::uint64_t seed)>& builder) {
  config.validate();
  auto folds = split_kfold(cohort, config.k_folds, config.seed);
  CvResult result;
  for (int f = 0; f < config.k_folds; ++f) {
    const auto& split = folds[static_cast<std::size_t>(f)];
    Model model = builder(config.seed + static_cast<std::uint64_t>(f));
    Rng rng = Rng::stream(config.seed, 0x70000 + static_cast<std::uint64_t>(f));
    FoldResult fold;
    fold.fold = f;
    fold.loss_trace = train_model(model, cohort, split.train, config, rng);
    fold.test_indices = split.test;
    fold.test_scores = predict(model, cohort, split.test);
    for (std::size_t i : split.test) {
      fold.test_labels.push_back(cohort.subjects[i].binary_label());
      fold.test_sites.push_back(cohort.subjects[i].site_id);
    }
    evaluate_fold(fold);
    fold.checkpoint = model.to_tensors();
    result.folds.push_back(std::move(fold));
  }
  return result;
}

}  // namespace mahgcn
