#pragma once

#include "mahgcn/atlas.hpp"
#include "mahgcn/common.hpp"
#include "mahgcn/model.hpp"

#include <limits>
#include <map>
#include <string>
#include <vector>

namespace mahgcn::interpret {

/// Per-scale node attribution scores, ordered coarse to fine like the atlas.
struct CamMap {
  std::vector<Vector> scale_scores;

  void check_shape_matches(const CamMap& other) const {
    require(scale_scores.size() == other.scale_scores.size(), "cam",
            "scale count mismatch");
    for (std::size_t k = 0; k < scale_scores.size(); ++k)
      require(scale_scores[k].size() == other.scale_scores[k].size(), "cam",
              "node count mismatch");
  }
};

/// Grad-CAM for one subject: backward from the target-class logit to every
/// scale's GCN feature map; node score is the channel sum of
/// gradient * activation (no ReLU clamp, signs are handled by the later
/// min-max normalization).
inline CamMap gradcam_subject(Model& model, const SubjectRecord& subject,
                              int target_class) {
  require(target_class == 0 || target_class == 1, "cam", "binary target only");
  Rng rng(0);
  ForwardTrace trace = mahgcn_forward(model, subject, nn::Mode::Eval, rng);

  Matrix selector = Matrix::Zero(2, 1);
  selector(target_class, 0) = 1.0;
  nn::Var target = nn::matmul(trace.logits, nn::Var::constant(selector));
  nn::backward(target);

  int n_scales = model.n_scales();
  CamMap map;
  map.scale_scores.resize(static_cast<std::size_t>(n_scales));
  // trace features are finest-first; the map is coarse-first
  for (int k = 0; k < n_scales; ++k) {
    const nn::Var& feat = trace.scale_features[0][static_cast<std::size_t>(k)];
    int scale_idx = n_scales - 1 - k;
    Vector scores;
    if (feat.grad().size() == 0)
      scores = Vector::Zero(feat.rows());  // no gradient reached this scale
    else
      scores = feat.grad().cwiseProduct(feat.value()).rowwise().sum();
    map.scale_scores[static_cast<std::size_t>(scale_idx)] = std::move(scores);
  }
  return map;
}

/// (v - min) / (max - min); an all-equal input maps to all zeros.
inline Vector minmax_normalize(const Vector& values) {
  require(values.size() > 0, "cam", "empty input");
  double lo = values.minCoeff(), hi = values.maxCoeff();
  if (hi == lo) return Vector::Zero(values.size());
  return (values.array() - lo) / (hi - lo);
}

/// Joint min-max normalization of a set of maps: one min and max over every
/// value in every map and scale, applied in place.
inline void minmax_normalize_joint(std::vector<CamMap>& maps) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& m : maps)
    for (const auto& v : m.scale_scores) {
      if (v.size() == 0) continue;
      lo = std::min(lo, v.minCoeff());
      hi = std::max(hi, v.maxCoeff());
    }
  for (auto& m : maps)
    for (auto& v : m.scale_scores) {
      if (hi == lo)
        v.setZero();
      else
        v = ((v.array() - lo) / (hi - lo)).matrix();
    }
}

inline CamMap average_maps(const std::vector<CamMap>& maps) {
  require(!maps.empty(), "cam", "no maps to average");
  CamMap out = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    maps[i].check_shape_matches(out);
    for (std::size_t k = 0; k < out.scale_scores.size(); ++k)
      out.scale_scores[k] += maps[i].scale_scores[k];
  }
  for (auto& v : out.scale_scores) v /= static_cast<double>(maps.size());
  return out;
}

inline CamMap auc_weighted_average(const std::vector<CamMap>& maps,
                                   const std::vector<double>& aucs) {
  require(maps.size() == aucs.size() && !maps.empty(), "cam",
          "maps and weights must match");
  double total = 0.0;
  for (double a : aucs) {
    require(a >= 0.0, "cam", "negative AUC weight");
    total += a;
  }
  require(total > 0.0, "cam", "all-zero AUC weights");
  CamMap out = maps.front();
  for (auto& v : out.scale_scores) v *= aucs.front() / total;
  for (std::size_t i = 1; i < maps.size(); ++i) {
    maps[i].check_shape_matches(out);
    for (std::size_t k = 0; k < out.scale_scores.size(); ++k)
      out.scale_scores[k] += maps[i].scale_scores[k] * (aucs[i] / total);
  }
  return out;
}

/// One fold model's attribution evidence: its test AUC and the per-subject
/// maps of its correctly predicted BD test subjects, grouped by dataset.
struct FoldCams {
  double auc = 0.0;
  std::map<std::string, std::vector<CamMap>> by_group;
};

/// Double-normalized consensus: per-model joint min-max, group average,
/// AUC-weighted average across models, second min-max per group, then a plain
/// average over the selected groups (all groups when empty).
inline CamMap consensus_map(std::vector<FoldCams> folds,
                            const std::vector<std::string>& groups = {}) {
  require(!folds.empty(), "cam", "no fold attributions");

  // first normalization: jointly over everything one model produced
  for (auto& fold : folds) {
    std::vector<CamMap> pooled;
    for (auto& [g, maps] : fold.by_group)
      for (auto& m : maps) pooled.push_back(m);
    minmax_normalize_joint(pooled);
    std::size_t at = 0;
    for (auto& [g, maps] : fold.by_group)
      for (auto& m : maps) m = pooled[at++];
  }

  std::vector<std::string> selected = groups;
  if (selected.empty())
    for (const auto& [g, maps] : folds.front().by_group) selected.push_back(g);

  std::vector<CamMap> group_maps;
  for (const auto& group : selected) {
    std::vector<CamMap> per_fold;
    std::vector<double> aucs;
    for (auto& fold : folds) {
      auto it = fold.by_group.find(group);
      if (it == fold.by_group.end() || it->second.empty()) continue;
      per_fold.push_back(average_maps(it->second));
      aucs.push_back(fold.auc);
    }
    require(!per_fold.empty(), "cam", "no attributions for group " + group);
    std::vector<CamMap> one = {auc_weighted_average(per_fold, aucs)};
    minmax_normalize_joint(one);  // second normalization, per dataset group
    group_maps.push_back(std::move(one.front()));
  }
  return average_maps(group_maps);
}

/// Mean node score per RSN per scale; NaN where an RSN has no node at a scale.
inline Matrix rsn_aggregate(const CamMap& map, const MultiscaleAtlasSet& atlas) {
  require(static_cast<int>(map.scale_scores.size()) == atlas.n_scales(), "cam",
          "map does not match atlas");
  Matrix out = Matrix::Constant(atlas.n_scales(),
                                static_cast<Index>(kRsnNames.size()),
                                std::numeric_limits<double>::quiet_NaN());
  for (int s = 0; s < atlas.n_scales(); ++s) {
    const auto& labels = atlas.scales[static_cast<std::size_t>(s)].rsn_label;
    const Vector& scores = map.scale_scores[static_cast<std::size_t>(s)];
    require(static_cast<int>(labels.size()) == scores.size(), "cam",
            "label count mismatch at scale index " + std::to_string(s));
    std::vector<double> sum(kRsnNames.size(), 0.0);
    std::vector<int> count(kRsnNames.size(), 0);
    for (Index i = 0; i < scores.size(); ++i) {
      int r = labels[static_cast<std::size_t>(i)];
      sum[static_cast<std::size_t>(r)] += scores(i);
      ++count[static_cast<std::size_t>(r)];
    }
    for (std::size_t r = 0; r < kRsnNames.size(); ++r)
      if (count[r] > 0) out(s, static_cast<Index>(r)) = sum[r] / count[r];
  }
  return out;
}

}  // namespace mahgcn::interpret
