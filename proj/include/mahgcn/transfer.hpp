#pragma once

#include "mahgcn/cohort.hpp"
#include "mahgcn/common.hpp"
#include "mahgcn/model.hpp"
#include "mahgcn/train.hpp"

#include <set>
#include <string>
#include <vector>

namespace mahgcn::transfer {

enum class FinetuneLevel { L1 = 1, L2 = 2, L3 = 3, L4 = 4 };

/// Names of the parameter tensors a fine-tuning level updates.
/// L1: everything. L2: all FLs plus all batchnorms. L3: last FL plus all
/// batchnorms. L4: last FL plus the last batchnorm (the one on FL-3).
inline std::set<std::string> trainable_names(FinetuneLevel level, Model& model) {
  std::set<std::string> names;
  auto add_fl = [&](std::size_t k, bool affine, bool bn) {
    if (affine) {
      names.insert("fl" + std::to_string(k) + ".weight");
      names.insert("fl" + std::to_string(k) + ".bias");
    }
    if (bn && model.fl[k].has_bn) {
      names.insert("fl" + std::to_string(k) + ".bn.gamma");
      names.insert("fl" + std::to_string(k) + ".bn.beta");
    }
  };
  std::size_t last_fl = model.fl.size() - 1;
  std::size_t last_bn = last_fl;  // last FL that carries a batchnorm
  while (last_bn > 0 && !model.fl[last_bn].has_bn) --last_bn;

  switch (level) {
    case FinetuneLevel::L1:
      for (std::size_t k = 0; k < model.gcn.size(); ++k)
        names.insert("gcn" + std::to_string(k) + ".weight");
      for (std::size_t k = 0; k < model.fl.size(); ++k) add_fl(k, true, true);
      break;
    case FinetuneLevel::L2:
      for (std::size_t k = 0; k < model.fl.size(); ++k) add_fl(k, true, true);
      break;
    case FinetuneLevel::L3:
      add_fl(last_fl, true, false);
      for (std::size_t k = 0; k < model.fl.size(); ++k) add_fl(k, false, true);
      break;
    case FinetuneLevel::L4:
      add_fl(last_fl, true, false);
      add_fl(last_bn, false, true);
      break;
  }
  return names;
}

inline std::vector<nn::Var> trainable_set(FinetuneLevel level, Model& model) {
  auto names = trainable_names(level, model);
  std::vector<nn::Var> params;
  for (auto& [name, var] : model.named_params())
    if (names.count(name)) params.push_back(var);
  return params;
}

/// Marks batchnorm layers whose affine parameters are frozen so they keep
/// running-stat (eval) behavior during fine-tuning.
inline void apply_bn_freeze(FinetuneLevel level, Model& model) {
  auto names = trainable_names(level, model);
  for (std::size_t k = 0; k < model.fl.size(); ++k)
    if (model.fl[k].has_bn)
      model.fl[k].bn_frozen =
          names.count("fl" + std::to_string(k) + ".bn.gamma") == 0;
}

/// Pre-training: plain training on the source cohort (the target group must
/// already be excluded by the caller).
inline std::vector<double> pretrain(Model& model, const Cohort& source,
                                    const TrainConfig& config, Rng& rng) {
  std::vector<std::size_t> all(source.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return train_model(model, source, all, config, rng);
}

/// Fine-tunes only the level's trainable parameters; everything else stays
/// bit-identical to the checkpoint.
inline std::vector<double> finetune(Model& model, FinetuneLevel level,
                                    const Cohort& target,
                                    const std::vector<std::size_t>& train_idx,
                                    const TrainConfig& config, Rng& rng) {
  require(!train_idx.empty(), "transfer", "empty fine-tuning training set");
  apply_bn_freeze(level, model);
  auto params = trainable_set(level, model);
  return train_model(model, target, train_idx, config, rng, &params);
}

struct KShotSplit {
  std::vector<std::size_t> train;  // first K of the shuffled training pool
  std::vector<std::size_t> test;
};

/// Shuffles the target cohort, takes a training pool of `pool_size`, uses the
/// first K as training samples and everything outside the pool as the test set.
inline KShotSplit kshot_protocol(std::size_t n_target, int k, std::uint64_t seed,
                                 int repetition, int pool_size = 100) {
  require(pool_size >= 1 && static_cast<std::size_t>(pool_size) < n_target,
          "transfer", "training pool must be smaller than the cohort");
  require(k >= 1 && k <= pool_size, "transfer", "K exceeds the training pool");
  std::vector<std::size_t> idx(n_target);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = Rng::stream(seed, 0x5407 + static_cast<std::uint64_t>(repetition));
  rng.shuffle(idx);
  KShotSplit split;
  split.train.assign(idx.begin(), idx.begin() + k);
  split.test.assign(idx.begin() + pool_size, idx.end());
  return split;
}

/// Subjects whose site_id is not in `held_out_sites`.
inline Cohort exclude_sites(const Cohort& cohort,
                            const std::set<std::string>& held_out_sites) {
  Cohort out;
  out.scales = cohort.scales;
  for (const auto& s : cohort.subjects)
    if (!held_out_sites.count(s.site_id)) out.subjects.push_back(s);
  return out;
}

inline Cohort only_sites(const Cohort& cohort,
                         const std::set<std::string>& sites) {
  Cohort out;
  out.scales = cohort.scales;
  for (const auto& s : cohort.subjects)
    if (sites.count(s.site_id)) out.subjects.push_back(s);
  return out;
}

}  // namespace mahgcn::transfer
