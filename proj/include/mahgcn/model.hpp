#pragma once

#include "mahgcn/atlas.hpp"
#include "mahgcn/bfn.hpp"
#include "mahgcn/cohort.hpp"
#include "mahgcn/common.hpp"
#include "mahgcn/io.hpp"
#include "mahgcn/tensor.hpp"

#include <string>
#include <vector>

namespace mahgcn {

/// Symmetric renormalized adjacency: with A~ = A + I and D~ built from
/// absolute row sums of A~ (Pearson edges can be negative), returns
/// D~^{-1/2} A~ D~^{-1/2}.
inline Matrix normalize_adjacency(const Matrix& a) {
  require(a.rows() == a.cols(), "shape", "adjacency must be square");
  require(a.allFinite(), "non-finite", "non-finite adjacency");
  Matrix a_tilde = a + Matrix::Identity(a.rows(), a.cols());
  Vector deg = a_tilde.cwiseAbs().rowwise().sum();
  for (Index i = 0; i < deg.size(); ++i)
    require(deg(i) > 0.0, "degree", "zero absolute row sum in adjacency");
  Vector inv_sqrt = deg.array().sqrt().inverse();
  return inv_sqrt.asDiagonal() * a_tilde * inv_sqrt.asDiagonal();
}

struct ModelConfig {
  std::vector<int> scales;              // coarse to fine, matching the atlas
  int hidden_dim = 64;
  std::vector<int> fl_widths = {256, 64, 16, 2};
  double dropout_rate = 0.3;

  void validate() const {
    require(!scales.empty(), "config", "no scales");
    for (std::size_t i = 1; i < scales.size(); ++i)
      require(scales[i] > scales[i - 1], "config", "scales must increase");
    require(hidden_dim >= 1, "config", "hidden_dim must be >= 1");
    require(fl_widths.size() == 4, "config", "exactly 4 fully-connected layers");
    require(fl_widths.back() == 2, "config", "final layer must output 2 classes");
  }

  int readout_dim() const { return static_cast<int>(scales.size()) * hidden_dim; }
};

struct GcnLayer {
  nn::Var weight;  // in_dim x hidden_dim
};

struct FcLayer {
  nn::Var weight;  // in x out
  nn::Var bias;    // 1 x out
  nn::Var bn_gamma, bn_beta;  // unused on the last layer
  nn::BatchNormState bn_state;
  bool has_bn = true;
  // a frozen batchnorm keeps eval behavior (running stats) during training
  bool bn_frozen = false;
};

/// All learnable state of one MAHGCN (or single-scale GCN) instance.
/// gcn[0] processes the finest scale.
struct Model {
  ModelConfig config;
  std::vector<GcnLayer> gcn;    // finest first
  std::vector<Matrix> pool;     // pool[k] maps gcn[k] output to gcn[k+1] input
  std::vector<FcLayer> fl;

  int n_scales() const { return static_cast<int>(config.scales.size()); }

  /// Parameters in a stable order, paired with checkpoint names.
  std::vector<std::pair<std::string, nn::Var>> named_params() {
    std::vector<std::pair<std::string, nn::Var>> out;
    for (std::size_t k = 0; k < gcn.size(); ++k)
      out.emplace_back("gcn" + std::to_string(k) + ".weight", gcn[k].weight);
    for (std::size_t k = 0; k < fl.size(); ++k) {
      out.emplace_back("fl" + std::to_string(k) + ".weight", fl[k].weight);
      out.emplace_back("fl" + std::to_string(k) + ".bias", fl[k].bias);
      if (fl[k].has_bn) {
        out.emplace_back("fl" + std::to_string(k) + ".bn.gamma", fl[k].bn_gamma);
        out.emplace_back("fl" + std::to_string(k) + ".bn.beta", fl[k].bn_beta);
      }
    }
    return out;
  }

  io::NamedTensors to_tensors() {
    io::NamedTensors t;
    for (auto& [name, var] : named_params()) t[name] = var.value();
    for (std::size_t k = 0; k < fl.size(); ++k) {
      if (!fl[k].has_bn) continue;
      t["fl" + std::to_string(k) + ".bn.running_mean"] = fl[k].bn_state.running_mean;
      t["fl" + std::to_string(k) + ".bn.running_var"] = fl[k].bn_state.running_var;
    }
    return t;
  }

  /// Deep copy: fresh parameter nodes, copied values and running stats.
  Model clone() const {
    Model out;
    out.config = config;
    out.pool = pool;
    for (const auto& g : gcn) out.gcn.push_back({nn::Var::param(g.weight.value())});
    for (const auto& layer : fl) {
      FcLayer c;
      c.weight = nn::Var::param(layer.weight.value());
      c.bias = nn::Var::param(layer.bias.value());
      c.has_bn = layer.has_bn;
      c.bn_frozen = layer.bn_frozen;
      if (layer.has_bn) {
        c.bn_gamma = nn::Var::param(layer.bn_gamma.value());
        c.bn_beta = nn::Var::param(layer.bn_beta.value());
        c.bn_state = layer.bn_state;
      }
      out.fl.push_back(std::move(c));
    }
    return out;
  }

  void from_tensors(const io::NamedTensors& t) {
    for (auto& [name, var] : named_params()) {
      auto it = t.find(name);
      require(it != t.end(), "checkpoint", "missing tensor " + name);
      require(it->second.rows() == var.rows() && it->second.cols() == var.cols(),
              "checkpoint", "shape mismatch for " + name);
      const_cast<nn::Var&>(var).mutable_value() = it->second;
    }
    for (std::size_t k = 0; k < fl.size(); ++k) {
      if (!fl[k].has_bn) continue;
      auto mean = t.find("fl" + std::to_string(k) + ".bn.running_mean");
      auto var = t.find("fl" + std::to_string(k) + ".bn.running_var");
      require(mean != t.end() && var != t.end(), "checkpoint",
              "missing batchnorm running stats");
      fl[k].bn_state.running_mean = mean->second;
      fl[k].bn_state.running_var = var->second;
    }
  }
};

/// Seed-deterministic init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights,
/// zero biases, identity batchnorm affine.
inline Model init_model(const ModelConfig& config,
                        const std::vector<MappingMatrix>& mappings,
                        std::uint64_t seed) {
  config.validate();
  require(mappings.size() + 1 == config.scales.size(), "config",
          "need one mapping per adjacent scale pair");
  Rng rng = Rng::stream(seed, 0x1417);

  auto uniform_fan_in = [&](Index rows, Index cols) {
    double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
    return m;
  };

  Model model;
  model.config = config;
  int n_scales = model.n_scales();
  for (int k = 0; k < n_scales; ++k) {
    // gcn[0] (finest) consumes identity features of width n_finest
    int in_dim = k == 0 ? config.scales.back() : config.hidden_dim;
    model.gcn.push_back({nn::Var::param(uniform_fan_in(in_dim, config.hidden_dim))});
  }
  // mappings arrive coarse-to-fine per atlas; gcn runs finest-first
  for (int k = n_scales - 2; k >= 0; --k) {
    const Matrix& m = mappings[static_cast<std::size_t>(k)].entries;
    require(m.rows() == config.scales[static_cast<std::size_t>(k) + 1] &&
                m.cols() == config.scales[static_cast<std::size_t>(k)],
            "config", "mapping shape mismatch");
    model.pool.push_back(m);
  }

  int in_dim = config.readout_dim();
  for (std::size_t k = 0; k < 4; ++k) {
    FcLayer layer;
    int out_dim = config.fl_widths[k];
    layer.weight = nn::Var::param(uniform_fan_in(in_dim, out_dim));
    layer.bias = nn::Var::param(Matrix::Zero(1, out_dim));
    layer.has_bn = k < 3;  // the last layer ends in softmax, no bn/relu
    if (layer.has_bn) {
      layer.bn_gamma = nn::Var::param(Matrix::Ones(1, out_dim));
      layer.bn_beta = nn::Var::param(Matrix::Zero(1, out_dim));
      layer.bn_state = nn::BatchNormState(out_dim);
    }
    model.fl.push_back(std::move(layer));
    in_dim = out_dim;
  }
  return model;
}

/// Single-scale baseline: one GCN layer plus the same 4-FL head.
inline Model init_single_scale_model(int scale, int hidden_dim,
                                     std::vector<int> fl_widths, double dropout_rate,
                                     std::uint64_t seed) {
  ModelConfig config;
  config.scales = {scale};
  config.hidden_dim = hidden_dim;
  config.fl_widths = std::move(fl_widths);
  config.dropout_rate = dropout_rate;
  return init_model(config, {}, seed);
}

struct ForwardTrace {
  // scale_features[i][k]: subject i, k-th GCN output (finest first), nodes x d
  std::vector<std::vector<nn::Var>> scale_features;
  nn::Var fl3;     // third-FL output after bn+relu (deep feature vector)
  nn::Var logits;  // n x 2
  Matrix probs;    // n x 2
};

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

/// One graph convolution: relu(A_norm h W) with train-mode dropout.
inline nn::Var gcn_layer(const Matrix& a_norm, const nn::Var& h,
                         const GcnLayer& layer, double dropout_rate, nn::Mode mode,
                         Rng& rng) {
  nn::Var a = nn::Var::constant(a_norm);
  nn::Var out = nn::relu(nn::matmul(a, nn::matmul(h, layer.weight)));
  return nn::dropout(out, dropout_rate, mode, rng);
}

/// Pooled input for the next coarser scale: h_Q = M^T h_P.
inline nn::Var atlas_pool(const nn::Var& h_fine, const Matrix& mapping) {
  require(mapping.rows() == h_fine.rows(), "shape", "pooling row mismatch");
  return nn::matmul(nn::Var::constant(mapping.transpose()), h_fine);
}

/// Hierarchical forward over a batch of subjects. Networks are indexed coarse
/// to fine, matching the atlas; the GCN chain runs finest to coarsest with
/// atlas-guided pooling in between, mean-over-nodes readouts from every scale
/// are concatenated (skip connections) and fed to the FL head.
inline ForwardTrace mahgcn_forward(Model& model,
                                   const std::vector<const SubjectRecord*>& batch,
                                   nn::Mode mode, Rng& rng) {
  require(!batch.empty(), "shape", "empty batch");
  int n_scales = model.n_scales();
  ForwardTrace trace;
  std::vector<nn::Var> readouts;
  readouts.reserve(batch.size());

  // a subject may carry more scales than the model uses (single-scale
  // baselines share cohorts with the full model); match by ROI count
  auto network_at = [](const SubjectRecord& subj, int scale) -> const Bfn& {
    for (const auto& net : subj.networks)
      if (net.scale == scale) return net;
    fail("shape", "subject " + subj.subject_id + " has no network at scale " +
                      std::to_string(scale));
  };

  for (const SubjectRecord* subj : batch) {
    std::vector<nn::Var> feats;
    std::vector<nn::Var> scale_readouts;
    for (int k = 0; k < n_scales; ++k) {
      int scale_idx = n_scales - 1 - k;  // finest first
      const Bfn& net =
          network_at(*subj, model.config.scales[static_cast<std::size_t>(scale_idx)]);
      Matrix a_norm = normalize_adjacency(net.weights);
      nn::Var h;
      if (k == 0) {
        // identity nodal features: A_norm * (I * W) = A_norm * W
        h = nn::relu(nn::matmul(nn::Var::constant(a_norm),
                                model.gcn[0].weight));
        h = nn::dropout(h, model.config.dropout_rate, mode, rng);
      } else {
        nn::Var pooled = atlas_pool(feats.back(), model.pool[static_cast<std::size_t>(k) - 1]);
        h = gcn_layer(a_norm, pooled, model.gcn[static_cast<std::size_t>(k)],
                      model.config.dropout_rate, mode, rng);
      }
      feats.push_back(h);
      scale_readouts.push_back(nn::mean_rows(h));
    }
    trace.scale_features.push_back(std::move(feats));
    readouts.push_back(nn::concat_cols(scale_readouts));
  }

  nn::Var h = nn::concat_rows(readouts);
  for (std::size_t k = 0; k < model.fl.size(); ++k) {
    auto& layer = model.fl[k];
    h = nn::add_rowvec(nn::matmul(h, layer.weight), layer.bias);
    if (layer.has_bn) {
      nn::Mode bn_mode = layer.bn_frozen ? nn::Mode::Eval : mode;
      h = nn::batchnorm(h, layer.bn_gamma, layer.bn_beta, layer.bn_state, bn_mode);
      h = nn::relu(h);
      if (k == 2) trace.fl3 = h;
    }
  }
  trace.logits = h;
  trace.probs = softmax_rows(h.value());
  return trace;
}

inline ForwardTrace mahgcn_forward(Model& model, const SubjectRecord& subject,
                                   nn::Mode mode, Rng& rng) {
  return mahgcn_forward(model, std::vector<const SubjectRecord*>{&subject}, mode, rng);
}

}  // namespace mahgcn
