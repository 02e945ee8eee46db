#pragma once

#include "mahgcn/common.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mahgcn::nn {

// Reverse-mode engine for the fixed model graph. Every op records a node
// with the cached values its backward pass needs; backward() walks the
// recorded graph once in reverse topological order.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;  // scatters this->grad into parents

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

/// Value handle; copies share the underlying graph node.
class Var {
public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var param(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_value() { return node_->value; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  const NodePtr& node() const { return node_; }
  void zero_grad() { node_->grad.resize(0, 0); }

private:
  NodePtr node_;
};

namespace detail {

inline NodePtr make_op(Matrix value, std::vector<NodePtr> parents,
                       std::function<void(Node&)> backprop) {
  require(value.allFinite(), "non-finite", "op produced a non-finite value");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "shape", "matmul inner dims differ");
  auto pa = a.node(), pb = b.node();
  return Var(detail::make_op(
      pa->value * pb->value, {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
        if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
      }));
}

inline Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "shape", "add shapes differ");
  auto pa = a.node(), pb = b.node();
  return Var(detail::make_op(pa->value + pb->value, {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  }));
}

/// a (n x d) plus a bias row (1 x d) broadcast over rows.
inline Var add_rowvec(const Var& a, const Var& bias) {
  require(bias.rows() == 1 && bias.cols() == a.cols(), "shape", "bias must be 1 x cols");
  auto pa = a.node(), pb = bias.node();
  Matrix out = pa->value;
  out.rowwise() += pb->value.row(0);
  return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad.colwise().sum());
  }));
}

inline Var scale(const Var& a, double c) {
  auto pa = a.node();
  return Var(detail::make_op(pa->value * c, {pa}, [pa, c](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * c);
  }));
}

inline Var relu(const Var& a) {
  auto pa = a.node();
  return Var(detail::make_op(pa->value.cwiseMax(0.0), {pa}, [pa](Node& self) {
    if (pa->requires_grad)
      pa->accumulate(
          (pa->value.array() > 0.0).select(self.grad.array(), 0.0).matrix());
  }));
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "shape", "concat_rows of nothing");
  Index cols = parts.front().cols(), rows = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require(p.cols() == cols, "shape", "concat_rows column mismatch");
    rows += p.rows();
    parents.push_back(p.node());
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parents) {
    out.middleRows(at, p->value.rows()) = p->value;
    at += p->value.rows();
  }
  return Var(detail::make_op(std::move(out), parents, [parents](Node& self) {
    Index at = 0;
    for (const auto& p : parents) {
      if (p->requires_grad) p->accumulate(self.grad.middleRows(at, p->value.rows()));
      at += p->value.rows();
    }
  }));
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "shape", "concat_cols of nothing");
  Index rows = parts.front().rows(), cols = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require(p.rows() == rows, "shape", "concat_cols row mismatch");
    cols += p.cols();
    parents.push_back(p.node());
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parents) {
    out.middleCols(at, p->value.cols()) = p->value;
    at += p->value.cols();
  }
  return Var(detail::make_op(std::move(out), parents, [parents](Node& self) {
    Index at = 0;
    for (const auto& p : parents) {
      if (p->requires_grad) p->accumulate(self.grad.middleCols(at, p->value.cols()));
      at += p->value.cols();
    }
  }));
}

/// Column-wise mean over rows: (n x d) -> (1 x d).
inline Var mean_rows(const Var& a) {
  auto pa = a.node();
  double inv_n = 1.0 / static_cast<double>(pa->value.rows());
  Matrix out = pa->value.colwise().mean();
  return Var(detail::make_op(std::move(out), {pa}, [pa, inv_n](Node& self) {
    if (pa->requires_grad)
      pa->accumulate((Matrix::Ones(pa->value.rows(), 1) * self.grad.row(0)) * inv_n);
  }));
}

inline Var sum(const Var& a) {
  auto pa = a.node();
  Matrix out(1, 1);
  out(0, 0) = pa->value.sum();
  return Var(detail::make_op(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad)
      pa->accumulate(Matrix::Constant(pa->value.rows(), pa->value.cols(),
                                      self.grad(0, 0)));
  }));
}

// ---------------------------------------------------------------------------
// Batch normalization over rows (each column is a feature)
// ---------------------------------------------------------------------------

struct BatchNormState {
  Vector running_mean;
  Vector running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BatchNormState(Index dim = 0)
      : running_mean(Vector::Zero(dim)), running_var(Vector::Ones(dim)) {}
};

enum class Mode { Train, Eval };

inline Var batchnorm(const Var& x, const Var& gamma, const Var& beta,
                     BatchNormState& state, Mode mode) {
  Index n = x.rows(), d = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == d, "shape", "batchnorm gamma shape");
  require(beta.rows() == 1 && beta.cols() == d, "shape", "batchnorm beta shape");
  auto px = x.node(), pg = gamma.node(), pb = beta.node();

  if (mode == Mode::Eval) {
    Eigen::RowVectorXd inv_sd =
        (state.running_var.transpose().array() + state.eps).sqrt().inverse();
    Matrix xhat = (px->value.rowwise() - state.running_mean.transpose())
                      .array()
                      .rowwise() *
                  inv_sd.array();
    Matrix out = (xhat.array().rowwise() * pg->value.row(0).array()).matrix();
    out.rowwise() += pb->value.row(0);
    auto xhat_c = std::make_shared<Matrix>(std::move(xhat));
    Eigen::RowVectorXd inv_sd_c = inv_sd;
    return Var(detail::make_op(
        std::move(out), {px, pg, pb}, [px, pg, pb, xhat_c, inv_sd_c](Node& self) {
          if (pg->requires_grad)
            pg->accumulate((self.grad.array() * xhat_c->array()).colwise().sum().matrix());
          if (pb->requires_grad) pb->accumulate(self.grad.colwise().sum());
          if (px->requires_grad)
            px->accumulate(((self.grad.array().rowwise() * pg->value.row(0).array())
                                .rowwise() *
                            inv_sd_c.array())
                               .matrix());
        }));
  }

  require(n >= 2, "batch", "batchnorm needs batch size >= 2 in train mode");
  Eigen::RowVectorXd mu = px->value.colwise().mean();
  Matrix centered = px->value.rowwise() - mu;
  Eigen::RowVectorXd var =
      centered.array().square().colwise().sum() / static_cast<double>(n);
  Eigen::RowVectorXd inv_sd = (var.array() + state.eps).sqrt().inverse();
  Matrix xhat = centered.array().rowwise() * inv_sd.array();

  // running stats use the unbiased batch variance
  double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  state.running_mean =
      (1.0 - state.momentum) * state.running_mean + state.momentum * mu.transpose();
  state.running_var = (1.0 - state.momentum) * state.running_var +
                      state.momentum * (var.transpose() * unbias);

  Matrix out = (xhat.array().rowwise() * pg->value.row(0).array()).matrix();
  out.rowwise() += pb->value.row(0);

  auto xhat_c = std::make_shared<Matrix>(std::move(xhat));
  Eigen::RowVectorXd inv_sd_c = inv_sd;
  double inv_n = 1.0 / static_cast<double>(n);
  return Var(detail::make_op(
      std::move(out), {px, pg, pb},
      [px, pg, pb, xhat_c, inv_sd_c, inv_n](Node& self) {
        Eigen::RowVectorXd dbeta = self.grad.colwise().sum();
        Eigen::RowVectorXd dgamma =
            (self.grad.array() * xhat_c->array()).colwise().sum();
        if (pg->requires_grad) pg->accumulate(dgamma);
        if (pb->requires_grad) pb->accumulate(dbeta);
        if (px->requires_grad) {
          // dx = g/sd * (dy - mean(dy) - xhat * mean(dy .* xhat))
          Matrix dxhat =
              self.grad.array().rowwise() * pg->value.row(0).array();
          Eigen::RowVectorXd mean_dxhat = dxhat.colwise().sum() * inv_n;
          Eigen::RowVectorXd mean_dxhat_xhat =
              (dxhat.array() * xhat_c->array()).colwise().sum() * inv_n;
          Matrix dx =
              ((dxhat.rowwise() - mean_dxhat).array() -
               xhat_c->array().rowwise() * mean_dxhat_xhat.array())
                  .rowwise() *
              inv_sd_c.array();
          px->accumulate(dx);
        }
      }));
}

inline Var dropout(const Var& x, double rate, Mode mode, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "config", "dropout rate must be in [0,1)");
  if (mode == Mode::Eval || rate == 0.0) return x;
  auto px = x.node();
  double keep = 1.0 - rate;
  auto mask = std::make_shared<Matrix>(px->value.rows(), px->value.cols());
  for (Index j = 0; j < mask->cols(); ++j)
    for (Index i = 0; i < mask->rows(); ++i)
      (*mask)(i, j) = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  return Var(detail::make_op(px->value.cwiseProduct(*mask), {px},
                             [px, mask](Node& self) {
                               if (px->requires_grad)
                                 px->accumulate(self.grad.cwiseProduct(*mask));
                             }));
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy head (two classes)
// ---------------------------------------------------------------------------

struct LossResult {
  Var loss;        // 1x1
  Matrix probs;    // n x 2
};

enum class Reduction { Mean, Sum };

/// Per-sample loss is -w_i * log p(label_i); reduced by mean or plain sum.
inline LossResult softmax_crossentropy(const Var& logits,
                                       const std::vector<int>& labels,
                                       const std::vector<double>& sample_weights,
                                       Reduction reduction = Reduction::Mean) {
  Index n = logits.rows();
  require(logits.cols() == 2, "shape", "two-class head expected");
  require(static_cast<Index>(labels.size()) == n, "shape", "label count mismatch");
  require(static_cast<Index>(sample_weights.size()) == n, "shape",
          "weight count mismatch");
  auto pl = logits.node();
  require(pl->value.allFinite(), "non-finite", "non-finite logits");

  Matrix probs(n, 2);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double a = pl->value(i, 0), b = pl->value(i, 1);
    double m = std::max(a, b);
    double za = std::exp(a - m), zb = std::exp(b - m);
    double z = za + zb;
    probs(i, 0) = za / z;
    probs(i, 1) = zb / z;
    double logp = (labels[i] == 0 ? a : b) - m - std::log(z);
    total += -sample_weights[i] * logp;
  }
  double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(n) : 1.0;
  Matrix out(1, 1);
  out(0, 0) = total * norm;

  auto probs_c = std::make_shared<Matrix>(probs);
  auto labels_c = std::make_shared<std::vector<int>>(labels);
  auto weights_c = std::make_shared<std::vector<double>>(sample_weights);
  Var loss(detail::make_op(
      std::move(out), {pl}, [pl, probs_c, labels_c, weights_c, norm](Node& self) {
        if (!pl->requires_grad) return;
        double g = self.grad(0, 0) * norm;
        Matrix d = *probs_c;
        for (Index i = 0; i < d.rows(); ++i) {
          d(i, (*labels_c)[i]) -= 1.0;
          d.row(i) *= g * (*weights_c)[i];
        }
        pl->accumulate(d);
      }));
  return {loss, std::move(probs)};
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Populates grads of every requires_grad node reachable from `loss`.
/// A node's backprop closure is consumed; calling backward twice on the same
/// graph without re-running the forward pass is an error.
inline void backward(const Var& loss) {
  require(loss.rows() == 1 && loss.cols() == 1, "shape", "loss must be scalar");
  require(loss.node()->requires_grad, "graph", "loss does not depend on any parameter");

  // iterative DFS for reverse topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  require(static_cast<bool>(loss.node()->backprop) || loss.node()->parents.empty(),
          "graph", "backward called twice without a new forward pass");
  loss.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() != 0) {
      node->backprop(*node);
      node->backprop = nullptr;
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central differences against the analytic gradient of f at x.
/// Returns the max relative error over coordinates with non-negligible
/// magnitude. f must be deterministic.
inline double finite_diff_check(const std::function<double(const Matrix&)>& f,
                                const Matrix& x, const Matrix& analytic_grad,
                                double step = 1e-5) {
  Matrix xp = x;
  double worst = 0.0;
  for (Index j = 0; j < x.cols(); ++j) {
    for (Index i = 0; i < x.rows(); ++i) {
      double orig = xp(i, j);
      xp(i, j) = orig + step;
      double fp = f(xp);
      xp(i, j) = orig - step;
      double fm = f(xp);
      xp(i, j) = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double analytic = analytic_grad(i, j);
      double denom = std::abs(analytic) + std::abs(numeric);
      if (denom > 1e-8)
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mahgcn::nn
