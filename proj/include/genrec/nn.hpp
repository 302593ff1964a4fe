#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "genrec/common.hpp"

namespace genrec {

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Forward kernels, shared between the training tape and the no-grad
// inference session so both paths compute identical values.
// ---------------------------------------------------------------------------

template <typename S>
void softmax_rows(Mat<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    const S sum = m.row(r).sum();
    m.row(r) /= sum;
  }
}

// Multi-head scaled dot-product attention. Q is Lq x (heads*dk); K and V are
// Lk x (heads*dk) and Lk x (heads*dv). Returns Lq x (heads*dv).
template <typename S>
Mat<S> attention_forward(const Mat<S>& Q, const Mat<S>& K, const Mat<S>& V, int heads,
                         bool causal, std::vector<Mat<S>>* save_attn = nullptr) {
  const Eigen::Index Lq = Q.rows(), Lk = K.rows();
  const Eigen::Index dk = Q.cols() / heads, dv = V.cols() / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  Mat<S> out(Lq, heads * dv);
  if (save_attn) save_attn->assign(heads, Mat<S>());
  for (int h = 0; h < heads; ++h) {
    Mat<S> scores = Q.block(0, h * dk, Lq, dk) * K.block(0, h * dk, Lk, dk).transpose();
    scores *= scale;
    if (causal) {
      for (Eigen::Index i = 0; i < Lq; ++i)
        for (Eigen::Index j = i + 1; j < Lk; ++j)
          scores(i, j) = -std::numeric_limits<S>::infinity();
    }
    softmax_rows(scores);
    out.block(0, h * dv, Lq, dv) = scores * V.block(0, h * dv, Lk, dv);
    if (save_attn) (*save_attn)[h] = std::move(scores);
  }
  return out;
}

template <typename S>
Mat<S> layer_norm_forward(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta,
                          Mat<S>* xhat_out = nullptr, Vec<S>* inv_std_out = nullptr) {
  Mat<S> xhat(x.rows(), x.cols());
  Vec<S> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S is = static_cast<S>(1.0) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * is;
    inv_std[r] = is;
  }
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    y.row(r) = xhat.row(r).cwiseProduct(gamma.row(0)) + beta.row(0);
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return y;
}

// Log-softmax of one row segment [lo, hi).
template <typename S>
Vec<S> log_softmax_segment(const Mat<S>& logits, int row, int lo, int hi) {
  const int n = hi - lo;
  Vec<S> seg(n);
  for (int j = 0; j < n; ++j) seg[j] = logits(row, lo + j);
  const S mx = seg.maxCoeff();
  S sum = 0;
  for (int j = 0; j < n; ++j) sum += std::exp(seg[j] - mx);
  const S lse = mx + std::log(sum);
  for (int j = 0; j < n; ++j) seg[j] -= lse;
  return seg;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape.
// ---------------------------------------------------------------------------

using Ref = int;

template <typename S>
class Tape {
 public:
  using M = Mat<S>;

  Tape() = default;

  void set_training(bool training, Rng* rng) {
    training_ = training;
    rng_ = rng;
  }

  const M& val(Ref r) const { return *nodes_[r].v; }
  bool training() const { return training_; }

  Ref constant(M v) {
    return push(std::move(v), false, nullptr);
  }

  // External parameter; gradients accumulate into *sink after backward().
  // A null sink makes the parameter a frozen input.
  Ref param(const M* value, M* sink) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.v = value;
    n.sink = sink;
    n.requires_grad = sink != nullptr;
    return static_cast<Ref>(nodes_.size() - 1);
  }

  Ref lookup(Ref table, std::vector<int> rows) {
    const M& t = val(table);
    M out(static_cast<Eigen::Index>(rows.size()), t.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = t.row(rows[i]);
    Ref r = push(std::move(out), nodes_[table].requires_grad, nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, table, rows = std::move(rows), r]() {
        M& g = grad(r);
        M& tg = ensure_grad(table);
        for (std::size_t i = 0; i < rows.size(); ++i) tg.row(rows[i]) += g.row(i);
      };
    return r;
  }

  Ref matmul(Ref a, Ref b) {
    Ref r = push(val(a) * val(b), needs(a) || needs(b), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, a, b, r]() {
        M& g = grad(r);
        if (needs(a)) ensure_grad(a) += g * val(b).transpose();
        if (needs(b)) ensure_grad(b) += val(a).transpose() * g;
      };
    return r;
  }

  Ref add(Ref a, Ref b) {
    Ref r = push(val(a) + val(b), needs(a) || needs(b), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, a, b, r]() {
        M& g = grad(r);
        if (needs(a)) ensure_grad(a) += g;
        if (needs(b)) ensure_grad(b) += g;
      };
    return r;
  }

  // b is a 1 x n row vector broadcast over the rows of x.
  Ref add_rowvec(Ref x, Ref b) {
    M out = val(x);
    out.rowwise() += val(b).row(0);
    Ref r = push(std::move(out), needs(x) || needs(b), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, x, b, r]() {
        M& g = grad(r);
        if (needs(x)) ensure_grad(x) += g;
        if (needs(b)) ensure_grad(b).row(0) += g.colwise().sum();
      };
    return r;
  }

  Ref mul(Ref a, Ref b) {
    Ref r = push(val(a).cwiseProduct(val(b)), needs(a) || needs(b), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, a, b, r]() {
        M& g = grad(r);
        if (needs(a)) ensure_grad(a) += g.cwiseProduct(val(b));
        if (needs(b)) ensure_grad(b) += g.cwiseProduct(val(a));
      };
    return r;
  }

  Ref one_minus(Ref x) {
    M out = M::Constant(val(x).rows(), val(x).cols(), static_cast<S>(1)) - val(x);
    Ref r = push(std::move(out), needs(x), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, x, r]() {
        if (needs(x)) ensure_grad(x) -= grad(r);
      };
    return r;
  }

  Ref relu(Ref x) {
    Ref r = push(val(x).cwiseMax(static_cast<S>(0)), needs(x), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, x, r]() {
        M mask = (val(x).array() > static_cast<S>(0)).template cast<S>();
        ensure_grad(x) += grad(r).cwiseProduct(mask);
      };
    return r;
  }

  Ref sigmoid(Ref x) {
    M out = (static_cast<S>(1) / (static_cast<S>(1) + (-val(x).array()).exp())).matrix();
    Ref r = push(std::move(out), needs(x), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, x, r]() {
        const M& y = val(r);
        M dydx = y.array() * (static_cast<S>(1) - y.array());
        ensure_grad(x) += grad(r).cwiseProduct(dydx);
      };
    return r;
  }

  Ref concat_rows(Ref a, Ref b) {
    const M& va = val(a);
    const M& vb = val(b);
    M out(va.rows() + vb.rows(), va.cols());
    out.topRows(va.rows()) = va;
    out.bottomRows(vb.rows()) = vb;
    Ref r = push(std::move(out), needs(a) || needs(b), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, a, b, r]() {
        M& g = grad(r);
        const Eigen::Index na = val(a).rows();
        if (needs(a)) ensure_grad(a) += g.topRows(na);
        if (needs(b)) ensure_grad(b) += g.bottomRows(g.rows() - na);
      };
    return r;
  }

  Ref concat_cols(Ref a, Ref b) {
    const M& va = val(a);
    const M& vb = val(b);
    M out(va.rows(), va.cols() + vb.cols());
    out.leftCols(va.cols()) = va;
    out.rightCols(vb.cols()) = vb;
    Ref r = push(std::move(out), needs(a) || needs(b), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, a, b, r]() {
        M& g = grad(r);
        const Eigen::Index na = val(a).cols();
        if (needs(a)) ensure_grad(a) += g.leftCols(na);
        if (needs(b)) ensure_grad(b) += g.rightCols(g.cols() - na);
      };
    return r;
  }

  Ref layer_norm(Ref x, Ref gamma, Ref beta) {
    auto xhat = std::make_shared<M>();
    auto inv_std = std::make_shared<Vec<S>>();
    M out = layer_norm_forward(val(x), val(gamma), val(beta), xhat.get(), inv_std.get());
    Ref r = push(std::move(out), needs(x) || needs(gamma) || needs(beta), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, x, gamma, beta, r, xhat, inv_std]() {
        M& g = grad(r);
        const M& gm = val(gamma);
        if (needs(gamma)) ensure_grad(gamma).row(0) += g.cwiseProduct(*xhat).colwise().sum();
        if (needs(beta)) ensure_grad(beta).row(0) += g.colwise().sum();
        if (needs(x)) {
          M& gx = ensure_grad(x);
          for (Eigen::Index row = 0; row < g.rows(); ++row) {
            Eigen::Matrix<S, 1, Eigen::Dynamic> t = g.row(row).cwiseProduct(gm.row(0));
            const S mean_t = t.mean();
            const S mean_tx = t.cwiseProduct(xhat->row(row)).mean();
            gx.row(row) += (*inv_std)[row] *
                           (t.array() - mean_t - xhat->row(row).array() * mean_tx).matrix();
          }
        }
      };
    return r;
  }

  Ref attention(Ref q, Ref k, Ref v, int heads, bool causal) {
    auto attn = std::make_shared<std::vector<M>>();
    M out = attention_forward(val(q), val(k), val(v), heads, causal, attn.get());
    Ref r = push(std::move(out), needs(q) || needs(k) || needs(v), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, q, k, v, heads, r, attn]() {
        const M& Q = val(q);
        const M& K = val(k);
        const M& V = val(v);
        M& g = grad(r);
        const Eigen::Index Lq = Q.rows(), Lk = K.rows();
        const Eigen::Index dk = Q.cols() / heads, dv = V.cols() / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
        for (int h = 0; h < heads; ++h) {
          const M& A = (*attn)[h];
          M dO = g.block(0, h * dv, Lq, dv);
          M dA = dO * V.block(0, h * dv, Lk, dv).transpose();
          if (needs(v))
            ensure_grad(v).block(0, h * dv, Lk, dv) += A.transpose() * dO;
          Vec<S> rowdot = (dA.cwiseProduct(A)).rowwise().sum();
          M dS = A.cwiseProduct(dA.colwise() - rowdot);
          dS *= scale;
          if (needs(q))
            ensure_grad(q).block(0, h * dk, Lq, dk) += dS * K.block(0, h * dk, Lk, dk);
          if (needs(k))
            ensure_grad(k).block(0, h * dk, Lk, dk) += dS.transpose() * Q.block(0, h * dk, Lq, dk);
        }
      };
    return r;
  }

  // Inverted dropout; identity when not training or p == 0.
  Ref dropout(Ref x, double p) {
    if (!training_ || p <= 0.0) return x;
    if (!rng_) throw std::logic_error("dropout: training tape has no rng");
    const M& vx = val(x);
    M mask(vx.rows(), vx.cols());
    const S keep = static_cast<S>(1.0 - p);
    const S inv = static_cast<S>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
      for (Eigen::Index j = 0; j < mask.cols(); ++j)
        mask(i, j) = (static_cast<S>(rng_->uniform()) < keep) ? inv : static_cast<S>(0);
    Ref m = constant(std::move(mask));
    return mul(x, m);
  }

  // Cross-entropy of logits(row, [lo, hi)) against target column `target`
  // (absolute column index). Produces a 1x1 node.
  Ref cross_entropy(Ref logits, int row, int target, int lo, int hi) {
    Vec<S> logp = log_softmax_segment(val(logits), row, lo, hi);
    auto probs = std::make_shared<Vec<S>>(logp.array().exp().matrix());
    M out(1, 1);
    out(0, 0) = -logp[target - lo];
    Ref r = push(std::move(out), needs(logits), nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, logits, row, target, lo, hi, r, probs]() {
        const S g = grad(r)(0, 0);
        M& gl = ensure_grad(logits);
        for (int j = lo; j < hi; ++j) gl(row, j) += g * (*probs)[j - lo];
        gl(row, target) -= g;
      };
    return r;
  }

  Ref add_scalars(const std::vector<Ref>& xs) {
    if (xs.empty()) throw std::logic_error("add_scalars: empty");
    M out(1, 1);
    S total = 0;
    bool rg = false;
    for (Ref x : xs) {
      total += val(x)(0, 0);
      rg = rg || needs(x);
    }
    out(0, 0) = total;
    Ref r = push(std::move(out), rg, nullptr);
    if (nodes_[r].requires_grad)
      nodes_[r].back = [this, xs, r]() {
        const S g = grad(r)(0, 0);
        for (Ref x : xs)
          if (needs(x)) ensure_grad(x)(0, 0) += g;
      };
    return r;
  }

  // Reverse sweep from `root`, seeding d(root)/d(root) = seed. Parameter
  // gradients are flushed into their sinks.
  void backward(Ref root, S seed = static_cast<S>(1)) {
    ensure_grad(root)(0, 0) += seed;
    for (Ref r = static_cast<Ref>(nodes_.size()) - 1; r >= 0; --r) {
      Node& n = nodes_[r];
      if (!n.back || n.grad.size() == 0) continue;
      n.back();
    }
    for (Node& n : nodes_)
      if (n.sink && n.grad.size() != 0) *n.sink += n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M owned;
    const M* v = nullptr;
    M grad;
    M* sink = nullptr;
    std::function<void()> back;
    bool requires_grad = false;
  };

  // std::deque keeps node references stable, so v may safely point at the
  // node's own storage.
  Ref push(M value, bool requires_grad, M* sink) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.owned = std::move(value);
    n.v = &n.owned;
    n.sink = sink;
    n.requires_grad = requires_grad;
    return static_cast<Ref>(nodes_.size() - 1);
  }

  bool needs(Ref r) const { return nodes_[r].requires_grad; }

  M& grad(Ref r) { return nodes_[r].grad; }

  M& ensure_grad(Ref r) {
    Node& n = nodes_[r];
    if (n.grad.size() == 0) n.grad = M::Zero(n.v->rows(), n.v->cols());
    return n.grad;
  }

  std::deque<Node> nodes_;
  bool training_ = false;
  Rng* rng_ = nullptr;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace genrec
