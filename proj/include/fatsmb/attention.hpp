#pragma once

// Rotary position transforms and multi-head scaled dot-product attention over
// left-padded sequences, as differentiable operations.
//
// Layout: a batch of B sequences of length L is a (B*L) x d matrix; head h
// owns columns [h*d_k, (h+1)*d_k); rotary pair j of head h is the column pair
// (h*d_k + 2j, h*d_k + 2j + 1).

#include <vector>

#include "fatsmb/autograd.hpp"

namespace fatsmb::attn {

using ag::Var;

// theta_j = base^(-2j/d_k), j = 0 .. d_k/2 - 1.
inline std::vector<double> rope_frequencies(int d_k, double base = 10000.0) {
  if (d_k <= 0 || d_k % 2 != 0) throw ConfigError("rotary head dimension must be positive and even");
  std::vector<double> theta(static_cast<std::size_t>(d_k / 2));
  for (int j = 0; j < d_k / 2; ++j) theta[static_cast<std::size_t>(j)] = std::pow(base, -2.0 * j / d_k);
  return theta;
}

// Rotates each consecutive pair (x_2j, x_2j+1) by m * theta_j.
inline Vector rope_transform(const Vector& x, double m, const std::vector<double>& theta) {
  if (x.size() % 2 != 0) throw UsageError("rope_transform: vector length must be even");
  Vector y(x.size());
  for (Eigen::Index p = 0; p < x.size() / 2; ++p) {
    const double a = m * theta[static_cast<std::size_t>(p) % theta.size()];
    const double c = std::cos(a), s = std::sin(a);
    y(2 * p) = x(2 * p) * c - x(2 * p + 1) * s;
    y(2 * p + 1) = x(2 * p) * s + x(2 * p + 1) * c;
  }
  return y;
}

// rope_transform followed by scaling both components of pair j by scales(j).
inline Vector barope_transform(const Vector& x, const Vector& scales, double m, const std::vector<double>& theta) {
  if (scales.size() * 2 != x.size()) throw UsageError("barope_transform: need one scale per rotary pair");
  Vector y = rope_transform(x, m, theta);
  for (Eigen::Index p = 0; p < scales.size(); ++p) {
    y(2 * p) *= scales(p);
    y(2 * p + 1) *= scales(p);
  }
  return y;
}

// Row-wise rotary transform of a (rows x d) matrix with `heads` heads; row r
// is rotated by position positions[r].
inline Var rotary(const Var& x, const std::vector<double>& positions, int heads, const std::vector<double>& theta) {
  const Eigen::Index n = x.rows(), d = x.cols();
  const Eigen::Index dk = d / heads;
  const Eigen::Index half = dk / 2;
  ag::detail::check(static_cast<Eigen::Index>(positions.size()) == n && dk * heads == d && dk % 2 == 0, "rotary");
  Matrix cosv(n, half), sinv(n, half);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index j = 0; j < half; ++j) {
      const double a = positions[static_cast<std::size_t>(r)] * theta[static_cast<std::size_t>(j)];
      cosv(r, j) = std::cos(a);
      sinv(r, j) = std::sin(a);
    }
  auto apply = [heads, dk, half](const Matrix& in, const Matrix& c, const Matrix& s, double sign) {
    Matrix out(in.rows(), in.cols());
    for (Eigen::Index r = 0; r < in.rows(); ++r)
      for (int h = 0; h < heads; ++h)
        for (Eigen::Index j = 0; j < half; ++j) {
          const Eigen::Index c0 = h * dk + 2 * j;
          const double x0 = in(r, c0), x1 = in(r, c0 + 1);
          const double cs = c(r, j), sn = sign * s(r, j);
          out(r, c0) = x0 * cs - x1 * sn;
          out(r, c0 + 1) = x0 * sn + x1 * cs;
        }
    return out;
  };
  Var out = ag::detail::make(apply(x.value(), cosv, sinv, 1.0), {x});
  if (out.requires_grad()) {
    ag::Node *o = out.get(), *nx = x.get();
    o->backward = [o, nx, apply, cosv = std::move(cosv), sinv = std::move(sinv)] {
      nx->accumulate(apply(o->grad, cosv, sinv, -1.0));
    };
  }
  return out;
}

// (rows x d/2) -> (rows x d), duplicating column j into columns 2j and 2j+1.
inline Var expand_pairs(const Var& s) {
  const Eigen::Index n = s.rows(), half = s.cols();
  Matrix v(n, 2 * half);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index j = 0; j < half; ++j) v(r, 2 * j) = v(r, 2 * j + 1) = s.value()(r, j);
  Var out = ag::detail::make(std::move(v), {s});
  if (out.requires_grad()) {
    ag::Node *o = out.get(), *ns = s.get();
    o->backward = [o, ns, n, half] {
      Matrix g(n, half);
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index j = 0; j < half; ++j) g(r, j) = o->grad(r, 2 * j) + o->grad(r, 2 * j + 1);
      ns->accumulate(g);
    };
  }
  return out;
}

// Post-softmax attention matrices, one L x L matrix per (sequence, head),
// indexed [seq * heads + head]. Rows and columns at pad positions are zero.
struct AttentionTrace {
  std::vector<Matrix> probs;
};

// Bidirectional multi-head attention. Sequence s occupies rows
// [s*L, (s+1)*L); its real positions are [s*L + starts[s], (s+1)*L). Pad
// queries produce zero rows and pad keys receive zero weight.
inline Var attention_core(const Var& q, const Var& k, const Var& v, int heads, int seq_len,
                          const std::vector<int>& starts, AttentionTrace* trace = nullptr) {
  const Eigen::Index n = q.rows(), d = q.cols();
  const Eigen::Index dk = d / heads;
  const Eigen::Index L = seq_len;
  const auto B = static_cast<Eigen::Index>(starts.size());
  ag::detail::check(n == B * L && k.rows() == n && v.rows() == n && k.cols() == d && v.cols() == d, "attention_core");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix out = Matrix::Zero(n, d);
  std::vector<Matrix> probs(static_cast<std::size_t>(B * heads));
  for (Eigen::Index s = 0; s < B; ++s) {
    const Eigen::Index st = starts[static_cast<std::size_t>(s)];
    const Eigen::Index m = L - st;
    if (m <= 0) throw NumericalError("attention over a fully padded sequence is undefined");
    const Eigen::Index r0 = s * L + st;
    for (int h = 0; h < heads; ++h) {
      const auto Q = q.value().block(r0, h * dk, m, dk);
      const auto K = k.value().block(r0, h * dk, m, dk);
      const auto V = v.value().block(r0, h * dk, m, dk);
      Matrix P = ag::softmax_rows_value((Q * K.transpose()) * scale);
      out.block(r0, h * dk, m, dk) = P * V;
      probs[static_cast<std::size_t>(s * heads + h)] = std::move(P);
    }
  }
  if (trace) {
    trace->probs.clear();
    for (Eigen::Index s = 0; s < B; ++s) {
      const Eigen::Index st = starts[static_cast<std::size_t>(s)];
      for (int h = 0; h < heads; ++h) {
        Matrix full = Matrix::Zero(L, L);
        full.bottomRightCorner(L - st, L - st) = probs[static_cast<std::size_t>(s * heads + h)];
        trace->probs.push_back(std::move(full));
      }
    }
  }

  Var result = ag::detail::make(std::move(out), {q, k, v});
  if (result.requires_grad()) {
    ag::Node *o = result.get(), *nq = q.get(), *nk = k.get(), *nv = v.get();
    o->backward = [o, nq, nk, nv, heads, dk, L, starts, scale, probs = std::move(probs)] {
      const Eigen::Index rows = o->grad.rows(), cols = o->grad.cols();
      Matrix gq = Matrix::Zero(rows, cols), gk = Matrix::Zero(rows, cols), gv = Matrix::Zero(rows, cols);
      for (std::size_t s = 0; s < starts.size(); ++s) {
        const Eigen::Index st = starts[s];
        const Eigen::Index m = L - st;
        const Eigen::Index r0 = static_cast<Eigen::Index>(s) * L + st;
        for (int h = 0; h < heads; ++h) {
          const Matrix& P = probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
          const auto G = o->grad.block(r0, h * dk, m, dk);
          const auto Q = nq->value.block(r0, h * dk, m, dk);
          const auto K = nk->value.block(r0, h * dk, m, dk);
          const auto V = nv->value.block(r0, h * dk, m, dk);
          gv.block(r0, h * dk, m, dk) = P.transpose() * G;
          Matrix dP = G * V.transpose();
          Eigen::VectorXd rowdot = dP.cwiseProduct(P).rowwise().sum();
          Matrix dS = P.cwiseProduct(dP.colwise() - rowdot) * scale;
          gq.block(r0, h * dk, m, dk) = dS * K;
          gk.block(r0, h * dk, m, dk) = dS.transpose() * Q;
        }
      }
      if (nq->requires_grad) nq->accumulate(gq);
      if (nk->requires_grad) nk->accumulate(gk);
      if (nv->requires_grad) nv->accumulate(gv);
    };
  }
  return result;
}

}  // namespace fatsmb::attn
