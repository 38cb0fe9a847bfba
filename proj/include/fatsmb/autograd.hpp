#pragma once

// Minimal reverse-mode automatic differentiation over row-major double
// matrices. A forward pass builds a graph of Nodes; backward() walks it in
// reverse topological order. Rows are tokens or examples, columns features.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "fatsmb/common.hpp"

namespace fatsmb::ag {

struct Node {
  Matrix value;
  Matrix grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  void accumulate(const Matrix& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (!has_grad) {
      grad = g.matrix();
      has_grad = true;
    } else {
      grad.array() += g.array();
    }
  }
  void zero_grad() {
    has_grad = false;
    grad.resize(0, 0);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Gradient after backward(); a zero matrix of the right shape when no
  // gradient reached this node.
  Matrix grad() const {
    if (node_->has_grad) return node_->grad;
    return Matrix::Zero(node_->value.rows(), node_->value.cols());
  }
  bool has_grad() const { return node_->has_grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->zero_grad(); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  Node* get() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var leaf(Matrix value, bool requires_grad = true) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

namespace detail {

inline Var make(Matrix value, std::initializer_list<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.ptr());
  }
  return Var(std::move(n));
}

inline Var make(Matrix value, const std::vector<Var>& parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.ptr());
  }
  return Var(std::move(n));
}

inline void check(bool ok, const char* what) {
  if (!ok) throw Error(std::string("autograd shape mismatch: ") + what);
}

}  // namespace detail

inline void backward(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; graphs from deep stacks overflow recursion.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.get()->accumulate(Matrix::Ones(root.rows(), root.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad) n->backward();
  }
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::check(a.cols() == b.rows(), "matmul");
  Var out = detail::make(a.value() * b.value(), {a, b});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nb = b.get();
    o->backward = [o, na, nb] {
      if (na->requires_grad) na->accumulate_expr(o->grad * nb->value.transpose());
      if (nb->requires_grad) nb->accumulate_expr(na->value.transpose() * o->grad);
    };
  }
  return out;
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::check(a.cols() == b.cols(), "matmul_nt");
  Var out = detail::make(a.value() * b.value().transpose(), {a, b});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nb = b.get();
    o->backward = [o, na, nb] {
      if (na->requires_grad) na->accumulate_expr(o->grad * nb->value);
      if (nb->requires_grad) nb->accumulate_expr(o->grad.transpose() * na->value);
    };
  }
  return out;
}

inline Var add(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Var out = detail::make(a.value() + b.value(), {a, b});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nb = b.get();
    o->backward = [o, na, nb] {
      if (na->requires_grad) na->accumulate(o->grad);
      if (nb->requires_grad) nb->accumulate(o->grad);
    };
  }
  return out;
}

inline Var sub(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Var out = detail::make(a.value() - b.value(), {a, b});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nb = b.get();
    o->backward = [o, na, nb] {
      if (na->requires_grad) na->accumulate(o->grad);
      if (nb->requires_grad) nb->accumulate_expr(-o->grad);
    };
  }
  return out;
}

inline Var mul(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
  Var out = detail::make(a.value().cwiseProduct(b.value()), {a, b});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nb = b.get();
    o->backward = [o, na, nb] {
      if (na->requires_grad) na->accumulate_expr(o->grad.cwiseProduct(nb->value));
      if (nb->requires_grad) nb->accumulate_expr(o->grad.cwiseProduct(na->value));
    };
  }
  return out;
}

inline Var scale(const Var& a, double s) {
  Var out = detail::make(a.value() * s, {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, s] { na->accumulate_expr(o->grad * s); };
  }
  return out;
}

inline Var add_scalar(const Var& a, double s) {
  Var out = detail::make(a.value().array() + s, {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na] { na->accumulate(o->grad); };
  }
  return out;
}

// a (n x m) + r (1 x m) broadcast over rows.
inline Var add_row(const Var& a, const Var& r) {
  detail::check(r.rows() == 1 && r.cols() == a.cols(), "add_row");
  Matrix v = a.value();
  v.rowwise() += r.value().row(0);
  Var out = detail::make(std::move(v), {a, r});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nr = r.get();
    o->backward = [o, na, nr] {
      if (na->requires_grad) na->accumulate(o->grad);
      if (nr->requires_grad) nr->accumulate_expr(o->grad.colwise().sum());
    };
  }
  return out;
}

// a (n x m) * r (1 x m) broadcast over rows.
inline Var mul_row(const Var& a, const Var& r) {
  detail::check(r.rows() == 1 && r.cols() == a.cols(), "mul_row");
  Matrix v = a.value().array().rowwise() * r.value().row(0).array();
  Var out = detail::make(std::move(v), {a, r});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nr = r.get();
    o->backward = [o, na, nr] {
      if (na->requires_grad) na->accumulate_expr(o->grad.array().rowwise() * nr->value.row(0).array());
      if (nr->requires_grad) nr->accumulate_expr(o->grad.cwiseProduct(na->value).colwise().sum());
    };
  }
  return out;
}

// a (n x m) * c (n x 1) broadcast over columns.
inline Var mul_col(const Var& a, const Var& c) {
  detail::check(c.cols() == 1 && c.rows() == a.rows(), "mul_col");
  Matrix v = a.value().array().colwise() * c.value().col(0).array();
  Var out = detail::make(std::move(v), {a, c});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nc = c.get();
    o->backward = [o, na, nc] {
      if (na->requires_grad) na->accumulate_expr(o->grad.array().colwise() * nc->value.col(0).array());
      if (nc->requires_grad) nc->accumulate_expr(o->grad.cwiseProduct(na->value).rowwise().sum());
    };
  }
  return out;
}

// Multiplies rows by a fixed 0/1 (or any constant) per-row factor.
inline Var mask_rows(const Var& a, const std::vector<double>& factors) {
  detail::check(static_cast<Eigen::Index>(factors.size()) == a.rows(), "mask_rows");
  Eigen::Map<const Eigen::VectorXd> f(factors.data(), static_cast<Eigen::Index>(factors.size()));
  Matrix v = a.value().array().colwise() * f.array();
  Var out = detail::make(std::move(v), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, factors] {
      Eigen::Map<const Eigen::VectorXd> fm(factors.data(), static_cast<Eigen::Index>(factors.size()));
      na->accumulate_expr(o->grad.array().colwise() * fm.array());
    };
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

inline Var relu(const Var& a) {
  Var out = detail::make(a.value().cwiseMax(0.0), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na] { na->accumulate_expr((na->value.array() > 0.0).cast<double>() * o->grad.array()); };
  }
  return out;
}

// tanh approximation of GELU.
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;

inline Var gelu(const Var& a) {
  constexpr double k = kGeluScale;
  constexpr double c = kGeluCubic;
  const auto& x = a.value();
  Matrix th = (k * (x.array() + c * x.array().cube())).tanh();
  Matrix v = 0.5 * x.array() * (1.0 + th.array());
  Var out = detail::make(std::move(v), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, th = std::move(th)] {
      const auto& xx = na->value.array();
      auto dth = (1.0 - th.array().square()) * kGeluScale * (1.0 + 3.0 * kGeluCubic * xx.square());
      na->accumulate_expr(o->grad.array() * (0.5 * (1.0 + th.array()) + 0.5 * xx * dth));
    };
  }
  return out;
}

inline Var silu(const Var& a) {
  Matrix sig = (1.0 + (-a.value().array()).exp()).inverse();
  Matrix v = a.value().array() * sig.array();
  Var out = detail::make(std::move(v), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, sig = std::move(sig)] {
      na->accumulate_expr(o->grad.array() * (sig.array() * (1.0 + na->value.array() * (1.0 - sig.array()))));
    };
  }
  return out;
}

inline double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline Var softplus(const Var& a) {
  Matrix v = a.value().unaryExpr([](double x) { return softplus_scalar(x); });
  Var out = detail::make(std::move(v), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na] {
      na->accumulate_expr(o->grad.array() * (1.0 + (-na->value.array()).exp()).inverse());
    };
  }
  return out;
}

// Inverted dropout; identity when p == 0.
inline Var dropout(const Var& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  Matrix keep(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - p);
  // Four 16-bit uniforms per generator call.
  const auto threshold = static_cast<std::uint64_t>(p * 65536.0);
  std::uint64_t bits = 0;
  for (Eigen::Index i = 0; i < keep.size(); ++i) {
    if (i % 4 == 0) bits = rng();
    keep.data()[i] = (bits & 0xffff) < threshold ? 0.0 : s;
    bits >>= 16;
  }
  Var out = detail::make(a.value().cwiseProduct(keep), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, keep = std::move(keep)] { na->accumulate_expr(o->grad.cwiseProduct(keep)); };
  }
  return out;
}

// ---------------------------------------------------------------- normalization

// Row-wise layer normalization without affine parameters.
inline Var layer_norm(const Var& a, double eps = 1e-5) {
  const Matrix& x = a.value();
  const Eigen::Index n = x.rows(), m = x.cols();
  Matrix y(n, m);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Var out = detail::make(y, {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, inv_std] {
      const Matrix& yy = o->value;
      const Matrix& g = o->grad;
      Matrix gx(yy.rows(), yy.cols());
      for (Eigen::Index r = 0; r < yy.rows(); ++r) {
        const double gm = g.row(r).mean();
        const double gym = g.row(r).dot(yy.row(r)) / static_cast<double>(yy.cols());
        gx.row(r) = inv_std(r) * (g.row(r).array() - gm - yy.row(r).array() * gym);
      }
      na->accumulate(gx);
    };
  }
  return out;
}

// Row-wise softmax.
inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    p.row(r) = (x.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

inline Var softmax_rows(const Var& a) {
  Var out = detail::make(softmax_rows_value(a.value()), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na] {
      const Matrix& p = o->value;
      Eigen::VectorXd dot = (o->grad.cwiseProduct(p)).rowwise().sum();
      na->accumulate_expr(p.cwiseProduct((o->grad.colwise() - dot)));
    };
  }
  return out;
}

// ---------------------------------------------------------------- shape ops

inline Var concat_cols(const std::vector<Var>& parts) {
  Eigen::Index rows = parts.front().rows(), cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "concat_cols");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  Var out = detail::make(std::move(v), parts);
  if (out.requires_grad()) {
    Node* o = out.get();
    std::vector<Node*> ns;
    for (const auto& p : parts) ns.push_back(p.get());
    o->backward = [o, ns, offsets] {
      for (std::size_t i = 0; i < ns.size(); ++i)
        if (ns[i]->requires_grad) ns[i]->accumulate_expr(o->grad.middleCols(offsets[i], ns[i]->value.cols()));
    };
  }
  return out;
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index len) {
  detail::check(start >= 0 && start + len <= a.cols(), "slice_cols");
  Var out = detail::make(a.value().middleCols(start, len), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, start, len] {
      Matrix g = Matrix::Zero(na->value.rows(), na->value.cols());
      g.middleCols(start, len) = o->grad;
      na->accumulate(g);
    };
  }
  return out;
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index len) {
  detail::check(start >= 0 && start + len <= a.rows(), "slice_rows");
  Var out = detail::make(a.value().middleRows(start, len), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, start, len] {
      Matrix g = Matrix::Zero(na->value.rows(), na->value.cols());
      g.middleRows(start, len) = o->grad;
      na->accumulate(g);
    };
  }
  return out;
}

// Row lookup. Negative indices yield zero rows and receive no gradient.
inline Var gather_rows(const Var& table, const std::vector<int>& idx) {
  const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
  Matrix v = Matrix::Zero(n, table.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const int i = idx[static_cast<std::size_t>(r)];
    if (i >= 0) {
      detail::check(i < table.rows(), "gather_rows index");
      v.row(r) = table.value().row(i);
    }
  }
  Var out = detail::make(std::move(v), {table});
  if (out.requires_grad()) {
    Node *o = out.get(), *nt = table.get();
    o->backward = [o, nt, idx] {
      Matrix g = Matrix::Zero(nt->value.rows(), nt->value.cols());
      for (std::size_t r = 0; r < idx.size(); ++r)
        if (idx[r] >= 0) g.row(idx[r]) += o->grad.row(static_cast<Eigen::Index>(r));
      nt->accumulate(g);
    };
  }
  return out;
}

// Inverse of gather_rows: out.row(idx[i]) = a.row(i); other rows are zero.
inline Var scatter_rows(const Var& a, const std::vector<int>& idx, Eigen::Index n_out) {
  detail::check(static_cast<Eigen::Index>(idx.size()) == a.rows(), "scatter_rows");
  Matrix v = Matrix::Zero(n_out, a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) v.row(idx[r]) += a.value().row(static_cast<Eigen::Index>(r));
  Var out = detail::make(std::move(v), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na, idx] {
      Matrix g(static_cast<Eigen::Index>(idx.size()), na->value.cols());
      for (std::size_t r = 0; r < idx.size(); ++r) g.row(static_cast<Eigen::Index>(r)) = o->grad.row(idx[r]);
      na->accumulate(g);
    };
  }
  return out;
}

inline Var sum_all(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  Var out = detail::make(std::move(v), {a});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get();
    o->backward = [o, na] {
      na->accumulate_expr(Matrix::Constant(na->value.rows(), na->value.cols(), o->grad(0, 0)));
    };
  }
  return out;
}

inline Var add_all(const std::vector<Var>& parts) {
  Var acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

// ---------------------------------------------------------------- losses

// Mean over rows of -log softmax(logits)[target].
inline Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  detail::check(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "cross_entropy");
  const Matrix& x = logits.value();
  Matrix p(x.rows(), x.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    p.row(r) = (x.row(r).array() - mx).exp();
    const double z = p.row(r).sum();
    p.row(r) /= z;
    total += -(x(r, targets[static_cast<std::size_t>(r)]) - mx - std::log(z));
  }
  const double n = static_cast<double>(x.rows());
  Matrix v(1, 1);
  v(0, 0) = total / n;
  Var out = detail::make(std::move(v), {logits});
  if (out.requires_grad()) {
    Node *o = out.get(), *nl = logits.get();
    o->backward = [o, nl, p = std::move(p), targets, n] {
      Matrix g = p;
      for (std::size_t r = 0; r < targets.size(); ++r) g(static_cast<Eigen::Index>(r), targets[r]) -= 1.0;
      nl->accumulate_expr(g * (o->grad(0, 0) / n));
    };
  }
  return out;
}

// Mean over all elements of (a - b)^2.
inline Var mse(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mse");
  Matrix diff = a.value() - b.value();
  const double n = static_cast<double>(diff.size());
  Matrix v(1, 1);
  v(0, 0) = diff.squaredNorm() / n;
  Var out = detail::make(std::move(v), {a, b});
  if (out.requires_grad()) {
    Node *o = out.get(), *na = a.get(), *nb = b.get();
    o->backward = [o, na, nb, diff = std::move(diff), n] {
      const double s = 2.0 * o->grad(0, 0) / n;
      if (na->requires_grad) na->accumulate_expr(diff * s);
      if (nb->requires_grad) nb->accumulate_expr(diff * -s);
    };
  }
  return out;
}

}  // namespace fatsmb::ag
