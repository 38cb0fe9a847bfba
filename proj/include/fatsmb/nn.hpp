#pragma once

#include <map>
#include <string>
#include <vector>

#include "fatsmb/autograd.hpp"

namespace fatsmb::nn {

using ag::Var;

struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

inline Var make_param(Matrix init) { return ag::leaf(std::move(init), true); }

inline void set_trainable(const ParamList& params, bool on) {
  for (const auto& p : params) p.var.ptr()->requires_grad = on;
}

inline void zero_grad(const ParamList& params) {
  for (const auto& p : params) p.var.ptr()->zero_grad();
}

inline std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

// FNV-1a over the raw bytes of every parameter, in list order.
inline std::uint64_t checksum(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.value().data());
    const auto n = static_cast<std::size_t>(p.var.value().size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
  }
  return h;
}

// y = x W + b, W stored (in x out).
struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool zero_init = false) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
    weight = make_param(zero_init ? Matrix::Zero(in, out) : normal_matrix(in, out, stddev, rng));
    bias = make_param(Matrix::Zero(1, out));
  }

  Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

enum class Activation { gelu, silu, relu };

inline Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::gelu: return ag::gelu(x);
    case Activation::silu: return ag::silu(x);
    case Activation::relu: return ag::relu(x);
  }
  return x;
}

// Two-layer perceptron in -> hidden -> out.
struct FeedForward {
  Linear first;
  Linear second;
  Activation act = Activation::gelu;

  FeedForward() = default;
  FeedForward(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng, Activation a = Activation::gelu,
              bool zero_init_output = false)
      : first(in, hidden, rng), second(hidden, out, rng, zero_init_output), act(a) {}

  Var operator()(const Var& x) const { return second(activate(first(x), act)); }

  void collect(const std::string& prefix, ParamList& out) const {
    first.collect(prefix + ".0", out);
    second.collect(prefix + ".1", out);
  }
};

// Layer normalization with learned gain and shift.
struct LayerNorm {
  Var gain;
  Var shift;

  LayerNorm() = default;
  explicit LayerNorm(Eigen::Index d) : gain(make_param(Matrix::Ones(1, d))), shift(make_param(Matrix::Zero(1, d))) {}

  Var operator()(const Var& x) const { return ag::add_row(ag::mul_row(ag::layer_norm(x), gain), shift); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".shift", shift});
  }
};

struct AdamWConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Only parameters that currently require
// gradients are touched; frozen parameters stay bit-identical.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(const ParamList& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& p : params) {
      ag::Node* n = p.var.get();
      if (!n->requires_grad || !n->has_grad) continue;
      auto& st = state_[p.name];
      if (st.m.size() == 0) {
        st.m = Matrix::Zero(n->value.rows(), n->value.cols());
        st.v = Matrix::Zero(n->value.rows(), n->value.cols());
      }
      if (cfg_.weight_decay > 0.0) n->value *= (1.0 - cfg_.learning_rate * cfg_.weight_decay);
      st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * n->grad;
      st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * n->grad.cwiseAbs2();
      n->value.array() -= cfg_.learning_rate * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + cfg_.eps);
    }
  }

  const AdamWConfig& config() const { return cfg_; }

 private:
  struct State {
    Matrix m, v;
  };
  AdamWConfig cfg_;
  std::map<std::string, State> state_;
  long t_ = 0;
};

}  // namespace fatsmb::nn
