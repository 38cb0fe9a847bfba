#pragma once

// Noise-prediction networks for the latent diffusion model.
//
//   mcgln  stacked blocks: concatenated-condition branch plus a hard-routed
//          shared/private mixture of experts, both under adaptive layer-norm
//          modulation produced from timestep + behavior embeddings
//   adaln  the same blocks with the mixture replaced by one feed-forward net
//   mlp    a plain perceptron over [z_t; z_agnostic; e_t; e_b]
//
// Every variant ends in a zero-initialized linear head, so a fresh denoiser
// predicts eps_hat = 0 for any input.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fatsmb/nn.hpp"

namespace fatsmb::denoise {

using ag::Var;
using Behaviors = std::vector<std::optional<int>>;  // nullopt = null condition

enum class DenoiserKind { mcgln, adaln, mlp };

inline std::string to_string(DenoiserKind k) {
  switch (k) {
    case DenoiserKind::mcgln: return "MCGLN";
    case DenoiserKind::adaln: return "AdaLN";
    case DenoiserKind::mlp: return "MLP";
  }
  return "?";
}

inline DenoiserKind parse_denoiser_kind(const std::string& s) {
  if (s == "MCGLN" || s == "mcgln") return DenoiserKind::mcgln;
  if (s == "AdaLN" || s == "adaln") return DenoiserKind::adaln;
  if (s == "MLP" || s == "mlp") return DenoiserKind::mlp;
  throw ConfigError("unknown denoiser kind '" + s + "' (expected MCGLN, AdaLN or MLP)");
}

struct DenoiserConfig {
  int d = 64;
  int depth = 2;
  int shared_experts = 1;
  int private_experts = 1;
  int expert_hidden = 128;
  int num_behaviors = 4;
  DenoiserKind kind = DenoiserKind::mcgln;

  void validate() const {
    if (d <= 0 || d % 2 != 0) throw ConfigError("denoiser: d must be positive and even");
    if (depth < 1) throw ConfigError("denoiser: depth must be at least 1");
    if (shared_experts < 1) throw ConfigError("denoiser: at least one shared expert required");
    if (private_experts < 0) throw ConfigError("denoiser: private expert count must be non-negative");
    if (num_behaviors < 1) throw ConfigError("denoiser: num_behaviors must be positive");
  }
};

// Raw sinusoidal timestep features, interleaved (sin, cos) pairs at geometric
// frequencies 10000^(-2j/d).
inline Matrix sinusoidal_features(const std::vector<int>& t, int d) {
  Matrix f(static_cast<Eigen::Index>(t.size()), d);
  for (std::size_t r = 0; r < t.size(); ++r)
    for (int j = 0; j < d / 2; ++j) {
      const double a = t[r] * std::pow(10000.0, -2.0 * j / d);
      f(static_cast<Eigen::Index>(r), 2 * j) = std::sin(a);
      f(static_cast<Eigen::Index>(r), 2 * j + 1) = std::cos(a);
    }
  return f;
}

// Softmax gate weights over the given logits, rows are probability vectors.
inline Matrix gate(const Matrix& x, const Matrix& w_gate) {
  return ag::softmax_rows_value(x * w_gate.transpose());
}

// Modulation vectors in order: alpha_s, beta_s, gamma_s, alpha_m, beta_m, gamma_m.
struct Modulation {
  std::array<Var, 6> v;
  const Var& alpha_s() const { return v[0]; }
  const Var& beta_s() const { return v[1]; }
  const Var& gamma_s() const { return v[2]; }
  const Var& alpha_m() const { return v[3]; }
  const Var& beta_m() const { return v[4]; }
  const Var& gamma_m() const { return v[5]; }
};

struct Block {
  nn::Linear cond_in;    // 2d -> d over LN([x; z_agnostic])
  nn::Linear cond_out;   // d -> d
  Var gate_weight;       // (m_s + m_p) x d
  std::vector<nn::FeedForward> shared;
  std::vector<std::vector<nn::FeedForward>> priv;  // [behavior][expert]
  nn::FeedForward single;                          // AdaLN replacement for the mixture
  nn::FeedForward modulation;                      // d -> 6d, zero-initialized output layer

  void collect(const std::string& prefix, nn::ParamList& out) const {
    cond_in.collect(prefix + ".cond_in", out);
    cond_out.collect(prefix + ".cond_out", out);
    if (gate_weight) out.push_back({prefix + ".gate", gate_weight});
    for (std::size_t i = 0; i < shared.size(); ++i) shared[i].collect(prefix + ".shared" + std::to_string(i), out);
    for (std::size_t b = 0; b < priv.size(); ++b)
      for (std::size_t i = 0; i < priv[b].size(); ++i)
        priv[b][i].collect(prefix + ".private" + std::to_string(b) + "_" + std::to_string(i), out);
    if (single.first.weight) single.collect(prefix + ".single", out);
    modulation.collect(prefix + ".modulation", out);
  }
};

namespace detail {

inline Var modulate(const Var& x, const Var& shift, const Var& scale) {
  return ag::add(ag::mul(x, ag::add_scalar(scale, 1.0)), shift);
}

// Groups row indices by behavior; key -1 is the null condition.
inline std::map<int, std::vector<int>> group_rows(const Behaviors& b) {
  std::map<int, std::vector<int>> g;
  for (std::size_t r = 0; r < b.size(); ++r) g[b[r] ? *b[r] : -1].push_back(static_cast<int>(r));
  return g;
}

}  // namespace detail

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d;
    time_embed_ = nn::FeedForward(d, d, d, rng, nn::Activation::silu);
    behavior_table_ = nn::make_param(normal_matrix(cfg_.num_behaviors + 1, d, 0.1, rng));
    if (cfg_.kind == DenoiserKind::mlp) {
      mlp_in_ = nn::Linear(4 * d, cfg_.expert_hidden, rng);
      for (int i = 1; i < cfg_.depth; ++i) mlp_hidden_.emplace_back(cfg_.expert_hidden, cfg_.expert_hidden, rng);
      head_ = nn::Linear(cfg_.expert_hidden, d, rng, /*zero_init=*/true);
      return;
    }
    for (int i = 0; i < cfg_.depth; ++i) {
      Block blk;
      blk.cond_in = nn::Linear(2 * d, d, rng);
      blk.cond_out = nn::Linear(d, d, rng);
      if (cfg_.kind == DenoiserKind::mcgln) {
        const int m = cfg_.shared_experts + cfg_.private_experts;
        blk.gate_weight = nn::make_param(normal_matrix(m, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        for (int s = 0; s < cfg_.shared_experts; ++s) blk.shared.emplace_back(d, cfg_.expert_hidden, d, rng);
        blk.priv.resize(static_cast<std::size_t>(cfg_.num_behaviors));
        for (auto& group : blk.priv)
          for (int p = 0; p < cfg_.private_experts; ++p) group.emplace_back(d, cfg_.expert_hidden, d, rng);
      } else {
        blk.single = nn::FeedForward(d, cfg_.expert_hidden, d, rng);
      }
      blk.modulation = nn::FeedForward(d, d, 6 * d, rng, nn::Activation::silu, /*zero_init_output=*/true);
      blocks_.push_back(std::move(blk));
    }
    head_ = nn::Linear(d, d, rng, /*zero_init=*/true);
  }

  const DenoiserConfig& config() const { return cfg_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  nn::Linear& head() { return head_; }
  Var behavior_table() const { return behavior_table_; }

  nn::ParamList params() const {
    nn::ParamList out;
    time_embed_.collect("denoiser.time_embed", out);
    out.push_back({"denoiser.behavior_table", behavior_table_});
    if (cfg_.kind == DenoiserKind::mlp) {
      mlp_in_.collect("denoiser.mlp_in", out);
      for (std::size_t i = 0; i < mlp_hidden_.size(); ++i) mlp_hidden_[i].collect("denoiser.mlp_hidden" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("denoiser.block" + std::to_string(i), out);
    head_.collect("denoiser.head", out);
    return out;
  }

  // e_t for each row's timestep.
  Var timestep_embed(const std::vector<int>& t) const {
    return time_embed_(ag::constant(sinusoidal_features(t, cfg_.d)));
  }

  // Behavior condition rows; the null condition reads the dedicated last row.
  Var behavior_embed(const Behaviors& b) const {
    std::vector<int> rows;
    for (const auto& x : b) {
      if (x && (*x < 0 || *x >= cfg_.num_behaviors)) throw UsageError("behavior id out of range: " + std::to_string(*x));
      rows.push_back(x ? *x : cfg_.num_behaviors);
    }
    return ag::gather_rows(behavior_table_, rows);
  }

  Modulation modulation(const Block& blk, const Var& condition) const {
    Var all = blk.modulation(condition);
    Modulation m;
    for (int i = 0; i < 6; ++i) m.v[static_cast<std::size_t>(i)] = ag::slice_cols(all, i * cfg_.d, cfg_.d);
    return m;
  }

  // Hard-routed mixture: rows with behavior b mix the shared experts and the
  // private experts of b; null rows mix shared experts only, with the gate
  // renormalized over the shared logits.
  Var moe(const Block& blk, const Var& x, const Behaviors& b) const {
    const int ms = cfg_.shared_experts;
    std::vector<Var> parts;
    for (const auto& [key, rows] : detail::group_rows(b)) {
      Var xg = ag::gather_rows(x, rows);
      Var logits = ag::matmul_nt(xg, blk.gate_weight);
      std::vector<const nn::FeedForward*> experts;
      for (const auto& e : blk.shared) experts.push_back(&e);
      if (key >= 0) {
        for (const auto& e : blk.priv[static_cast<std::size_t>(key)]) experts.push_back(&e);
      } else {
        logits = ag::slice_cols(logits, 0, ms);
      }
      Var w = ag::softmax_rows(logits);
      std::vector<Var> terms;
      for (std::size_t k = 0; k < experts.size(); ++k)
        terms.push_back(ag::mul_col((*experts[k])(xg), ag::slice_cols(w, static_cast<Eigen::Index>(k), 1)));
      parts.push_back(ag::scatter_rows(ag::add_all(terms), rows, x.rows()));
    }
    return ag::add_all(parts);
  }

  Var block_forward(const Block& blk, const Var& x, const Var& z_agnostic, const Var& condition, const Behaviors& b) const {
    const Modulation m = modulation(blk, condition);
    Var u = blk.cond_in(ag::layer_norm(ag::concat_cols({x, z_agnostic})));
    Var branch = blk.cond_out(ag::gelu(detail::modulate(u, m.beta_s(), m.gamma_s())));
    Var xh = ag::add(x, ag::mul(m.alpha_s(), branch));
    Var inner = detail::modulate(ag::layer_norm(xh), m.beta_m(), m.gamma_m());
    Var mix = cfg_.kind == DenoiserKind::mcgln ? moe(blk, inner, b) : blk.single(inner);
    return ag::add(xh, ag::mul(m.alpha_m(), mix));
  }

  // eps_hat, n x d. t is per row.
  Var forward(const Var& z_t, const std::vector<int>& t, const Var& z_agnostic, const Behaviors& b) const {
    if (static_cast<Eigen::Index>(t.size()) != z_t.rows() || static_cast<Eigen::Index>(b.size()) != z_t.rows())
      throw UsageError("denoiser: per-row timestep and behavior required");
    Var e_t = timestep_embed(t);
    Var e_b = behavior_embed(b);
    if (cfg_.kind == DenoiserKind::mlp) {
      Var h = ag::gelu(mlp_in_(ag::concat_cols({z_t, z_agnostic, e_t, e_b})));
      for (const auto& l : mlp_hidden_) h = ag::gelu(l(h));
      return head_(h);
    }
    Var condition = ag::add(e_t, e_b);
    Var x = z_t;
    for (const auto& blk : blocks_) x = block_forward(blk, x, z_agnostic, condition, b);
    return head_(x);
  }

  Matrix predict(const Matrix& z_t, int t, const Matrix& z_agnostic, const Behaviors& b) const {
    std::vector<int> ts(static_cast<std::size_t>(z_t.rows()), t);
    return forward(ag::constant(z_t), ts, ag::constant(z_agnostic), b).value();
  }

 private:
  DenoiserConfig cfg_;
  nn::FeedForward time_embed_;
  Var behavior_table_;
  std::vector<Block> blocks_;
  nn::Linear mlp_in_;
  std::vector<nn::Linear> mlp_hidden_;
  nn::Linear head_;
};

}  // namespace fatsmb::denoise
