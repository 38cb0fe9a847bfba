#pragma once

// Noise schedule, closed-form forward noising, DDPM reference step, strided
// deterministic DDIM step, classifier-free guidance, and the guided sampler.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fatsmb/common.hpp"

namespace fatsmb::diffusion {

enum class ScheduleKind { linear };

// Index t runs 1..T; entry 0 of alpha_bar holds the convention alpha_bar_0 = 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // [0..T], beta[0] unused (0)
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product, alpha_bar[0] = 1
  std::vector<double> sigma;      // DDPM posterior std, sigma[1] = 0

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t)); }
  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t)); }
  double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
  double sigma_at(int t) const { return sigma.at(static_cast<std::size_t>(t)); }
};

struct GuidanceConfig {
  double omega = 1.0;
  double null_prob = 0.2;
  int stride = 20;

  void validate(int T) const {
    if (omega < 0.0) throw ConfigError("guidance: omega must be non-negative");
    if (null_prob < 0.0 || null_prob > 1.0) throw ConfigError("guidance: null_prob must lie in [0,1]");
    if (stride < 1 || stride > T) throw ConfigError("guidance: stride must lie in [1, T]");
    if (T % stride != 0) throw ConfigError("guidance: stride must divide T");
  }
};

inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02,
                                   ScheduleKind kind = ScheduleKind::linear) {
  if (T < 1) throw ConfigError("schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule: require 0 < beta_start <= beta_end < 1");
  (void)kind;
  NoiseSchedule s;
  s.T = T;
  const auto n = static_cast<std::size_t>(T) + 1;
  s.beta.assign(n, 0.0);
  s.alpha.assign(n, 1.0);
  s.alpha_bar.assign(n, 1.0);
  s.sigma.assign(n, 0.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
    s.sigma[i] = t == 1 ? 0.0 : std::sqrt((1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]) * s.beta[i]);
  }
  return s;
}

inline void check_t(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.T) throw UsageError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps. Works row-wise on matrices.
template <typename M>
M forward_sample(const M& z0, int t, const M& eps, const NoiseSchedule& s) {
  check_t(s, t);
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw UsageError("forward_sample: shape mismatch");
  const double ab = s.alpha_bar_at(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

// Same, with a per-row timestep.
inline Matrix forward_sample_rows(const Matrix& z0, const std::vector<int>& t, const Matrix& eps, const NoiseSchedule& s) {
  Matrix out(z0.rows(), z0.cols());
  for (Eigen::Index r = 0; r < z0.rows(); ++r) {
    const int tr = t[static_cast<std::size_t>(r)];
    check_t(s, tr);
    const double ab = s.alpha_bar_at(tr);
    out.row(r) = std::sqrt(ab) * z0.row(r) + std::sqrt(1.0 - ab) * eps.row(r);
  }
  return out;
}

// Ancestral DDPM step z_t -> z_{t-1}; `noise` is the fresh standard normal draw.
template <typename M>
M ddpm_step(const M& zt, int t, const M& eps_hat, const NoiseSchedule& s, const M& noise) {
  check_t(s, t);
  const double a = s.alpha_at(t);
  const double ab = s.alpha_bar_at(t);
  M mean = (zt - ((1.0 - a) / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(a);
  return mean + s.sigma_at(t) * noise;
}

// Deterministic DDIM jump t -> t_prev (0 <= t_prev < t).
template <typename M>
M ddim_step(const M& zt, int t, int t_prev, const M& eps_hat, const NoiseSchedule& s) {
  check_t(s, t);
  if (t_prev < 0 || t_prev >= t) throw UsageError("ddim_step: require 0 <= t_prev < t");
  const double ab = s.alpha_bar_at(t);
  const double ab_prev = s.alpha_bar_at(t_prev);
  return std::sqrt(ab_prev / ab) * (zt - std::sqrt(1.0 - ab) * eps_hat) + std::sqrt(1.0 - ab_prev) * eps_hat;
}

// (1 + omega) eps_cond - omega eps_uncond, written as eps_cond + omega (eps_cond -
// eps_uncond) so that equal branches cancel exactly.
template <typename M>
M cfg_combine(const M& eps_cond, const M& eps_uncond, double omega) {
  if (eps_cond.rows() != eps_uncond.rows() || eps_cond.cols() != eps_uncond.cols())
    throw UsageError("cfg_combine: shape mismatch");
  if (omega == 0.0) return eps_cond;
  return eps_cond + omega * (eps_cond - eps_uncond);
}

inline double cfg_combine(double eps_cond, double eps_uncond, double omega) {
  return eps_cond + omega * (eps_cond - eps_uncond);
}

// Strided grid T, T - stride, ..., stride, 0.
inline std::vector<int> strided_grid(int T, int stride) {
  if (stride < 1 || stride > T || T % stride != 0) throw ConfigError("stride must divide T");
  std::vector<int> g;
  for (int t = T; t >= 0; t -= stride) g.push_back(t);
  return g;
}

// eps_hat for a batch: (z_t, t, z_agnostic, behavior per row or nullopt for the
// null condition) -> n x d.
using Denoiser = std::function<Matrix(const Matrix& z_t, int t, const Matrix& z_agnostic,
                                      const std::vector<std::optional<int>>& behavior)>;

// Guided DDIM sampling from z_T down to z_0. The agnostic latent conditions
// both guidance branches; only the behavior is nulled in the second branch.
inline Matrix sample(const Matrix& z_T, const Matrix& z_agnostic, const std::vector<int>& behavior,
                     const Denoiser& denoiser, const NoiseSchedule& schedule, const GuidanceConfig& guidance) {
  guidance.validate(schedule.T);
  const auto grid = strided_grid(schedule.T, guidance.stride);
  std::vector<std::optional<int>> cond(behavior.begin(), behavior.end());
  std::vector<std::optional<int>> null(behavior.size());
  Matrix z = z_T;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const int t = grid[i], t_prev = grid[i + 1];
    Matrix eps = denoiser(z, t, z_agnostic, cond);
    if (guidance.omega != 0.0) eps = cfg_combine(eps, denoiser(z, t, z_agnostic, null), guidance.omega);
    z = ddim_step(z, t, t_prev, eps, schedule);
  }
  return z;
}

// Draws z_T ~ N(0, I) from rng, then samples.
inline Matrix sample(Eigen::Index rows, Eigen::Index d, const Matrix& z_agnostic, const std::vector<int>& behavior,
                     const Denoiser& denoiser, const NoiseSchedule& schedule, const GuidanceConfig& guidance, Rng& rng) {
  return sample(normal_matrix(rows, d, 1.0, rng), z_agnostic, behavior, denoiser, schedule, guidance);
}

}  // namespace fatsmb::diffusion
