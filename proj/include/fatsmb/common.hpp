#pragma once

#include <climits>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace fatsmb {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error hierarchy. Every failure surfaced to callers derives from Error so the
// CLI can map it to a diagnostic and a nonzero exit status.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_number(line) {}
  std::size_t line_number;
};
struct ValidationError : Error {
  using Error::Error;
};
struct EmptyDatasetError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct LoadError : Error {
  using Error::Error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent generator streams from a
// root seed and a list of stream labels.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) { return mix64(mix64(seed) ^ a); }
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix64(derive_seed(seed, a) ^ mix64(b + 0x632be59bd9b4e019ULL));
}

// Stream labels. Each randomness consumer draws from its own stream so that
// changing one stage's configuration never perturbs another stage.
enum class Stream : std::uint64_t {
  data = 1,
  init_mbae = 2,
  stage1 = 3,
  init_denoiser = 4,
  stage2 = 5,
  stage3 = 6,
  inference = 7,
  few_shot = 8,
  grad_check = 9,
};

inline Rng make_rng(std::uint64_t seed, Stream s) { return Rng(derive_seed(seed, static_cast<std::uint64_t>(s))); }
inline Rng make_rng(std::uint64_t seed, Stream s, std::uint64_t sub) {
  return Rng(derive_seed(seed, static_cast<std::uint64_t>(s), sub));
}

// Uniform double in [0, 1) from the top 53 bits; independent of the standard
// library's distribution implementation.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  // Lemire-style rejection keeps the draw unbiased and portable.
  const std::uint64_t range = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % range);
}

// Box-Muller; portable across standard library implementations so checkpoints
// are byte-identical wherever the code is built.
inline double standard_normal(Rng& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
}

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * standard_normal(rng);
  return m;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace fatsmb
