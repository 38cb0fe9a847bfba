#include <gtest/gtest.h>

#include <cmath>

#include "fatsmb/attention.hpp"

using namespace fatsmb;
using namespace fatsmb::attn;

namespace {

Vector random_vector(Eigen::Index n, Rng& rng) { return normal_matrix(n, 1, 1.0, rng).col(0); }

Vector positive_scales(Eigen::Index n, Rng& rng) {
  Vector s(n);
  for (Eigen::Index i = 0; i < n; ++i) s(i) = 0.2 + 2.0 * uniform01(rng);
  return s;
}

}  // namespace

TEST(Rope, FrequenciesAreGeometric) {
  const auto theta = rope_frequencies(8, 10000.0);
  ASSERT_EQ(theta.size(), 4u);
  EXPECT_DOUBLE_EQ(theta[0], 1.0);
  EXPECT_NEAR(theta[1], std::pow(10000.0, -0.25), 1e-15);
  EXPECT_THROW(rope_frequencies(3), ConfigError);
}

TEST(Rope, ZeroPositionIsIdentity) {
  Rng rng(1);
  const Vector x = random_vector(8, rng);
  EXPECT_EQ(rope_transform(x, 0.0, rope_frequencies(8)), x);
}

TEST(Rope, UnitAngleRotation) {
  Vector x(2);
  x << 1.0, 0.0;
  const Vector y = rope_transform(x, 1.0, {1.0});
  EXPECT_NEAR(y(0), 0.54030, 1e-5);
  EXPECT_NEAR(y(1), 0.84147, 1e-5);
  EXPECT_DOUBLE_EQ(y(0), std::cos(1.0));
  EXPECT_DOUBLE_EQ(y(1), std::sin(1.0));
}

TEST(Rope, PreservesNorm) {
  Rng rng(2);
  const auto theta = rope_frequencies(16);
  for (int i = 0; i < 100; ++i) {
    const Vector x = random_vector(16, rng);
    const double m = 100.0 * uniform01(rng);
    EXPECT_NEAR(rope_transform(x, m, theta).norm(), x.norm(), 1e-12);
  }
}

TEST(Barope, UnitScalesReduceToRope) {
  Rng rng(3);
  const auto theta = rope_frequencies(8);
  const Vector x = random_vector(8, rng);
  EXPECT_EQ(barope_transform(x, Vector::Ones(4), 5.0, theta), rope_transform(x, 5.0, theta));
}

TEST(Barope, LogitIsShiftInvariant) {
  Rng rng(4);
  const auto theta = rope_frequencies(16);
  for (int i = 0; i < 500; ++i) {
    const Vector q = random_vector(16, rng), k = random_vector(16, rng);
    const Vector a = positive_scales(8, rng), b = positive_scales(8, rng);
    const double m = std::floor(50 * uniform01(rng)), n = std::floor(50 * uniform01(rng));
    const double s = std::floor(100 * uniform01(rng));
    const double base = barope_transform(q, a, m, theta).dot(barope_transform(k, b, n, theta));
    const double shifted = barope_transform(q, a, m + s, theta).dot(barope_transform(k, b, n + s, theta));
    EXPECT_NEAR(shifted, base, 1e-10 * std::max(1.0, std::abs(base)));
  }
}

TEST(Barope, ConstantScalesMultiplyLogitBySquare) {
  Rng rng(5);
  const auto theta = rope_frequencies(8);
  const Vector q = random_vector(8, rng), k = random_vector(8, rng);
  const double c = 1.7;
  const Vector s = Vector::Constant(4, c);
  const double rope = rope_transform(q, 3, theta).dot(rope_transform(k, 7, theta));
  const double ba = barope_transform(q, s, 3, theta).dot(barope_transform(k, s, 7, theta));
  EXPECT_NEAR(ba, c * c * rope, 1e-12);
}

TEST(Rotary, MatrixFormMatchesVectorForm) {
  Rng rng(6);
  const auto theta = rope_frequencies(4);
  const Matrix x = normal_matrix(3, 8, 1.0, rng);
  const std::vector<double> pos = {0, 2, 5};
  const Matrix y = rotary(ag::constant(x), pos, 2, theta).value();
  for (int r = 0; r < 3; ++r)
    for (int h = 0; h < 2; ++h) {
      const Vector xv = x.row(r).segment(4 * h, 4).transpose();
      const Vector expect = rope_transform(xv, pos[static_cast<std::size_t>(r)], theta);
      EXPECT_LT((y.row(r).segment(4 * h, 4).transpose() - expect).norm(), 1e-14);
    }
}

TEST(AttentionCore, RowsSumToOneOverRealKeys) {
  Rng rng(7);
  const int L = 6, heads = 2;
  const std::vector<int> starts = {2, 0};
  auto q = ag::constant(normal_matrix(2 * L, 8, 1.0, rng));
  auto k = ag::constant(normal_matrix(2 * L, 8, 1.0, rng));
  auto v = ag::constant(normal_matrix(2 * L, 8, 1.0, rng));
  AttentionTrace trace;
  attention_core(q, k, v, heads, L, starts, &trace);
  ASSERT_EQ(trace.probs.size(), 4u);
  for (std::size_t i = 0; i < trace.probs.size(); ++i) {
    const int st = starts[i / heads];
    for (int r = 0; r < L; ++r) {
      const double sum = trace.probs[i].row(r).sum();
      EXPECT_NEAR(sum, r < st ? 0.0 : 1.0, 1e-12);
      for (int c = 0; c < st; ++c) EXPECT_EQ(trace.probs[i](r, c), 0.0);
    }
  }
}

TEST(AttentionCore, SingletonAttendsToItself) {
  Rng rng(8);
  const int L = 4;
  const Matrix vv = normal_matrix(L, 4, 1.0, rng);
  auto out = attention_core(ag::constant(normal_matrix(L, 4, 1.0, rng)), ag::constant(normal_matrix(L, 4, 1.0, rng)),
                            ag::constant(vv), 1, L, {L - 1});
  EXPECT_EQ(out.value().row(L - 1), vv.row(L - 1));
  EXPECT_TRUE(out.value().topRows(L - 1).isZero(0.0));
}

TEST(AttentionCore, PadContentDoesNotLeak) {
  Rng rng(9);
  const int L = 5;
  Matrix q = normal_matrix(L, 4, 1.0, rng), k = normal_matrix(L, 4, 1.0, rng), v = normal_matrix(L, 4, 1.0, rng);
  const Matrix a = attention_core(ag::constant(q), ag::constant(k), ag::constant(v), 2, L, {2}).value();
  q.row(0).swap(q.row(1));
  k.row(0).setRandom();
  v.row(1).setRandom();
  const Matrix b = attention_core(ag::constant(q), ag::constant(k), ag::constant(v), 2, L, {2}).value();
  EXPECT_EQ(a.bottomRows(3), b.bottomRows(3));
}

TEST(AttentionCore, FullyPaddedSequenceIsRejected) {
  auto z = ag::constant(Matrix::Zero(3, 4));
  EXPECT_THROW(attention_core(z, z, z, 1, 3, {3}), NumericalError);
}
