#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fatsmb/mbae.hpp"

using namespace fatsmb;
using namespace fatsmb::mbae;
using data::make_sequence;
using data::Sequence;
using data::Vocab;

namespace {

const Vocab kVocab{12, 3};

ModelConfig small_config(PositionMode mode = PositionMode::barope) {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.layers = 2;
  c.ffn_hidden = 16;
  c.dropout = 0.0;
  c.position_mode = mode;
  c.max_len = 6;
  return c;
}

Mbae make_model(const ModelConfig& c, std::uint64_t seed = 1) {
  Rng rng(seed);
  return Mbae(c, kVocab, rng);
}

Sequence sample_seq() { return make_sequence(0, {3, 7, 1, 9}, {0, 2, 1, 0}, 6, kVocab); }

}  // namespace

TEST(Embed, AllPadSequenceIsZero) {
  auto m = make_model(small_config());
  Sequence s = make_sequence(0, {}, {}, 6, kVocab);
  EXPECT_TRUE(m.embed({s}).value().isZero(0.0));
}

TEST(Embed, AbsoluteModeSumsThreeTables) {
  auto m = make_model(small_config(PositionMode::ape));
  const auto params = m.params();
  auto table = [&](const std::string& n) {
    for (const auto& p : params)
      if (p.name == n) return p.var.value();
    throw std::runtime_error(n);
  };
  Sequence s = make_sequence(0, {5}, {2}, 6, kVocab);
  const Matrix e = m.embed({s}).value();
  const RowVector expect = table("encoder.item_table").row(5) + table("encoder.behavior_table").row(2) +
                           table("encoder.position_table").row(5);
  EXPECT_EQ(RowVector(e.row(5)), expect);
}

TEST(Embed, BehaviorInputCanBeDisabled) {
  auto c = small_config();
  c.include_behavior_in_input = false;
  auto m = make_model(c);
  const Matrix e = m.embed({sample_seq()}).value();
  EXPECT_EQ(RowVector(e.row(2)), RowVector(m.item_table().value().row(3)));
}

TEST(Encoder, UnitModulationMatchesRope) {
  auto ba = make_model(small_config(PositionMode::barope), 5);
  auto ro = make_model(small_config(PositionMode::rope), 5);
  ba.set_unit_modulation(true);
  EXPECT_EQ(ba.forward({sample_seq()}).value(), ro.forward({sample_seq()}).value());
  ba.set_unit_modulation(false);
  EXPECT_NE(ba.forward({sample_seq()}).value(), ro.forward({sample_seq()}).value());
}

TEST(Encoder, EvalModeIsDeterministicAndShaped) {
  auto c = small_config();
  c.dropout = 0.3;
  auto m = make_model(c);
  const Matrix a = m.forward({sample_seq()}).value(), b = m.forward({sample_seq()}).value();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.rows(), 6);
  EXPECT_EQ(a.cols(), 8);
  EXPECT_TRUE(a.topRows(2).isZero(0.0));
}

TEST(Encoder, TrainingModeNeedsRngWhenDropping) {
  auto c = small_config();
  c.dropout = 0.3;
  auto m = make_model(c);
  ForwardMode mode;
  mode.training = true;
  EXPECT_THROW(m.forward({sample_seq()}, mode), UsageError);
}

TEST(Encoder, MaskedBehaviorYieldsAgnosticLatent) {
  auto m = make_model(small_config());
  Sequence s = sample_seq();
  auto lp = m.encode(s, {5});
  ASSERT_TRUE(lp[0].behavior.has_value());
  EXPECT_EQ(*lp[0].behavior, 0);
  s.behaviors[5] = kVocab.mask_token();
  lp = m.encode(s, {5});
  EXPECT_TRUE(lp[0].agnostic());
  EXPECT_THROW(m.encode(s, {0}), UsageError);
}

TEST(Encoder, PadPermutationLeavesRealRowsUnchanged) {
  auto m = make_model(small_config());
  Sequence a = sample_seq(), b = a;
  b.items[0] = 4;  // pad slots are never read
  b.behaviors[1] = 1;
  EXPECT_EQ(m.forward({a}).value(), m.forward({b}).value());
}

TEST(Decoder, LogitsCoverTheCatalog) {
  auto m = make_model(small_config());
  auto lp = m.encode(sample_seq(), {5});
  EXPECT_EQ(m.decode(lp[0]).size(), kVocab.num_items);
}

TEST(Decoder, LogitsAreQueryDotItemEmbeddings) {
  auto m = make_model(small_config());
  Matrix items = m.item_table().value();
  items.topRows(3) = Matrix::Identity(3, 8);
  m.item_table().ptr()->value = items;
  const Matrix z = Matrix::Random(1, 8);
  const Matrix q = m.decoder_query(ag::constant(z)).value();
  const Matrix logits = m.decode(ag::constant(z)).value();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(logits(0, i), q(0, i), 1e-15);
}

TEST(Decoder, ScalingQueryPreservesRanking) {
  auto m = make_model(small_config());
  const Matrix z = Matrix::Random(2, 8);
  const Matrix before = m.decode(ag::constant(z)).value();
  auto& second = m.decoder_net().second;
  second.weight.ptr()->value *= 3.0;
  second.bias.ptr()->value *= 3.0;
  const Matrix after = m.decode(ag::constant(z)).value();
  for (int r = 0; r < 2; ++r) {
    Eigen::Index a, b;
    before.row(r).maxCoeff(&a);
    after.row(r).maxCoeff(&b);
    EXPECT_EQ(a, b);
    EXPECT_LT((after.row(r) - 3.0 * before.row(r)).norm(), 1e-12);
  }
}

TEST(Loss, UniformLogitsGiveLogOfCatalogSize) {
  auto loss = mbae_loss(ag::constant(Matrix::Zero(3, 8)), {0, 4, 7});
  EXPECT_NEAR(loss.value()(0, 0), std::log(8.0), 1e-14);
}

TEST(Loss, ConfidentTargetDrivesLossToZero) {
  Matrix x = Matrix::Zero(1, 8);
  x(0, 2) = 30.0;
  EXPECT_LT(mbae_loss(ag::constant(x), {2}).value()(0, 0), 1e-12);
}

TEST(Loss, BatchLossIsMean) {
  Matrix a = Matrix::Random(1, 5), b = Matrix::Random(1, 5), ab(2, 5);
  ab << a, b;
  const double la = mbae_loss(ag::constant(a), {1}).value()(0, 0);
  const double lb = mbae_loss(ag::constant(b), {3}).value()(0, 0);
  EXPECT_NEAR(mbae_loss(ag::constant(ab), {1, 3}).value()(0, 0), (la + lb) / 2, 1e-14);
}

TEST(Cloze, ForwardCountsMaskedTargets) {
  auto m = make_model(small_config());
  Rng rng(2);
  auto batch = data::cloze_mask({sample_seq(), sample_seq()}, 1.0, 0.0, kVocab, rng);
  auto r = cloze_forward(m, batch, {});
  EXPECT_EQ(r.count, 8u);
  EXPECT_EQ(r.logits.rows(), 8);
  EXPECT_LE(r.hits, r.count);
}

TEST(AttentionMap, RowsNormalizeOverRealColumns) {
  auto m = make_model(small_config());
  const Matrix a = m.attention_maps(sample_seq());
  for (int r = 2; r < 6; ++r) EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-6);
  EXPECT_TRUE(a.topRows(2).isZero(0.0));
  EXPECT_TRUE(a.leftCols(2).isZero(0.0));
}

TEST(AttentionMap, SingleHeadSingleLayerIsThatMatrix) {
  auto c = small_config();
  c.heads = 1;
  c.layers = 1;
  auto m = make_model(c);
  attn::AttentionTrace trace;
  ForwardMode mode;
  mode.traces = &trace;
  m.forward({sample_seq()}, mode);
  EXPECT_EQ(m.attention_maps(sample_seq()), trace.probs.at(0));
}

TEST(AttentionMap, GridRoundTrip) {
  auto m = make_model(small_config());
  const Matrix a = m.attention_maps(sample_seq());
  std::stringstream ss;
  write_attention_grid(ss, a);
  EXPECT_EQ(read_attention_grid(ss), a);
  const auto legend = attention_legend(sample_seq(), kVocab, {"click", "fav", "buy"});
  ASSERT_EQ(legend.size(), 6u);
  EXPECT_EQ(legend[0], "pad");
}

TEST(Config, RejectsOddHeadDimension) {
  auto c = small_config();
  c.heads = 4;  // d_k = 2 is fine
  EXPECT_NO_THROW(c.validate());
  c.d = 12;
  c.heads = 4;  // d_k = 3
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_position_mode("sinusoid"), ConfigError);
  EXPECT_EQ(parse_position_mode("BaRoPE"), PositionMode::barope);
}
