#include <gtest/gtest.h>

#include <sstream>

#include "fatsmb/data.hpp"

using namespace fatsmb;
using namespace fatsmb::data;

namespace {

Grouped parse(const std::string& text, Vocab v) {
  std::istringstream in(text);
  return group_interactions(parse_interactions(in), v);
}

std::vector<int> items_of(const UserHistory& u) {
  std::vector<int> out;
  for (const auto& x : u.events) out.push_back(static_cast<int>(x.item));
  return out;
}

}  // namespace

TEST(Load, GroupsAndOrdersByTimestamp) {
  const auto g = parse("0\t7\t0\t11\n0\t5\t1\t10\n", {10, 2});
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(items_of(g[0]), (std::vector<int>{5, 7}));
}

TEST(Load, EqualTimestampsKeepFileOrder) {
  const auto g = parse("0\t3\t0\t5\n0\t1\t0\t5\n0\t2\t0\t5\n", {10, 2});
  EXPECT_EQ(items_of(g[0]), (std::vector<int>{3, 1, 2}));
}

TEST(Load, OutOfRangeItemIsRejected) {
  EXPECT_THROW(parse("0\t999\t0\t1\n", {10, 2}), ValidationError);
  EXPECT_THROW(parse("0\t1\t5\t1\n", {10, 2}), ValidationError);
}

TEST(Load, MalformedLinesReportLineNumbers) {
  std::istringstream in("0\t1\t0\t1\n0\tx\t0\t2\n");
  try {
    parse_interactions(in);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
  std::istringstream three("0\t1\t0\n");
  EXPECT_THROW(parse_interactions(three), ParseError);
}

TEST(Load, EmptyInputIsAnError) { EXPECT_THROW(parse("", {10, 2}), EmptyDatasetError); }

TEST(Load, WriteParseRoundTrip) {
  const auto g = parse("1\t4\t1\t3\n0\t2\t0\t1\n1\t5\t0\t9\n", {10, 2});
  std::ostringstream out;
  write_interactions(out, g);
  std::istringstream in(out.str());
  EXPECT_EQ(flatten(group_interactions(parse_interactions(in), {10, 2})), flatten(g));
}

TEST(Vocab, ReservedTokensFollowBothVocabularies) {
  Vocab v{10, 4};
  EXPECT_EQ(v.pad_token(), 10);
  EXPECT_EQ(v.mask_token(), 11);
  Vocab w{3, 5};
  EXPECT_EQ(w.pad_token(), 5);
  EXPECT_EQ(w.item_row(w.pad_token()), 3);
  EXPECT_EQ(w.item_row(w.mask_token()), 4);
  EXPECT_EQ(w.behavior_row(w.mask_token()), 6);
  EXPECT_THROW(w.item_row(4), Error);
}

TEST(Sequences, ShortHistoryIsLeftPadded) {
  Vocab v{20, 2};
  auto s = make_sequence(0, {1, 2, 3}, {0, 1, 0}, 5, v);
  EXPECT_EQ(s.items, (std::vector<int>{v.pad_token(), v.pad_token(), 1, 2, 3}));
  EXPECT_EQ(s.behaviors, (std::vector<int>{v.pad_token(), v.pad_token(), 0, 1, 0}));
  EXPECT_EQ(s.first_real(), 2);
}

TEST(Sequences, LongHistoryKeepsMostRecent) {
  Vocab v{100, 2};
  std::vector<int> items, beh;
  for (int i = 0; i < 60; ++i) {
    items.push_back(i);
    beh.push_back(i % 2);
  }
  auto s = make_sequence(0, items, beh, 50, v);
  ASSERT_EQ(s.length(), 50);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(s.items[static_cast<std::size_t>(i)], i + 10);
  EXPECT_EQ(s.length_real, 50);
}

TEST(Cloze, RhoOneMasksEveryRealPosition) {
  Vocab v{20, 3};
  Rng rng(1);
  auto b = cloze_mask({make_sequence(0, {1, 2, 3}, {0, 1, 2}, 6, v)}, 1.0, 0.0, v, rng);
  EXPECT_EQ(b.masked_positions[0], (std::vector<int>{3, 4, 5}));
  EXPECT_EQ(b.target_items[0], (std::vector<int>{1, 2, 3}));
  for (int i = 3; i < 6; ++i) EXPECT_EQ(b.sequences[0].items[static_cast<std::size_t>(i)], v.mask_token());
  EXPECT_EQ(b.sequences[0].items[0], v.pad_token());
  EXPECT_EQ(b.sequences[0].behaviors[3], 0);
}

TEST(Cloze, RhoZeroForcesExactlyOneMask) {
  Vocab v{20, 3};
  Rng rng(2);
  std::vector<Sequence> seqs;
  for (int u = 0; u < 50; ++u) seqs.push_back(make_sequence(u, {1, 2, 3, 4}, {0, 1, 2, 0}, 8, v));
  auto b = cloze_mask(seqs, 0.0, 0.0, v, rng);
  for (const auto& m : b.masked_positions) {
    ASSERT_EQ(m.size(), 1u);
    EXPECT_GE(m[0], 4);
  }
}

TEST(Cloze, SigmaOneMasksBehaviorsToo) {
  Vocab v{20, 3};
  Rng rng(3);
  auto b = cloze_mask({make_sequence(0, {1, 2, 3, 4, 5}, {0, 1, 2, 0, 1}, 5, v)}, 0.6, 1.0, v, rng);
  for (int i : b.masked_positions[0]) EXPECT_EQ(b.sequences[0].behaviors[static_cast<std::size_t>(i)], v.mask_token());
}

TEST(Split, DropsLastAndAppendsQuerySlot) {
  Vocab v{20, 3};
  auto s = make_sequence(4, {3, 8, 2}, {0, 1, 2}, 5, v);
  auto r = next_item_split({s}, v);
  ASSERT_EQ(r.examples.size(), 1u);
  const auto& ex = r.examples[0];
  EXPECT_EQ(ex.target_item, 2);
  EXPECT_EQ(ex.target_behavior, 2);
  EXPECT_EQ(ex.prefix.items, (std::vector<int>{v.pad_token(), v.pad_token(), 3, 8, v.mask_token()}));
  EXPECT_EQ(ex.prefix.behaviors[4], v.mask_token());
}

TEST(Split, SingleInteractionUsersAreSkipped) {
  Vocab v{20, 3};
  auto r = next_item_split({make_sequence(0, {1}, {0}, 4, v)}, v);
  EXPECT_TRUE(r.examples.empty());
  EXPECT_EQ(r.skipped, 1u);
}

TEST(Split, OneTriplePerEligibleUser) {
  Vocab v{50, 2};
  std::vector<Sequence> seqs;
  for (int u = 0; u < 1000; ++u) seqs.push_back(make_sequence(u, {u % 50, (u + 1) % 50}, {0, 1}, 10, v));
  EXPECT_EQ(next_item_split(seqs, v).examples.size(), 1000u);
}

TEST(Holdout, LastEventIsHeldOut) {
  const auto g = parse("0\t1\t0\t1\n0\t2\t0\t2\n1\t3\t1\t1\n", {10, 2});
  const auto [train, test] = holdout_last(g);
  ASSERT_EQ(train.size(), 1u);
  EXPECT_EQ(items_of(train[0]), (std::vector<int>{1}));
  EXPECT_EQ(items_of(test[0]), (std::vector<int>{2}));
}

TEST(Synthetic, DeterministicAndPure) {
  SyntheticSpec spec;
  const auto a = gen_synthetic(spec), b = gen_synthetic(spec);
  std::ostringstream sa, sb, ma, mb;
  write_interactions(sa, a.interactions);
  write_interactions(sb, b.interactions);
  write_manifest(ma, a.manifest);
  write_manifest(mb, b.manifest);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(ma.str(), mb.str());
  EXPECT_EQ(manifest_purity(a.interactions, a.manifest), 1.0);
  EXPECT_EQ(a.interactions.size(), 500u);
}

TEST(Synthetic, ManifestRoundTrip) {
  SyntheticSpec spec;
  spec.num_users = 20;
  const auto ds = gen_synthetic(spec);
  std::ostringstream out;
  write_manifest(out, ds.manifest);
  std::istringstream in(out.str());
  const auto m = read_manifest(in);
  EXPECT_EQ(m.user_archetype, ds.manifest.user_archetype);
  EXPECT_EQ(m.clusters, ds.manifest.clusters);
  EXPECT_EQ(m.spec.behavior_frequencies, ds.manifest.spec.behavior_frequencies);
}

TEST(Synthetic, BehaviorFrequenciesMatchSpec) {
  SyntheticSpec spec;
  spec.num_users = 5000;
  spec.min_len = 20;
  spec.max_len = 20;
  spec.behavior_frequencies = {0.7, 0.1, 0.1, 0.1};
  const auto ds = gen_synthetic(spec);
  std::vector<double> counts(4, 0.0);
  double total = 0;
  for (const auto& u : ds.interactions)
    for (const auto& x : u.events) {
      counts[x.behavior] += 1;
      total += 1;
    }
  ASSERT_EQ(total, 1e5);
  for (int b = 0; b < 4; ++b) EXPECT_NEAR(counts[static_cast<std::size_t>(b)] / total, spec.behavior_frequencies[static_cast<std::size_t>(b)], 0.01);
}

TEST(Synthetic, InfeasibleClustersAreRejected) {
  SyntheticSpec spec;
  spec.num_items = 100;  // 5 archetypes x 4 behaviors x 10 > 100
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
}
