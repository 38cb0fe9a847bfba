#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fatsmb/eval.hpp"

using namespace fatsmb;
using namespace fatsmb::eval;

namespace {

pipeline::PipelineConfig tiny_config() {
  pipeline::PipelineConfig c;
  c.seq_len = 8;
  c.model.d = 16;
  c.model.layers = 1;
  c.model.ffn_hidden = 32;
  c.denoiser.expert_hidden = 32;
  c.T = 20;
  c.guidance.stride = 5;
  c.train.batch_size = 32;
  c.train.stage1_epochs = 2;
  c.train.stage2_epochs = 2;
  c.train.stage3_epochs = 1;
  return c;
}

pipeline::Dataset tiny_dataset() {
  data::SyntheticSpec s;
  s.num_users = 60;
  s.num_items = 40;
  s.archetypes = 2;
  s.cluster_size = 4;
  s.min_len = 6;
  s.max_len = 12;
  const auto ds = data::gen_synthetic(s);
  return pipeline::prepare_dataset(ds.header, ds.interactions, 8);
}

data::Grouped behavior_history(int n_target, int n_other) {
  data::UserHistory u{0, {}};
  std::uint64_t ts = 0;
  for (int i = 0; i < n_target; ++i) u.events.push_back({0, 1, 2, ++ts, ts});
  for (int i = 0; i < n_other; ++i) u.events.push_back({0, 2, 0, ++ts, ts});
  return {u};
}

}  // namespace

TEST(Metrics, RecallAtK) {
  EXPECT_EQ(recall_at_k(1, 10), 1.0);
  EXPECT_EQ(recall_at_k(10, 10), 1.0);
  EXPECT_EQ(recall_at_k(11, 10), 0.0);
  EXPECT_EQ(recall_at_k(std::nullopt, 10), 0.0);
  EXPECT_EQ((recall_at_k(1, 10) + recall_at_k(50, 10)) / 2, 0.5);
}

TEST(Metrics, NdcgAtK) {
  EXPECT_EQ(ndcg_at_k(1, 10), 1.0);
  EXPECT_EQ(ndcg_at_k(3, 10), 0.5);
  EXPECT_EQ(ndcg_at_k(11, 10), 0.0);
  EXPECT_EQ(ndcg_at_k(std::nullopt, 10), 0.0);
}

TEST(Metrics, RankBreaksTiesByAscendingId) {
  RowVector v(5);
  v << 0.1, 0.9, 0.9, 0.3, 0.9;
  EXPECT_EQ(rank_of(v, 1), 1);
  EXPECT_EQ(rank_of(v, 2), 2);
  EXPECT_EQ(rank_of(v, 4), 3);
  EXPECT_EQ(rank_of(v, 0), 5);
}

TEST(FewShotDrop, ZeroRatioIsIdentity) {
  const auto g = behavior_history(20, 5);
  const auto out = few_shot_drop(g, 2, 0.0, 7);
  EXPECT_EQ(data::flatten(out), data::flatten(g));
}

TEST(FewShotDrop, FullRatioRemovesEveryTargetInteraction) {
  const auto out = few_shot_drop(behavior_history(20, 5), 2, 1.0, 7);
  EXPECT_EQ(count_behavior(out, 2), 0u);
  EXPECT_EQ(count_behavior(out, 0), 5u);
  EXPECT_TRUE(few_shot_drop(behavior_history(3, 0), 2, 1.0, 7).empty());
}

TEST(FewShotDrop, FloorRuleAndSeedDeterminism) {
  const auto g = behavior_history(101, 7);
  const auto a = few_shot_drop(g, 2, 0.5, 3), b = few_shot_drop(g, 2, 0.5, 3);
  EXPECT_EQ(count_behavior(a, 2), 51u);
  EXPECT_EQ(data::flatten(a), data::flatten(b));
  EXPECT_NE(data::flatten(a), data::flatten(few_shot_drop(g, 2, 0.5, 4)));
  EXPECT_EQ(count_behavior(few_shot_drop(behavior_history(10, 0), 2, 0.3, 1), 2), 7u);
  EXPECT_THROW(few_shot_drop(g, 2, 1.5, 1), ConfigError);
}

TEST(Sweep, AxisParsing) {
  EXPECT_EQ(parse_axis("omega"), SweepAxis::omega);
  EXPECT_EQ(parse_axis("dt"), SweepAxis::stride);
  EXPECT_THROW(parse_axis("lr"), ConfigError);
  EXPECT_THROW(with_axis(tiny_config(), SweepAxis::stride, 7), ConfigError);
  EXPECT_EQ(with_axis(tiny_config(), SweepAxis::T, 40).T, 40);
}

class Evaluated : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ds_ = new pipeline::Dataset(tiny_dataset());
    run_ = new pipeline::TrainedRun(pipeline::train_all(tiny_config(), *ds_));
  }
  static void TearDownTestSuite() {
    delete run_;
    delete ds_;
  }
  static pipeline::Dataset* ds_;
  static pipeline::TrainedRun* run_;
};
pipeline::Dataset* Evaluated::ds_ = nullptr;
pipeline::TrainedRun* Evaluated::run_ = nullptr;

TEST_F(Evaluated, PerBehaviorMeansAverageToOverall) {
  const auto r = evaluate(run_->stage3, ds_->test, {10, 20}, 1);
  for (int K : {10, 20}) {
    double weighted = 0;
    for (const auto& [b, m] : r.per_behavior) weighted += m.recall.at(K) * static_cast<double>(m.count);
    EXPECT_NEAR(weighted / static_cast<double>(r.test_size), r.recall(K), 1e-12);
  }
  EXPECT_EQ(r.ranks.size(), ds_->test.size());
  EXPECT_EQ(r.top_lists[0].size(), 20u);
}

TEST_F(Evaluated, DeterministicGivenSeed) {
  const auto a = evaluate(run_->stage3, ds_->test, {10}, 5), b = evaluate(run_->stage3, ds_->test, {10}, 5);
  EXPECT_EQ(a.to_key_values().to_string(), b.to_key_values().to_string());
  EXPECT_EQ(a.rankings(ds_->test), b.rankings(ds_->test));
}

TEST_F(Evaluated, ChunkingDoesNotChangeResults) {
  const auto a = evaluate(run_->stage3, ds_->test, {10}, 5, pipeline::ScoreMode::diffusion, 512);
  const auto b = evaluate(run_->stage3, ds_->test, {10}, 5, pipeline::ScoreMode::diffusion, 7);
  EXPECT_EQ(a.ranks, b.ranks);
}

TEST_F(Evaluated, BaselineScoresWithoutDiffusion) {
  const auto r = evaluate(run_->stage1, ds_->test, {10}, 5, pipeline::ScoreMode::agnostic);
  EXPECT_EQ(r.test_size, ds_->test.size());
  EXPECT_THROW(evaluate(run_->stage3, {}, {10}, 5), EmptyDatasetError);
  EXPECT_THROW(evaluate(run_->stage3, ds_->test, {0}, 5), UsageError);
}

TEST_F(Evaluated, TableAndKeyValues) {
  const auto r = evaluate(run_->stage3, ds_->test, {10, 20}, 5);
  const std::string t = r.table();
  EXPECT_NE(t.find("R@10"), std::string::npos);
  EXPECT_NE(t.find("all"), std::string::npos);
  EXPECT_DOUBLE_EQ(r.to_key_values().number("recall@20"), r.recall(20));
}

TEST(SweepRun, OmegaGridGivesOneRowPerValue) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_config();
  cfg.train.stage3_epochs = 0;
  std::ostringstream warn;
  const auto rows = sweep(SweepAxis::omega, {0, 1, 2, 5}, cfg, ds, 1, &warn, {10});
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) EXPECT_TRUE(r.report.has_value());
  const std::string svg = sweep_svg(SweepAxis::omega, rows);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
  EXPECT_NE(sweep_table(SweepAxis::omega, rows).find("recall@10"), std::string::npos);
}

TEST(SweepRun, InvalidValuesAreSkippedWithWarning) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_config();
  cfg.train.stage3_epochs = 0;
  std::ostringstream warn;
  const auto rows = sweep(SweepAxis::stride, {5, 7}, cfg, ds, 1, &warn, {10});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].report.has_value());
  EXPECT_FALSE(rows[1].report.has_value());
  EXPECT_NE(warn.str().find("skipping"), std::string::npos);
}

TEST(SweepRun, ReusedStagesMatchFreshTraining) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_config();
  const auto rows = sweep(SweepAxis::omega, {0, 2}, cfg, ds, 1, nullptr, {10});
  auto fresh = cfg;
  fresh.guidance.omega = 2;
  const auto run = pipeline::train_all(fresh, ds);
  EXPECT_EQ(rows[1].report->ranks, evaluate(run.stage3, ds.test, {10}, 1).ranks);
}

TEST(GradCheck, LinearMapIsExact) { EXPECT_LT(grad_check("linear").max_rel_error, 1e-10); }

TEST(GradCheck, ModulesWithinTolerance) {
  for (const std::string s : {"barope-attention", "decoder", "mcgln-block", "mbae", "denoiser"}) {
    const auto r = grad_check(s);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.format();
    EXPECT_FALSE(r.groups.empty());
  }
}

TEST(GradCheck, UnknownSelectorIsAUsageError) { EXPECT_THROW(grad_check("transformer"), UsageError); }
