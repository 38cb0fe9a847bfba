#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fatsmb/pipeline.hpp"

using namespace fatsmb;
using namespace fatsmb::pipeline;
namespace fs = std::filesystem;

namespace {

data::SyntheticSpec tiny_spec() {
  data::SyntheticSpec s;
  s.num_users = 60;
  s.num_items = 40;
  s.archetypes = 2;
  s.cluster_size = 4;
  s.min_len = 6;
  s.max_len = 12;
  return s;
}

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.seq_len = 8;
  c.model.d = 16;
  c.model.heads = 2;
  c.model.layers = 1;
  c.model.ffn_hidden = 32;
  c.denoiser.expert_hidden = 32;
  c.T = 20;
  c.guidance.stride = 5;
  c.train.batch_size = 32;
  c.train.stage1_epochs = 3;
  c.train.stage2_epochs = 3;
  c.train.stage3_epochs = 2;
  return c;
}

Dataset tiny_dataset() {
  const auto ds = data::gen_synthetic(tiny_spec());
  return prepare_dataset(ds.header, ds.interactions, 8);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("fatsmb_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, KeyValueRoundTrip) {
  auto c = tiny_config();
  c.model.position_mode = mbae::PositionMode::ape;
  c.denoiser.kind = denoise::DenoiserKind::adaln;
  c.guidance.omega = 2.5;
  const auto back = PipelineConfig::from_key_values(c.to_key_values());
  EXPECT_EQ(back.to_key_values().to_string(), c.to_key_values().to_string());
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  KeyValues kv = tiny_config().to_key_values();
  kv.set("model.depth", 3);
  EXPECT_THROW(PipelineConfig::from_key_values(kv), ConfigError);
  kv = tiny_config().to_key_values();
  kv.set("diffusion.stride", 7);
  EXPECT_THROW(PipelineConfig::from_key_values(kv), ConfigError);
  kv = tiny_config().to_key_values();
  kv.set("train.rho", 0.0);
  EXPECT_THROW(PipelineConfig::from_key_values(kv), ConfigError);
}

TEST(Dataset, LeaveOneOutSplit) {
  const auto ds = tiny_dataset();
  EXPECT_EQ(ds.test.size(), 60u);
  EXPECT_EQ(ds.train.size(), 60u);
  for (std::size_t u = 0; u < ds.train.size(); ++u) {
    const auto& ex = ds.test[u];
    EXPECT_EQ(ex.prefix.items.back(), ds.vocab().mask_token());
    EXPECT_EQ(ex.prefix.user, ds.train[u].user);
    EXPECT_EQ(static_cast<int>(ds.train[u].events.back().item), ex.prefix.items[ex.prefix.items.size() - 2]);
  }
}

TEST(Stage2Sampling, TimestepsAreUniform) {
  Rng rng(1);
  const int T = 200, n = 100000;
  const auto t = sample_timesteps(n, T, rng);
  std::vector<double> hist(T + 1, 0.0);
  for (int x : t) {
    ASSERT_GE(x, 1);
    ASSERT_LE(x, T);
    hist[static_cast<std::size_t>(x)] += 1;
  }
  const double e = static_cast<double>(n) / T;
  double chi2 = 0;
  for (int k = 1; k <= T; ++k) chi2 += (hist[static_cast<std::size_t>(k)] - e) * (hist[static_cast<std::size_t>(k)] - e) / e;
  EXPECT_LT(chi2, 248.33);  // chi-square 0.99 quantile, 199 dof
}

TEST(Stage2Sampling, NullFractionMatchesProbability) {
  Rng rng(2);
  const int n = 100000;
  const auto mask = sample_null_mask(n, 0.2, rng);
  double k = 0;
  for (char c : mask) k += c ? 1 : 0;
  const double se = std::sqrt(0.2 * 0.8 / n);
  EXPECT_NEAR(k / n, 0.2, 3 * se);
}

class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ds_ = new Dataset(tiny_dataset());
    model_ = new Model(tiny_config(), ds_->vocab());
    s1_log_ = stage1_pretrain(*model_, ds_->train);
    enc_after_s1_ = nn::checksum(model_->ae.encoder_params());
    s1_ = new Model(model_->clone());
    stage2_train_ldm(*model_, ds_->train);
    enc_after_s2_ = nn::checksum(model_->ae.encoder_params());
    den_after_s2_ = nn::checksum(model_->denoiser.params());
    dec_after_s2_ = nn::checksum(model_->ae.decoder_params());
    stage3_finetune(*model_, ds_->train);
  }
  static void TearDownTestSuite() {
    delete model_;
    delete s1_;
    delete ds_;
  }
  static Dataset* ds_;
  static Model* model_;
  static Model* s1_;
  static TrainLog s1_log_;
  static std::uint64_t enc_after_s1_, enc_after_s2_, den_after_s2_, dec_after_s2_;
};
Dataset* Trained::ds_ = nullptr;
Model* Trained::model_ = nullptr;
Model* Trained::s1_ = nullptr;
TrainLog Trained::s1_log_;
std::uint64_t Trained::enc_after_s1_ = 0, Trained::enc_after_s2_ = 0, Trained::den_after_s2_ = 0, Trained::dec_after_s2_ = 0;

TEST_F(Trained, StagesAdvanceAndLogEveryEpoch) {
  EXPECT_EQ(model_->stage, 3);
  EXPECT_EQ(s1_->stage, 1);
  ASSERT_EQ(s1_log_.size(), 3u);
  for (const auto& e : s1_log_) EXPECT_TRUE(std::isfinite(e.loss));
}

TEST_F(Trained, Stage1IsDeterministic) {
  Model again(tiny_config(), ds_->vocab());
  stage1_pretrain(again, ds_->train);
  EXPECT_EQ(nn::checksum(again.params()), nn::checksum(s1_->params()));
}

TEST_F(Trained, Stage2FreezesTheAutoencoder) {
  EXPECT_EQ(enc_after_s2_, enc_after_s1_);
  EXPECT_EQ(dec_after_s2_, nn::checksum(s1_->ae.decoder_params()));
  EXPECT_NE(den_after_s2_, nn::checksum(s1_->denoiser.params()));
}

TEST_F(Trained, Stage3TrainsOnlyTheDecoder) {
  EXPECT_EQ(nn::checksum(model_->ae.encoder_params()), enc_after_s2_);
  EXPECT_EQ(nn::checksum(model_->denoiser.params()), den_after_s2_);
  EXPECT_NE(nn::checksum(model_->ae.decoder_params()), dec_after_s2_);
}

TEST_F(Trained, Stage3GradientReachesOnlyTheDecoder) {
  Model m = model_->clone();
  nn::set_trainable(m.ae.encoder_params(), false);
  nn::set_trainable(m.denoiser.params(), false);
  nn::set_trainable(m.ae.decoder_params(), true);
  std::vector<Sequence> prefixes = {ds_->test[0].prefix, ds_->test[1].prefix};
  const Matrix za = encode_queries(m, prefixes);
  Rng rng(3);
  const Matrix z0 = diffusion::sample(2, za.cols(), za, {0, 1}, m.denoise_fn(), m.schedule, m.cfg.guidance, rng);
  Var loss = ag::cross_entropy(m.ae.decode(ag::constant(z0)), {1, 2});
  nn::zero_grad(m.params());
  ag::backward(loss);
  for (const auto& p : m.ae.encoder_params()) EXPECT_FALSE(p.var.ptr()->has_grad) << p.name;
  for (const auto& p : m.denoiser.params()) EXPECT_FALSE(p.var.ptr()->has_grad) << p.name;
  bool any = false;
  for (const auto& p : m.ae.decoder_params()) any = any || (p.var.ptr()->has_grad && !p.var.grad().isZero(0.0));
  EXPECT_TRUE(any);
}

TEST_F(Trained, CheckpointRoundTripIsByteIdentical) {
  const auto a = temp_dir("ckpt_a"), b = temp_dir("ckpt_b");
  model_->save(a.string());
  const Model back = Model::load(a.string());
  back.save(b.string());
  EXPECT_EQ(read_bytes(a / "params.bin"), read_bytes(b / "params.bin"));
  EXPECT_EQ(read_bytes(a / "manifest.txt"), read_bytes(b / "manifest.txt"));
  EXPECT_EQ(back.stage, 3);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_F(Trained, CheckpointRejectsShapeMismatch) {
  const auto a = temp_dir("ckpt_shape");
  model_->save(a.string());
  auto cfg = tiny_config();
  cfg.model.d = 8;
  Model other(cfg, ds_->vocab());
  EXPECT_THROW(ckpt::assign(ckpt::load_tensors(a.string()), other.params()), LoadError);
  std::ofstream(a / "params.bin", std::ios::binary) << "garbage";
  EXPECT_THROW(Model::load(a.string()), LoadError);
  fs::remove_all(a);
  EXPECT_THROW(Model::load(a.string()), LoadError);
}

TEST_F(Trained, InferenceIsDeterministic) {
  const auto& prefix = ds_->test[5].prefix;
  EXPECT_EQ(infer_next_item(*model_, prefix, 1, 10, 42), infer_next_item(*model_, prefix, 1, 10, 42));
  EXPECT_EQ(infer_next_item(*model_, prefix, 1, 10, 42).size(), 10u);
}

TEST_F(Trained, BatchScoringMatchesSingleQueries) {
  std::vector<Sequence> prefixes = {ds_->test[0].prefix, ds_->test[1].prefix, ds_->test[2].prefix};
  const Matrix batch = score_queries(*model_, prefixes, {0, 1, 2}, 9);
  for (int i = 0; i < 3; ++i) {
    const Matrix one = score_queries(*model_, {prefixes[static_cast<std::size_t>(i)]}, {i}, 9);
    EXPECT_LT((one.row(0) - batch.row(i)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST_F(Trained, FullCatalogRequestIsAPermutation) {
  const auto items = infer_next_item(*model_, ds_->test[0].prefix, 0, 40, 1);
  EXPECT_EQ(std::set<int>(items.begin(), items.end()).size(), 40u);
  std::ostringstream warn;
  EXPECT_EQ(infer_next_item(*model_, ds_->test[0].prefix, 0, 100, 1, &warn), items);
  EXPECT_NE(warn.str().find("clipped"), std::string::npos);
}

TEST_F(Trained, InferenceValidatesArguments) {
  EXPECT_THROW(infer_next_item(*model_, ds_->test[0].prefix, 4, 10, 1), UsageError);
  EXPECT_THROW(infer_next_item(*model_, ds_->test[0].prefix, 0, 0, 1), UsageError);
  EXPECT_THROW(s1_->require_stage(2), LoadError);
  EXPECT_THROW(model_->require_vocab({41, 4}), LoadError);
}

TEST(TopK, TiesGoToSmallerIds) {
  RowVector v(5);
  v << 1.0, 3.0, 3.0, 0.5, 3.0;
  EXPECT_EQ(top_k(v, 3), (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(top_k(v, 5), (std::vector<int>{1, 2, 4, 0, 3}));
}
