#pragma once

// Three training stages (autoencoder pretraining, latent diffusion, decoder
// fine-tuning) plus guided next-item inference. A Model bundles the
// autoencoder, the denoiser and the noise schedule; it is what checkpoints
// hold.

#include <algorithm>
#include <iostream>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "fatsmb/checkpoint.hpp"
#include "fatsmb/data.hpp"
#include "fatsmb/denoiser.hpp"
#include "fatsmb/diffusion.hpp"
#include "fatsmb/mbae.hpp"

namespace fatsmb::pipeline {

using data::Grouped;
using data::Sequence;
using data::Vocab;
using ag::Var;

struct TrainConfig {
  double learning_rate = 2e-3;
  double weight_decay = 0.01;
  int batch_size = 256;
  double rho = 0.2;
  double sigma = 0.2;
  int stage1_epochs = 200;
  int stage2_epochs = 100;
  int stage3_epochs = 20;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("train.rho must lie in (0,1]");
    if (!(sigma > 0.0 && sigma <= 1.0)) throw ConfigError("train.sigma must lie in (0,1]");
    if (stage1_epochs < 0 || stage2_epochs < 0 || stage3_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  }
};

struct PipelineConfig {
  int seq_len = 20;
  long long min_interactions = 0;
  std::uint64_t seed = 7;
  mbae::ModelConfig model;
  denoise::DenoiserConfig denoiser;
  int T = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  diffusion::GuidanceConfig guidance;
  TrainConfig train;

  // Autoencoder config with the sequence length folded in.
  mbae::ModelConfig model_config() const {
    auto m = model;
    m.max_len = seq_len;
    return m;
  }
  denoise::DenoiserConfig denoiser_config(int num_behaviors) const {
    auto d = denoiser;
    d.d = model.d;
    d.num_behaviors = num_behaviors;
    return d;
  }

  void validate() const {
    if (seq_len < 2) throw ConfigError("data.L must be at least 2");
    if (min_interactions < 0) throw ConfigError("data.min_interactions must be non-negative");
    model_config().validate();
    denoiser_config(1).validate();
    diffusion::make_schedule(T, beta_start, beta_end);
    guidance.validate(T);
    train.validate();
  }

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "seed", "data.L", "data.min_interactions",
        "model.d", "model.heads", "model.layers", "model.ffn_hidden", "model.dropout", "model.position_mode",
        "model.include_behavior_in_input", "model.rope_base", "model.init_std",
        "denoiser.kind", "denoiser.depth", "denoiser.shared_experts", "denoiser.private_experts", "denoiser.expert_hidden",
        "diffusion.T", "diffusion.beta_start", "diffusion.beta_end", "diffusion.omega", "diffusion.null_prob",
        "diffusion.stride",
        "train.lr", "train.weight_decay", "train.batch_size", "train.rho", "train.sigma", "train.stage1_epochs",
        "train.stage2_epochs", "train.stage3_epochs"};
    return keys;
  }

  // Keys absent from kv keep their defaults; unknown keys are rejected.
  static PipelineConfig from_key_values(const KeyValues& kv) {
    for (const auto& [k, v] : kv.entries())
      if (!known_keys().count(k)) throw ConfigError("unknown configuration key '" + k + "'");
    PipelineConfig c;
    c.seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<long long>(c.seed)));
    c.seq_len = kv.get("data.L", c.seq_len);
    c.min_interactions = kv.get("data.min_interactions", c.min_interactions);
    auto& m = c.model;
    m.d = kv.get("model.d", m.d);
    m.heads = kv.get("model.heads", m.heads);
    m.layers = kv.get("model.layers", m.layers);
    m.ffn_hidden = kv.get("model.ffn_hidden", m.ffn_hidden);
    m.dropout = kv.get("model.dropout", m.dropout);
    m.position_mode = mbae::parse_position_mode(kv.get("model.position_mode", mbae::to_string(m.position_mode)));
    m.include_behavior_in_input = kv.get("model.include_behavior_in_input", m.include_behavior_in_input);
    m.rope_base = kv.get("model.rope_base", m.rope_base);
    m.init_std = kv.get("model.init_std", m.init_std);
    auto& d = c.denoiser;
    d.kind = denoise::parse_denoiser_kind(kv.get("denoiser.kind", denoise::to_string(d.kind)));
    d.depth = kv.get("denoiser.depth", d.depth);
    d.shared_experts = kv.get("denoiser.shared_experts", d.shared_experts);
    d.private_experts = kv.get("denoiser.private_experts", d.private_experts);
    d.expert_hidden = kv.get("denoiser.expert_hidden", d.expert_hidden);
    c.T = kv.get("diffusion.T", c.T);
    c.beta_start = kv.get("diffusion.beta_start", c.beta_start);
    c.beta_end = kv.get("diffusion.beta_end", c.beta_end);
    c.guidance.omega = kv.get("diffusion.omega", c.guidance.omega);
    c.guidance.null_prob = kv.get("diffusion.null_prob", c.guidance.null_prob);
    c.guidance.stride = kv.get("diffusion.stride", c.guidance.stride);
    auto& t = c.train;
    t.learning_rate = kv.get("train.lr", t.learning_rate);
    t.weight_decay = kv.get("train.weight_decay", t.weight_decay);
    t.batch_size = kv.get("train.batch_size", t.batch_size);
    t.rho = kv.get("train.rho", t.rho);
    t.sigma = kv.get("train.sigma", t.sigma);
    t.stage1_epochs = kv.get("train.stage1_epochs", t.stage1_epochs);
    t.stage2_epochs = kv.get("train.stage2_epochs", t.stage2_epochs);
    t.stage3_epochs = kv.get("train.stage3_epochs", t.stage3_epochs);
    c.validate();
    return c;
  }

  // Every effective key; feeding this back through from_key_values
  // reproduces the config exactly.
  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("seed", seed);
    kv.set("data.L", seq_len);
    kv.set("data.min_interactions", min_interactions);
    kv.set("model.d", model.d);
    kv.set("model.heads", model.heads);
    kv.set("model.layers", model.layers);
    kv.set("model.ffn_hidden", model.ffn_hidden);
    kv.set("model.dropout", model.dropout);
    kv.set("model.position_mode", mbae::to_string(model.position_mode));
    kv.set("model.include_behavior_in_input", model.include_behavior_in_input);
    kv.set("model.rope_base", model.rope_base);
    kv.set("model.init_std", model.init_std);
    kv.set("denoiser.kind", denoise::to_string(denoiser.kind));
    kv.set("denoiser.depth", denoiser.depth);
    kv.set("denoiser.shared_experts", denoiser.shared_experts);
    kv.set("denoiser.private_experts", denoiser.private_experts);
    kv.set("denoiser.expert_hidden", denoiser.expert_hidden);
    kv.set("diffusion.T", T);
    kv.set("diffusion.beta_start", beta_start);
    kv.set("diffusion.beta_end", beta_end);
    kv.set("diffusion.omega", guidance.omega);
    kv.set("diffusion.null_prob", guidance.null_prob);
    kv.set("diffusion.stride", guidance.stride);
    kv.set("train.lr", train.learning_rate);
    kv.set("train.weight_decay", train.weight_decay);
    kv.set("train.batch_size", train.batch_size);
    kv.set("train.rho", train.rho);
    kv.set("train.sigma", train.sigma);
    kv.set("train.stage1_epochs", train.stage1_epochs);
    kv.set("train.stage2_epochs", train.stage2_epochs);
    kv.set("train.stage3_epochs", train.stage3_epochs);
    return kv;
  }
};

// ---------------------------------------------------------------- dataset

// Leave-one-out view of a dataset: every user's final interaction is the
// test target, everything before it is training data.
struct Dataset {
  data::DatasetHeader header;
  Grouped train;
  std::vector<data::NextItemExample> test;
  std::size_t skipped = 0;  // users with fewer than two interactions

  Vocab vocab() const { return header.vocab(); }
};

inline Dataset prepare_dataset(const data::DatasetHeader& header, const Grouped& all, int L, long long min_interactions = 0) {
  Dataset ds;
  ds.header = header;
  const Grouped kept = min_interactions > 0 ? data::filter_min_interactions(all, static_cast<std::size_t>(min_interactions)) : all;
  if (kept.empty()) throw EmptyDatasetError("no users left after filtering");
  auto split = data::next_item_split(data::build_sequences(kept, L, header.vocab()), header.vocab());
  ds.test = std::move(split.examples);
  ds.skipped = split.skipped;
  ds.train = data::holdout_last(kept).first;
  if (ds.train.empty()) throw EmptyDatasetError("no user has at least two interactions");
  return ds;
}

inline Dataset load_dataset(const std::string& path, int L, long long min_interactions = 0) {
  const auto header = data::read_header(data::header_path_for(path));
  return prepare_dataset(header, data::load_interactions(path, header.vocab()), L, min_interactions);
}

// Prefix for predicting the interaction after `history`: the most recent
// L-1 pairs followed by a (mask, slot_behavior) query slot.
inline Sequence query_prefix(std::uint32_t user, const std::vector<data::Interaction>& history, int L, const Vocab& vocab,
                             int slot_behavior) {
  std::vector<std::pair<int, int>> pairs;
  for (const auto& x : history) pairs.emplace_back(static_cast<int>(x.item), static_cast<int>(x.behavior));
  return data::with_query_slot(user, pairs, L, vocab, slot_behavior);
}

// ---------------------------------------------------------------- model bundle

class Model {
 public:
  Model(const PipelineConfig& cfg, const Vocab& vocab)
      : Model(cfg, vocab, make_rng(cfg.seed, Stream::init_mbae), make_rng(cfg.seed, Stream::init_denoiser)) {}

  PipelineConfig cfg;
  Vocab vocab;
  mbae::Mbae ae;
  denoise::Denoiser denoiser;
  diffusion::NoiseSchedule schedule;
  int stage = 0;  // last completed training stage

  nn::ParamList params() const {
    auto out = ae.params();
    auto dn = denoiser.params();
    out.insert(out.end(), dn.begin(), dn.end());
    return out;
  }

  KeyValues manifest() const {
    KeyValues kv = cfg.to_key_values();
    kv.set("checkpoint.version", static_cast<int>(ckpt::kVersion));
    kv.set("checkpoint.stage", stage);
    kv.set("checkpoint.num_items", vocab.num_items);
    kv.set("checkpoint.num_behaviors", vocab.num_behaviors);
    return kv;
  }

  void save(const std::string& dir) const { ckpt::save(dir, manifest(), params()); }

  static Model load(const std::string& dir) {
    const KeyValues kv = ckpt::load_manifest(dir);
    KeyValues cfg_kv;
    for (const auto& [k, v] : kv.entries())
      if (k.rfind("checkpoint.", 0) != 0) cfg_kv.set(k, v);
    Vocab vocab;
    try {
      vocab.num_items = static_cast<int>(kv.integer("checkpoint.num_items"));
      vocab.num_behaviors = static_cast<int>(kv.integer("checkpoint.num_behaviors"));
    } catch (const ConfigError& e) {
      throw LoadError(std::string("bad checkpoint manifest: ") + e.what());
    }
    Model m(PipelineConfig::from_key_values(cfg_kv), vocab);
    m.stage = kv.get("checkpoint.stage", 0);
    ckpt::assign(ckpt::load_tensors(dir), m.params());
    return m;
  }

  // Independent copy (parameters are deep-copied).
  Model clone() const {
    Model m(cfg, vocab);
    m.stage = stage;
    const auto src = params(), dst = m.params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].var.ptr()->value = src[i].var.value();
    return m;
  }

  // The denoiser as the sampler's callback.
  diffusion::Denoiser denoise_fn() const {
    return [this](const Matrix& z, int t, const Matrix& za, const denoise::Behaviors& b) {
      return denoiser.predict(z, t, za, b);
    };
  }

  void require_vocab(const Vocab& v) const {
    if (v.num_items != vocab.num_items || v.num_behaviors != vocab.num_behaviors)
      throw LoadError("checkpoint vocabulary (" + std::to_string(vocab.num_items) + " items, " +
                      std::to_string(vocab.num_behaviors) + " behaviors) does not match the dataset");
  }
  void require_stage(int s) const {
    if (stage < s) throw LoadError("checkpoint has completed stage " + std::to_string(stage) + ", need stage " + std::to_string(s));
  }

 private:
  Model(const PipelineConfig& c, const Vocab& v, Rng r_ae, Rng r_dn)
      : cfg((c.validate(), c)),
        vocab(v),
        ae(c.model_config(), v, r_ae),
        denoiser(c.denoiser_config(v.num_behaviors), r_dn),
        schedule(diffusion::make_schedule(c.T, c.beta_start, c.beta_end)) {}
};

// ---------------------------------------------------------------- logging

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double metric = 0.0;
};
using TrainLog = std::vector<EpochLog>;

inline void write_epoch(std::ostream* out, const EpochLog& e) {
  if (out) *out << e.epoch << ' ' << format_double(e.loss) << ' ' << format_double(e.metric) << '\n';
}

namespace detail {

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  std::vector<T> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(v[idx[i]]);
  return out;
}

inline Matrix pick_rows(const Matrix& m, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  Matrix out(static_cast<Eigen::Index>(end - begin), m.cols());
  for (std::size_t i = begin; i < end; ++i) out.row(static_cast<Eigen::Index>(i - begin)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline void check_finite(double loss, int stage, int epoch) {
  if (!std::isfinite(loss))
    throw NumericalError("stage " + std::to_string(stage) + " diverged at epoch " + std::to_string(epoch) +
                         " (non-finite loss); lower train.lr or check the data");
}

inline nn::AdamW make_optimizer(const TrainConfig& t) {
  nn::AdamWConfig c;
  c.learning_rate = t.learning_rate;
  c.weight_decay = t.weight_decay;
  return nn::AdamW(c);
}

}  // namespace detail

// ---------------------------------------------------------------- stage 1

// Cloze pretraining of encoder and decoder. Metric: masked-item top-1 accuracy.
inline TrainLog stage1_pretrain(Model& m, const Grouped& train, std::ostream* log = nullptr) {
  const auto seqs = data::build_sequences(train, m.cfg.seq_len, m.vocab);
  if (seqs.empty()) throw EmptyDatasetError("stage 1: no training sequences");
  const auto& tc = m.cfg.train;
  Rng rng = make_rng(m.cfg.seed, Stream::stage1);
  const auto params = m.ae.params();
  nn::set_trainable(params, true);
  nn::set_trainable(m.denoiser.params(), false);
  auto opt = detail::make_optimizer(tc);
  auto order = detail::iota(seqs.size());
  const auto bs = static_cast<std::size_t>(tc.batch_size);
  TrainLog out;
  for (int epoch = 1; epoch <= tc.stage1_epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t hits = 0, count = 0;
    for (std::size_t b = 0; b < seqs.size(); b += bs) {
      const auto batch = data::cloze_mask(detail::pick(seqs, order, b, std::min(b + bs, seqs.size())), tc.rho, tc.sigma,
                                          m.vocab, rng);
      mbae::ForwardMode mode;
      mode.training = true;
      mode.rng = &rng;
      auto r = mbae::cloze_forward(m.ae, batch, mode);
      detail::check_finite(r.loss.scalar(), 1, epoch);
      nn::zero_grad(params);
      ag::backward(r.loss);
      opt.step(params);
      loss_sum += r.loss.scalar() * static_cast<double>(r.count);
      hits += r.hits;
      count += r.count;
    }
    EpochLog e{epoch, loss_sum / static_cast<double>(count), static_cast<double>(hits) / static_cast<double>(count)};
    write_epoch(log, e);
    out.push_back(e);
  }
  nn::zero_grad(params);
  m.stage = 1;
  return out;
}

// ---------------------------------------------------------------- stage 2

// Frozen-encoder latents for every training transition: z_b encoded with the
// next behavior visible in the query slot, z_agn with it masked.
struct LatentPairs {
  Matrix z_b;
  Matrix z_agn;
  std::vector<int> behavior;

  std::size_t size() const { return behavior.size(); }
};

inline LatentPairs encode_transitions(const Model& m, const Grouped& train, std::size_t chunk = 512) {
  std::vector<Sequence> with_b, without_b;
  LatentPairs out;
  const int L = m.cfg.seq_len;
  for (const auto& u : train)
    for (std::size_t k = 1; k < u.events.size(); ++k) {
      const auto first = k > static_cast<std::size_t>(L - 1) ? k - static_cast<std::size_t>(L - 1) : 0;
      const std::vector<data::Interaction> hist(u.events.begin() + static_cast<std::ptrdiff_t>(first),
                                                u.events.begin() + static_cast<std::ptrdiff_t>(k));
      const int b = static_cast<int>(u.events[k].behavior);
      with_b.push_back(query_prefix(u.user, hist, L, m.vocab, b));
      without_b.push_back(query_prefix(u.user, hist, L, m.vocab, m.vocab.mask_token()));
      out.behavior.push_back(b);
    }
  if (out.behavior.empty()) throw EmptyDatasetError("stage 2: no user has two training interactions");
  const auto n = static_cast<Eigen::Index>(out.behavior.size());
  out.z_b.resize(n, m.cfg.model.d);
  out.z_agn.resize(n, m.cfg.model.d);
  for (std::size_t b = 0; b < with_b.size(); b += chunk) {
    const std::size_t e = std::min(b + chunk, with_b.size());
    const std::vector<Sequence> sb(with_b.begin() + static_cast<std::ptrdiff_t>(b), with_b.begin() + static_cast<std::ptrdiff_t>(e));
    const std::vector<Sequence> sa(without_b.begin() + static_cast<std::ptrdiff_t>(b), without_b.begin() + static_cast<std::ptrdiff_t>(e));
    const std::vector<int> pos(e - b, L - 1);
    out.z_b.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) = m.ae.encode_batch(sb, pos);
    out.z_agn.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) = m.ae.encode_batch(sa, pos);
  }
  return out;
}

// t ~ Uniform{1..T}.
inline std::vector<int> sample_timesteps(std::size_t n, int T, Rng& rng) {
  std::vector<int> t(n);
  for (auto& x : t) x = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(T)));
  return t;
}

// Per-example Bernoulli(p) flags for replacing the behavior by the null condition.
inline std::vector<char> sample_null_mask(std::size_t n, double p, Rng& rng) {
  std::vector<char> out(n);
  for (auto& x : out) x = uniform01(rng) < p ? 1 : 0;
  return out;
}

// Denoiser training on frozen latents. Metric: fraction of null-conditioned examples.
inline TrainLog stage2_train_ldm(Model& m, const Grouped& train, std::ostream* log = nullptr) {
  m.require_stage(1);
  const LatentPairs lp = encode_transitions(m, train);
  const auto& tc = m.cfg.train;
  Rng rng = make_rng(m.cfg.seed, Stream::stage2);
  nn::set_trainable(m.ae.params(), false);
  const auto params = m.denoiser.params();
  nn::set_trainable(params, true);
  auto opt = detail::make_optimizer(tc);
  auto order = detail::iota(lp.size());
  const auto bs = static_cast<std::size_t>(tc.batch_size);
  TrainLog out;
  for (int epoch = 1; epoch <= tc.stage2_epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t nulls = 0;
    for (std::size_t b = 0; b < lp.size(); b += bs) {
      const std::size_t e = std::min(b + bs, lp.size()), n = e - b;
      const Matrix z0 = detail::pick_rows(lp.z_b, order, b, e);
      const Matrix za = detail::pick_rows(lp.z_agn, order, b, e);
      const auto t = sample_timesteps(n, m.cfg.T, rng);
      const Matrix eps = normal_matrix(static_cast<Eigen::Index>(n), z0.cols(), 1.0, rng);
      const auto null = sample_null_mask(n, m.cfg.guidance.null_prob, rng);
      denoise::Behaviors beh(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (null[i]) ++nulls;
        else beh[i] = lp.behavior[order[b + i]];
      }
      const Matrix zt = diffusion::forward_sample_rows(z0, t, eps, m.schedule);
      Var loss = ag::mse(m.denoiser.forward(ag::constant(zt), t, ag::constant(za), beh), ag::constant(eps));
      detail::check_finite(loss.scalar(), 2, epoch);
      nn::zero_grad(params);
      ag::backward(loss);
      opt.step(params);
      loss_sum += loss.scalar() * static_cast<double>(n);
    }
    EpochLog e{epoch, loss_sum / static_cast<double>(lp.size()), static_cast<double>(nulls) / static_cast<double>(lp.size())};
    write_epoch(log, e);
    out.push_back(e);
  }
  nn::zero_grad(params);
  m.stage = 2;
  return out;
}

// ---------------------------------------------------------------- stage 3

// Next-item examples from the training portion: each user's last training
// interaction is the target, the earlier ones the history.
inline std::vector<data::NextItemExample> finetune_examples(const Model& m, const Grouped& train) {
  std::vector<data::NextItemExample> out;
  for (const auto& u : train) {
    if (u.events.size() < 2) continue;
    const std::vector<data::Interaction> hist(u.events.begin(), u.events.end() - 1);
    out.push_back({query_prefix(u.user, hist, m.cfg.seq_len, m.vocab, m.vocab.mask_token()),
                   static_cast<int>(u.events.back().item), static_cast<int>(u.events.back().behavior)});
  }
  return out;
}

inline Matrix encode_queries(const Model& m, const std::vector<Sequence>& prefixes, std::size_t chunk = 512) {
  Matrix z(static_cast<Eigen::Index>(prefixes.size()), m.cfg.model.d);
  for (std::size_t b = 0; b < prefixes.size(); b += chunk) {
    const std::size_t e = std::min(b + chunk, prefixes.size());
    const std::vector<Sequence> s(prefixes.begin() + static_cast<std::ptrdiff_t>(b), prefixes.begin() + static_cast<std::ptrdiff_t>(e));
    z.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) =
        m.ae.encode_batch(s, std::vector<int>(e - b, m.cfg.seq_len - 1));
  }
  return z;
}

// Decoder fine-tuning on guided samples; z_T is drawn fresh for every example
// in every epoch. Metric: top-1 accuracy on the training targets.
inline TrainLog stage3_finetune(Model& m, const Grouped& train, std::ostream* log = nullptr) {
  m.require_stage(2);
  const auto examples = finetune_examples(m, train);
  if (examples.empty()) throw EmptyDatasetError("stage 3: no user has two training interactions");
  std::vector<Sequence> prefixes;
  for (const auto& ex : examples) prefixes.push_back(ex.prefix);
  const Matrix z_agn = encode_queries(m, prefixes);
  const auto& tc = m.cfg.train;
  Rng rng = make_rng(m.cfg.seed, Stream::stage3);
  nn::set_trainable(m.ae.encoder_params(), false);
  nn::set_trainable(m.denoiser.params(), false);
  const auto params = m.ae.decoder_params();
  nn::set_trainable(params, true);
  auto opt = detail::make_optimizer(tc);
  auto order = detail::iota(examples.size());
  const auto bs = static_cast<std::size_t>(tc.batch_size);
  const auto fn = m.denoise_fn();
  TrainLog out;
  for (int epoch = 1; epoch <= tc.stage3_epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < examples.size(); b += bs) {
      const std::size_t e = std::min(b + bs, examples.size()), n = e - b;
      std::vector<int> beh, targets;
      for (std::size_t i = b; i < e; ++i) {
        beh.push_back(examples[order[i]].target_behavior);
        targets.push_back(examples[order[i]].target_item);
      }
      const Matrix za = detail::pick_rows(z_agn, order, b, e);
      const Matrix z0 = diffusion::sample(static_cast<Eigen::Index>(n), za.cols(), za, beh, fn, m.schedule, m.cfg.guidance, rng);
      Var logits = m.ae.decode(ag::constant(z0));
      Var loss = ag::cross_entropy(logits, targets);
      detail::check_finite(loss.scalar(), 3, epoch);
      nn::zero_grad(params);
      ag::backward(loss);
      opt.step(params);
      loss_sum += loss.scalar() * static_cast<double>(n);
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best;
        logits.value().row(r).maxCoeff(&best);
        if (best == targets[static_cast<std::size_t>(r)]) ++hits;
      }
    }
    EpochLog ep{epoch, loss_sum / static_cast<double>(examples.size()),
                static_cast<double>(hits) / static_cast<double>(examples.size())};
    write_epoch(log, ep);
    out.push_back(ep);
  }
  nn::zero_grad(params);
  m.stage = 3;
  return out;
}

// ---------------------------------------------------------------- inference

enum class ScoreMode {
  diffusion,  // guided sampling from z_agn toward the target behavior
  agnostic,   // decode z_agn directly (no-diffusion baseline)
};

// Full-catalog logits for each query, n x |V|. Each row's z_T comes from the
// stream derived from (seed, user), so a user's result does not depend on
// the rest of the batch.
inline Matrix score_queries(const Model& m, const std::vector<Sequence>& prefixes, const std::vector<int>& behaviors,
                            std::uint64_t seed, ScoreMode mode = ScoreMode::diffusion) {
  if (prefixes.size() != behaviors.size()) throw UsageError("one target behavior per query required");
  for (int b : behaviors)
    if (!m.vocab.is_behavior(b)) throw UsageError("unknown behavior id " + std::to_string(b));
  if (prefixes.empty()) return Matrix(0, m.vocab.num_items);
  const Matrix z_agn = encode_queries(m, prefixes);
  Matrix z0 = z_agn;
  if (mode == ScoreMode::diffusion) {
    Matrix zT(z_agn.rows(), z_agn.cols());
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      Rng r = make_rng(seed, Stream::inference, prefixes[i].user);
      zT.row(static_cast<Eigen::Index>(i)) = normal_matrix(1, z_agn.cols(), 1.0, r);
    }
    z0 = diffusion::sample(zT, z_agn, behaviors, m.denoise_fn(), m.schedule, m.cfg.guidance);
  }
  return m.ae.decode(ag::constant(z0)).value();
}

// Indices of the K largest entries, descending; ties go to the smaller id.
inline std::vector<int> top_k(const Eigen::Ref<const RowVector>& logits, int K) {
  std::vector<int> idx(static_cast<std::size_t>(logits.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto k = static_cast<std::size_t>(std::clamp<Eigen::Index>(K, 0, logits.size()));
  auto better = [&](int a, int b) { return logits(a) > logits(b) || (logits(a) == logits(b) && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

inline std::vector<int> infer_next_item(const Model& m, const Sequence& prefix, int behavior, int K, std::uint64_t seed,
                                        std::ostream* warn = &std::cerr) {
  if (!m.vocab.is_behavior(behavior)) throw UsageError("unknown behavior id " + std::to_string(behavior));
  if (K < 1) throw UsageError("K must be positive");
  if (K > m.vocab.num_items) {
    if (warn) *warn << "warning: K=" << K << " exceeds the catalog size; clipped to " << m.vocab.num_items << '\n';
    K = m.vocab.num_items;
  }
  const Matrix logits = score_queries(m, {prefix}, {behavior}, seed);
  return top_k(logits.row(0), K);
}

// ---------------------------------------------------------------- full run

struct RunLogs {
  TrainLog stage1, stage2, stage3;
};

// Snapshots after each stage; the earlier ones back the baselines.
struct TrainedRun {
  Model stage1, stage2, stage3;
  RunLogs logs;
};

inline TrainedRun train_all(const PipelineConfig& cfg, const Dataset& ds) {
  Model m(cfg, ds.vocab());
  RunLogs logs;
  logs.stage1 = stage1_pretrain(m, ds.train);
  Model s1 = m.clone();
  logs.stage2 = stage2_train_ldm(m, ds.train);
  Model s2 = m.clone();
  logs.stage3 = stage3_finetune(m, ds.train);
  return {std::move(s1), std::move(s2), std::move(m), std::move(logs)};
}

}  // namespace fatsmb::pipeline
