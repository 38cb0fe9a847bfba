#pragma once

// Multi-behavior autoencoder: behavior-aware embeddings, a pre-norm
// bidirectional transformer encoder with a selectable position scheme, latent
// extraction, and a feed-forward decoder scored against the item table.

#include <optional>
#include <string>
#include <vector>

#include "fatsmb/attention.hpp"
#include "fatsmb/config.hpp"
#include "fatsmb/data.hpp"
#include "fatsmb/nn.hpp"

namespace fatsmb::mbae {

using ag::Var;
using data::Sequence;
using data::Vocab;

enum class PositionMode { ape, rope, barope };

inline std::string to_string(PositionMode m) {
  switch (m) {
    case PositionMode::ape: return "APE";
    case PositionMode::rope: return "RoPE";
    case PositionMode::barope: return "BaRoPE";
  }
  return "?";
}

inline PositionMode parse_position_mode(const std::string& s) {
  if (s == "APE" || s == "ape") return PositionMode::ape;
  if (s == "RoPE" || s == "rope") return PositionMode::rope;
  if (s == "BaRoPE" || s == "barope") return PositionMode::barope;
  throw ConfigError("unknown position mode '" + s + "' (expected APE, RoPE or BaRoPE)");
}

struct ModelConfig {
  int d = 64;
  int heads = 2;
  int layers = 2;
  int ffn_hidden = 128;
  double dropout = 0.1;
  PositionMode position_mode = PositionMode::barope;
  bool include_behavior_in_input = true;
  double rope_base = 10000.0;
  int max_len = 20;
  double init_std = 0.1;

  int d_k() const { return d / heads; }

  void validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0) throw ConfigError("model: d must be a positive multiple of heads");
    if (d_k() % 2 != 0) throw ConfigError("model: per-head dimension must be even for rotary pairing");
    if (layers < 1) throw ConfigError("model: at least one encoder layer required");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0,1)");
    if (max_len < 1) throw ConfigError("model: max_len must be positive");
  }
};

// Behavior-specific (behavior set) or behavior-agnostic (behavior empty).
struct LatentPreference {
  Vector z;
  std::optional<int> behavior;

  bool agnostic() const { return !behavior.has_value(); }
};

struct EncoderLayer {
  Var wq, wk, wv, wo;  // d x d, no bias
  nn::LayerNorm norm_attn, norm_ffn;
  nn::FeedForward ffn;

  void collect(const std::string& prefix, nn::ParamList& out) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".wo", wo});
    norm_attn.collect(prefix + ".norm_attn", out);
    norm_ffn.collect(prefix + ".norm_ffn", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

// Forward-pass options.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;                       // dropout source; required when training
  attn::AttentionTrace* traces = nullptr;   // one trace per layer when set
};

class Mbae {
 public:
  Mbae(const ModelConfig& cfg, const Vocab& vocab, Rng& rng) : cfg_(cfg), vocab_(vocab) {
    cfg_.validate();
    const int d = cfg_.d;
    theta_ = attn::rope_frequencies(cfg_.d_k(), cfg_.rope_base);
    Matrix items = normal_matrix(vocab.num_items + 2, d, cfg_.init_std, rng);
    items.row(vocab.num_items).setZero();  // pad
    item_table_ = nn::make_param(std::move(items));
    Matrix behaviors = normal_matrix(vocab.num_behaviors + 2, d, cfg_.init_std, rng);
    behaviors.row(vocab.num_behaviors).setZero();
    behavior_table_ = nn::make_param(std::move(behaviors));
    position_table_ = nn::make_param(normal_matrix(cfg_.max_len, d, cfg_.init_std, rng));
    const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < cfg_.layers; ++l) {
      EncoderLayer layer;
      layer.wq = nn::make_param(normal_matrix(d, d, wstd, rng));
      layer.wk = nn::make_param(normal_matrix(d, d, wstd, rng));
      layer.wv = nn::make_param(normal_matrix(d, d, wstd, rng));
      layer.wo = nn::make_param(normal_matrix(d, d, wstd, rng));
      layer.norm_attn = nn::LayerNorm(d);
      layer.norm_ffn = nn::LayerNorm(d);
      layer.ffn = nn::FeedForward(d, cfg_.ffn_hidden, d, rng);
      layers_.push_back(std::move(layer));
    }
    final_norm_ = nn::LayerNorm(d);
    behavior_mod_ = nn::FeedForward(d, d, d / 2, rng, nn::Activation::gelu);
    decoder_ = nn::FeedForward(d, d, d, rng, nn::Activation::gelu);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  const std::vector<double>& frequencies() const { return theta_; }

  // Forces the behavior modulation to exactly 1 (BaRoPE then reduces to RoPE).
  void set_unit_modulation(bool on) { unit_modulation_ = on; }

  // ------------------------------------------------------------ parameters

  nn::ParamList encoder_params() const {
    nn::ParamList out;
    out.push_back({"encoder.item_table", item_table_});
    out.push_back({"encoder.behavior_table", behavior_table_});
    out.push_back({"encoder.position_table", position_table_});
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect("encoder.layer" + std::to_string(l), out);
    final_norm_.collect("encoder.final_norm", out);
    behavior_mod_.collect("encoder.behavior_mod", out);
    return out;
  }
  nn::ParamList decoder_params() const {
    nn::ParamList out;
    decoder_.collect("decoder.ffn", out);
    return out;
  }
  nn::ParamList params() const {
    auto out = encoder_params();
    auto dec = decoder_params();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }

  Var item_table() const { return item_table_; }
  Var behavior_table() const { return behavior_table_; }
  nn::FeedForward& behavior_mod_net() { return behavior_mod_; }
  nn::FeedForward& decoder_net() { return decoder_; }
  std::vector<EncoderLayer>& layers() { return layers_; }

  // ------------------------------------------------------------ forward

  // Input embeddings, (B*L) x d. Pad positions are zero rows; the tokens
  // stored at pad positions are never read.
  Var embed(const std::vector<Sequence>& seqs) const {
    std::vector<int> item_rows, behavior_rows, pos_rows;
    std::vector<double> valid;
    const int L = check_batch(seqs);
    for (const auto& s : seqs)
      for (int i = 0; i < L; ++i) {
        const bool real = i >= s.first_real();
        const auto ui = static_cast<std::size_t>(i);
        item_rows.push_back(real ? vocab_.item_row(s.items[ui]) : -1);
        behavior_rows.push_back(real ? vocab_.behavior_row(s.behaviors[ui]) : -1);
        pos_rows.push_back(real ? i : -1);
        valid.push_back(real ? 1.0 : 0.0);
      }
    Var h = ag::gather_rows(item_table_, item_rows);
    const bool with_behavior = cfg_.position_mode == PositionMode::ape || cfg_.include_behavior_in_input;
    if (with_behavior) h = ag::add(h, ag::gather_rows(behavior_table_, behavior_rows));
    if (cfg_.position_mode == PositionMode::ape) h = ag::add(h, ag::gather_rows(position_table_, pos_rows));
    return h;
  }

  // Positive per-pair scale factors, (B*L) x d/2 before pair expansion.
  Var behavior_scales(const std::vector<Sequence>& seqs) const {
    std::vector<int> rows;
    for (const auto& s : seqs)
      for (int i = 0; i < s.length(); ++i)
        rows.push_back(vocab_.behavior_row(i >= s.first_real() ? s.behaviors[static_cast<std::size_t>(i)] : vocab_.pad_token()));
    if (unit_modulation_) return ag::constant(Matrix::Ones(static_cast<Eigen::Index>(rows.size()), cfg_.d / 2));
    return ag::softplus(behavior_mod_(ag::gather_rows(behavior_table_, rows)));
  }

  // Final hidden states, (B*L) x d; pad rows are zero.
  Var forward(const std::vector<Sequence>& seqs, const ForwardMode& mode = {}) const {
    const int L = check_batch(seqs);
    if (mode.training && !mode.rng && cfg_.dropout > 0.0) throw UsageError("training forward needs an rng");
    std::vector<int> starts;
    std::vector<double> valid, positions;
    for (const auto& s : seqs) {
      if (s.length_real < 1) throw UsageError("sequence has no real tokens");
      starts.push_back(s.first_real());
      for (int i = 0; i < L; ++i) {
        valid.push_back(i >= s.first_real() ? 1.0 : 0.0);
        positions.push_back(static_cast<double>(i));
      }
    }
    const double p = mode.training ? cfg_.dropout : 0.0;
    Var h = embed(seqs);
    if (p > 0.0) h = ag::dropout(h, p, *mode.rng);

    std::optional<Var> scales;
    if (cfg_.position_mode == PositionMode::barope) scales = attn::expand_pairs(behavior_scales(seqs));

    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      Var a = layer.norm_attn(h);
      Var q = ag::matmul(a, layer.wq);
      Var k = ag::matmul(a, layer.wk);
      Var v = ag::matmul(a, layer.wv);
      if (cfg_.position_mode != PositionMode::ape) {
        q = attn::rotary(q, positions, cfg_.heads, theta_);
        k = attn::rotary(k, positions, cfg_.heads, theta_);
        if (scales) {
          q = ag::mul(q, *scales);
          k = ag::mul(k, *scales);
        }
      }
      Var ctx = attn::attention_core(q, k, v, cfg_.heads, L, starts, mode.traces ? &mode.traces[l] : nullptr);
      Var proj = ag::matmul(ctx, layer.wo);
      if (p > 0.0) proj = ag::dropout(proj, p, *mode.rng);
      h = ag::add(h, proj);
      Var f = layer.ffn(layer.norm_ffn(h));
      if (p > 0.0) f = ag::dropout(f, p, *mode.rng);
      h = ag::mask_rows(ag::add(h, f), valid);
    }
    return ag::mask_rows(final_norm_(h), valid);
  }

  // Hidden rows at (sequence, position) pairs, n x d.
  static Var extract(const Var& hidden, int seq_len, const std::vector<std::pair<int, int>>& at) {
    std::vector<int> rows;
    for (const auto& [s, i] : at) rows.push_back(s * seq_len + i);
    return ag::gather_rows(hidden, rows);
  }

  // Latent preferences of one sequence at the given positions (eval mode).
  std::vector<LatentPreference> encode(const Sequence& seq, const std::vector<int>& positions) const {
    for (int i : positions)
      if (i < seq.first_real() || i >= seq.length()) throw UsageError("latent extraction at a pad or out-of-range position");
    Var h = forward({seq});
    std::vector<LatentPreference> out;
    for (int i : positions) {
      LatentPreference lp;
      lp.z = h.value().row(i).transpose();
      const int b = seq.behaviors[static_cast<std::size_t>(i)];
      if (vocab_.is_behavior(b)) lp.behavior = b;
      out.push_back(std::move(lp));
    }
    return out;
  }

  // Latents of a batch at one position per sequence, eval mode, n x d.
  Matrix encode_batch(const std::vector<Sequence>& seqs, const std::vector<int>& positions) const {
    Var h = forward(seqs);
    const int L = seqs.empty() ? 0 : seqs.front().length();
    Matrix z(static_cast<Eigen::Index>(seqs.size()), cfg_.d);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const int i = positions[s];
      if (i < seqs[s].first_real() || i >= L) throw UsageError("latent extraction at a pad or out-of-range position");
      z.row(static_cast<Eigen::Index>(s)) = h.value().row(static_cast<Eigen::Index>(s) * L + i);
    }
    return z;
  }

  // Decoder query vectors, n x d.
  Var decoder_query(const Var& z) const { return decoder_(z); }

  // Full-catalog logits, n x |V|.
  Var decode(const Var& z) const {
    return ag::matmul_nt(decoder_(z), ag::slice_rows(item_table_, 0, vocab_.num_items));
  }

  Vector decode(const LatentPreference& lp) const {
    if (!lp.z.allFinite()) throw NumericalError("decode: non-finite latent");
    Matrix z = lp.z.transpose();
    return decode(ag::constant(z)).value().row(0).transpose();
  }

  // Mean over layers and heads of the post-softmax attention matrices (L x L).
  Matrix attention_maps(const Sequence& seq) const {
    std::vector<attn::AttentionTrace> traces(layers_.size());
    ForwardMode mode;
    mode.traces = traces.data();
    forward({seq}, mode);
    const int L = seq.length();
    Matrix avg = Matrix::Zero(L, L);
    std::size_t count = 0;
    for (const auto& t : traces)
      for (const auto& p : t.probs) {
        avg += p;
        ++count;
      }
    return avg / static_cast<double>(count);
  }

 private:
  int check_batch(const std::vector<Sequence>& seqs) const {
    if (seqs.empty()) throw UsageError("empty batch");
    const int L = seqs.front().length();
    for (const auto& s : seqs)
      if (s.length() != L) throw UsageError("batch sequences must share length L");
    if (cfg_.position_mode == PositionMode::ape && L > cfg_.max_len)
      throw UsageError("sequence longer than the position table");
    return L;
  }

  ModelConfig cfg_;
  Vocab vocab_;
  std::vector<double> theta_;
  Var item_table_, behavior_table_, position_table_;
  std::vector<EncoderLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::FeedForward behavior_mod_;
  nn::FeedForward decoder_;
  bool unit_modulation_ = false;
};

// Mean cross-entropy of the target items under the logits.
inline Var mbae_loss(const Var& logits, const std::vector<int>& targets) { return ag::cross_entropy(logits, targets); }

// Masked-item loss for a Cloze batch; also reports top-1 hits.
struct ClozeResult {
  Var loss;
  std::size_t hits = 0;
  std::size_t count = 0;
  Matrix logits;
  std::vector<int> targets;
};

inline ClozeResult cloze_forward(const Mbae& model, const data::MaskedBatch& batch, const ForwardMode& mode) {
  Var h = model.forward(batch.sequences, mode);
  const int L = batch.sequences.front().length();
  std::vector<std::pair<int, int>> at;
  std::vector<int> targets;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s)
    for (std::size_t j = 0; j < batch.masked_positions[s].size(); ++j) {
      at.emplace_back(static_cast<int>(s), batch.masked_positions[s][j]);
      targets.push_back(batch.target_items[s][j]);
    }
  Var logits = model.decode(Mbae::extract(h, L, at));
  ClozeResult r;
  r.loss = mbae_loss(logits, targets);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best;
    logits.value().row(i).maxCoeff(&best);
    if (best == targets[static_cast<std::size_t>(i)]) ++r.hits;
  }
  r.count = targets.size();
  r.logits = logits.value();
  r.targets = std::move(targets);
  return r;
}

// Attention-map text grid: first line L, then L rows of L reals.
inline void write_attention_grid(std::ostream& out, const Matrix& m) {
  out << m.rows() << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << format_double(m(r, c));
    out << '\n';
  }
}

inline Matrix read_attention_grid(std::istream& in) {
  Eigen::Index L = 0;
  if (!(in >> L) || L <= 0) throw ParseError("attention grid: expected positive size", 1);
  Matrix m(L, L);
  for (Eigen::Index r = 0; r < L; ++r)
    for (Eigen::Index c = 0; c < L; ++c) {
      std::string tok;
      if (!(in >> tok)) throw ParseError("attention grid: truncated", static_cast<std::size_t>(r + 2));
      m(r, c) = std::stod(tok);
    }
  return m;
}

// Legend labels `item_behavior` per position; pad positions are `pad`.
inline std::vector<std::string> attention_legend(const Sequence& seq, const Vocab& vocab,
                                                 const std::vector<std::string>& behavior_names = {}) {
  std::vector<std::string> out;
  for (int i = 0; i < seq.length(); ++i) {
    if (i < seq.first_real()) {
      out.push_back("pad");
      continue;
    }
    const int item = seq.items[static_cast<std::size_t>(i)];
    const int b = seq.behaviors[static_cast<std::size_t>(i)];
    std::string is = vocab.is_item(item) ? std::to_string(item) : "mask";
    std::string bs = !vocab.is_behavior(b) ? "mask"
                     : static_cast<std::size_t>(b) < behavior_names.size() ? behavior_names[static_cast<std::size_t>(b)]
                                                                           : std::to_string(b);
    out.push_back(is + "_" + bs);
  }
  return out;
}

}  // namespace fatsmb::mbae
