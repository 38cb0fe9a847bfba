#pragma once

// Leave-one-out ranking metrics, behavior-stratified evaluation, the few-shot
// omission harness, hyperparameter sweeps, and finite-difference gradient
// checks.

#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fatsmb/pipeline.hpp"

namespace fatsmb::eval {

using data::Grouped;
using pipeline::Model;
using ag::Var;

// ---------------------------------------------------------------- metrics

// rank is 1-based; nullopt is a miss.
inline double recall_at_k(std::optional<int> rank, int K) { return rank && *rank >= 1 && *rank <= K ? 1.0 : 0.0; }

inline double ndcg_at_k(std::optional<int> rank, int K) {
  return rank && *rank >= 1 && *rank <= K ? 1.0 / std::log2(static_cast<double>(*rank) + 1.0) : 0.0;
}

// Position of `target` in the descending order of `logits`, ties broken by
// ascending item id.
inline int rank_of(const Eigen::Ref<const RowVector>& logits, int target) {
  const double v = logits(target);
  int r = 1;
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (logits(i) > v || (logits(i) == v && i < target)) ++r;
  return r;
}

struct MetricSet {
  std::map<int, double> recall, ndcg;  // keyed by K
  std::size_t count = 0;
};

struct EvalReport {
  std::vector<int> ks;
  MetricSet overall;
  std::map<int, MetricSet> per_behavior;
  std::size_t test_size = 0;
  std::vector<int> ranks;                    // per test example, in test order
  std::vector<std::vector<int>> top_lists;   // top max(K) items per example
  KeyValues config;

  double recall(int K, std::optional<int> behavior = std::nullopt) const {
    const MetricSet& m = behavior ? per_behavior.at(*behavior) : overall;
    return m.recall.at(K);
  }
  double ndcg(int K, std::optional<int> behavior = std::nullopt) const {
    const MetricSet& m = behavior ? per_behavior.at(*behavior) : overall;
    return m.ndcg.at(K);
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("test_size", static_cast<long long>(test_size));
    for (int K : ks) {
      kv.set("recall@" + std::to_string(K), overall.recall.at(K));
      kv.set("ndcg@" + std::to_string(K), overall.ndcg.at(K));
      for (const auto& [b, m] : per_behavior) {
        kv.set("behavior" + std::to_string(b) + ".recall@" + std::to_string(K), m.recall.at(K));
        kv.set("behavior" + std::to_string(b) + ".ndcg@" + std::to_string(K), m.ndcg.at(K));
      }
    }
    for (const auto& [b, m] : per_behavior) kv.set("behavior" + std::to_string(b) + ".count", static_cast<long long>(m.count));
    return kv;
  }

  std::string table() const {
    std::ostringstream os;
    os << "behavior  count";
    for (int K : ks) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "  %-6s  %-6s", ("R@" + std::to_string(K)).c_str(), ("N@" + std::to_string(K)).c_str());
      os << buf;
    }
    os << '\n';
    auto row = [&](const std::string& name, const MetricSet& m) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%-8s %6zu", name.c_str(), m.count);
      os << buf;
      for (int K : ks) {
        std::snprintf(buf, sizeof buf, "  %.4f  %.4f", m.recall.at(K), m.ndcg.at(K));
        os << buf;
      }
      os << '\n';
    };
    for (const auto& [b, m] : per_behavior) row(std::to_string(b), m);
    row("all", overall);
    return os.str();
  }

  // Ranks and top lists, one line per test example.
  std::string rankings(const std::vector<data::NextItemExample>& test) const {
    std::ostringstream os;
    for (std::size_t i = 0; i < test.size(); ++i) {
      os << test[i].prefix.user << '\t' << test[i].target_behavior << '\t' << test[i].target_item << '\t' << ranks[i] << '\t';
      for (std::size_t j = 0; j < top_lists[i].size(); ++j) os << (j ? "," : "") << top_lists[i][j];
      os << '\n';
    }
    return os.str();
  }
};

inline EvalReport evaluate(const Model& m, const std::vector<data::NextItemExample>& test, const std::vector<int>& ks,
                           std::uint64_t seed, pipeline::ScoreMode mode = pipeline::ScoreMode::diffusion,
                           std::size_t chunk = 512) {
  if (test.empty()) throw EmptyDatasetError("evaluation: empty test set");
  if (ks.empty()) throw UsageError("evaluation: no cutoffs given");
  for (int K : ks)
    if (K < 1) throw UsageError("evaluation: cutoffs must be positive");
  EvalReport r;
  r.ks = ks;
  r.test_size = test.size();
  r.config = m.cfg.to_key_values();
  const int kmax = *std::max_element(ks.begin(), ks.end());
  for (std::size_t b = 0; b < test.size(); b += chunk) {
    const std::size_t e = std::min(b + chunk, test.size());
    std::vector<data::Sequence> prefixes;
    std::vector<int> behaviors;
    for (std::size_t i = b; i < e; ++i) {
      prefixes.push_back(test[i].prefix);
      behaviors.push_back(test[i].target_behavior);
    }
    const Matrix logits = pipeline::score_queries(m, prefixes, behaviors, seed, mode);
    for (std::size_t i = b; i < e; ++i) {
      const auto row = logits.row(static_cast<Eigen::Index>(i - b));
      r.ranks.push_back(rank_of(row, test[i].target_item));
      r.top_lists.push_back(pipeline::top_k(row, kmax));
    }
  }
  // Ordered reduction: per-behavior sums first, overall from the same sums.
  std::map<int, std::map<int, double>> rsum, nsum;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int b = test[i].target_behavior;
    r.per_behavior[b].count++;
    for (int K : ks) {
      rsum[b][K] += recall_at_k(r.ranks[i], K);
      nsum[b][K] += ndcg_at_k(r.ranks[i], K);
    }
  }
  r.overall.count = test.size();
  for (int K : ks) {
    double rt = 0.0, nt = 0.0;
    for (auto& [b, ms] : r.per_behavior) {
      ms.recall[K] = rsum[b][K] / static_cast<double>(ms.count);
      ms.ndcg[K] = nsum[b][K] / static_cast<double>(ms.count);
      rt += rsum[b][K];
      nt += nsum[b][K];
    }
    r.overall.recall[K] = rt / static_cast<double>(test.size());
    r.overall.ndcg[K] = nt / static_cast<double>(test.size());
  }
  return r;
}

// ---------------------------------------------------------------- few-shot

// Removes floor(ratio * n_b) of the target behavior's n_b interactions,
// chosen uniformly; everything else is untouched. Users left without any
// interaction are dropped.
inline Grouped few_shot_drop(const Grouped& train, int target_behavior, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("omission ratio must lie in [0,1]");
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t u = 0; u < train.size(); ++u)
    for (std::size_t i = 0; i < train[u].events.size(); ++i)
      if (static_cast<int>(train[u].events[i].behavior) == target_behavior) where.emplace_back(u, i);
  const auto n_drop = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(where.size()) + 1e-9));
  Rng rng = make_rng(seed, Stream::few_shot, static_cast<std::uint64_t>(target_behavior));
  shuffle(where, rng);
  std::vector<std::vector<char>> drop(train.size());
  for (std::size_t u = 0; u < train.size(); ++u) drop[u].assign(train[u].events.size(), 0);
  for (std::size_t j = 0; j < n_drop; ++j) drop[where[j].first][where[j].second] = 1;
  Grouped out;
  for (std::size_t u = 0; u < train.size(); ++u) {
    data::UserHistory h{train[u].user, {}};
    for (std::size_t i = 0; i < train[u].events.size(); ++i)
      if (!drop[u][i]) h.events.push_back(train[u].events[i]);
    if (!h.events.empty()) out.push_back(std::move(h));
  }
  return out;
}

struct FewShotRow {
  double ratio = 0.0;
  std::size_t remaining = 0;  // target-behavior training interactions left
  EvalReport report;
};

inline std::size_t count_behavior(const Grouped& g, int behavior) {
  std::size_t n = 0;
  for (const auto& u : g)
    for (const auto& x : u.events) n += static_cast<int>(x.behavior) == behavior ? 1 : 0;
  return n;
}

// Retrains all three stages per ratio; the test set is shared.
inline std::vector<FewShotRow> few_shot(const pipeline::PipelineConfig& cfg, const pipeline::Dataset& ds, int target_behavior,
                                        const std::vector<double>& ratios, std::uint64_t eval_seed,
                                        const std::vector<int>& ks = {10, 20}) {
  if (!ds.vocab().is_behavior(target_behavior)) throw UsageError("unknown behavior id " + std::to_string(target_behavior));
  std::vector<FewShotRow> out;
  for (double ratio : ratios) {
    pipeline::Dataset d = ds;
    d.train = few_shot_drop(ds.train, target_behavior, ratio, cfg.seed);
    const auto run = pipeline::train_all(cfg, d);
    out.push_back({ratio, count_behavior(d.train, target_behavior), evaluate(run.stage3, ds.test, ks, eval_seed)});
  }
  return out;
}

// ---------------------------------------------------------------- sweep

enum class SweepAxis { rho, sigma, T, stride, omega };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "rho") return SweepAxis::rho;
  if (s == "sigma") return SweepAxis::sigma;
  if (s == "T") return SweepAxis::T;
  if (s == "stride" || s == "dt") return SweepAxis::stride;
  if (s == "omega") return SweepAxis::omega;
  throw ConfigError("unknown sweep axis '" + s + "' (expected rho, sigma, T, stride or omega)");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::rho: return "rho";
    case SweepAxis::sigma: return "sigma";
    case SweepAxis::T: return "T";
    case SweepAxis::stride: return "stride";
    case SweepAxis::omega: return "omega";
  }
  return "?";
}

inline pipeline::PipelineConfig with_axis(pipeline::PipelineConfig c, SweepAxis a, double v) {
  switch (a) {
    case SweepAxis::rho: c.train.rho = v; break;
    case SweepAxis::sigma: c.train.sigma = v; break;
    case SweepAxis::T: c.T = static_cast<int>(v); break;
    case SweepAxis::stride: c.guidance.stride = static_cast<int>(v); break;
    case SweepAxis::omega: c.guidance.omega = v; break;
  }
  if ((a == SweepAxis::T || a == SweepAxis::stride) && v != std::floor(v)) throw ConfigError(to_string(a) + " must be an integer");
  c.validate();
  return c;
}

struct SweepRow {
  double value = 0.0;
  std::optional<EvalReport> report;  // empty when the value was skipped
  std::string skipped_reason;
};

// Full train/eval per value with shared seeds. Stages whose inputs the axis
// does not touch are trained once and reused: the same seeds would
// reproduce them bit-for-bit.
inline std::vector<SweepRow> sweep(SweepAxis axis, const std::vector<double>& values, const pipeline::PipelineConfig& base,
                                   const pipeline::Dataset& ds, std::uint64_t eval_seed, std::ostream* warn = &std::cerr,
                                   const std::vector<int>& ks = {10, 20}) {
  std::vector<SweepRow> out;
  std::optional<Model> stage1, stage2;
  const bool reuse1 = axis == SweepAxis::T || axis == SweepAxis::stride || axis == SweepAxis::omega;
  const bool reuse2 = axis == SweepAxis::stride || axis == SweepAxis::omega;
  for (double v : values) {
    SweepRow row;
    row.value = v;
    pipeline::PipelineConfig cfg;
    try {
      cfg = with_axis(base, axis, v);
    } catch (const ConfigError& e) {
      row.skipped_reason = e.what();
      if (warn) *warn << "warning: skipping " << to_string(axis) << "=" << format_double(v) << ": " << e.what() << '\n';
      out.push_back(std::move(row));
      continue;
    }
    Model m(cfg, ds.vocab());
    if (reuse2 && stage2) {
      m = stage2->clone();
    } else if (reuse1 && stage1) {
      m = stage1->clone();
    } else {
      pipeline::stage1_pretrain(m, ds.train);
      if (reuse1) stage1 = m.clone();
    }
    if (m.stage < 2) {
      m.cfg = cfg;
      m.schedule = diffusion::make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
      pipeline::stage2_train_ldm(m, ds.train);
      if (reuse2) stage2 = m.clone();
    }
    m.cfg = cfg;
    pipeline::stage3_finetune(m, ds.train);
    row.report = evaluate(m, ds.test, ks, eval_seed);
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string sweep_table(SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << to_string(axis);
  std::vector<int> ks;
  for (const auto& r : rows)
    if (r.report) {
      ks = r.report->ks;
      break;
    }
  for (int K : ks) os << "\trecall@" << K << "\tndcg@" << K;
  os << '\n';
  for (const auto& r : rows) {
    os << format_double(r.value);
    if (!r.report) {
      os << "\tskipped: " << r.skipped_reason << '\n';
      continue;
    }
    for (int K : ks) os << '\t' << format_double(r.report->recall(K)) << '\t' << format_double(r.report->ndcg(K));
    os << '\n';
  }
  return os.str();
}

struct PlotSeries {
  std::string name;
  std::vector<double> y;  // in [0, 1]
};

// Standalone SVG line chart over categorical x positions, y axis [0, 1].
inline std::string line_plot_svg(const std::string& title, const std::string& xlabel, const std::vector<std::string>& labels,
                                 const std::vector<PlotSeries>& series) {
  const double W = 480, H = 320, left = 60, right = 20, top = 30, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\">" << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = top + ph - ph * i / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << format_double(i / 4.0) << "</text>\n";
  }
  const std::size_t n = labels.size();
  auto xpos = [&](std::size_t i) {
    return n <= 1 ? left + pw / 2 : left + pw * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  for (std::size_t i = 0; i < n; ++i)
    os << "<text x=\"" << xpos(i) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << labels[i] << "</text>\n";
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 4];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) os << (i ? " " : "") << xpos(i) << "," << top + ph - ph * series[s].y[i];
    os << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i)
      os << "<circle cx=\"" << xpos(i) << "\" cy=\"" << top + ph - ph * series[s].y[i] << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    os << "<text x=\"" << left + 10 << "\" y=\"" << top + 14 + 14 * static_cast<double>(s) << "\" fill=\"" << c << "\">"
       << series[s].name << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

inline std::string sweep_svg(SweepAxis axis, const std::vector<SweepRow>& rows, int K = 10) {
  std::vector<std::string> labels;
  std::vector<PlotSeries> series = {{"Recall@" + std::to_string(K), {}}, {"NDCG@" + std::to_string(K), {}}};
  for (const auto& r : rows) {
    if (!r.report) continue;
    labels.push_back(format_double(r.value));
    series[0].y.push_back(r.report->recall(K));
    series[1].y.push_back(r.report->ndcg(K));
  }
  return line_plot_svg("sweep over " + to_string(axis), to_string(axis), labels, series);
}

// ---------------------------------------------------------------- gradient check

struct GradGroup {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::string selector;
  std::vector<GradGroup> groups;
  double max_rel_error = 0.0;

  bool pass(double tol) const { return max_rel_error <= tol; }

  std::string format() const {
    std::ostringstream os;
    for (const auto& g : groups) os << selector << '\t' << g.name << '\t' << g.checked << '\t' << format_double(g.max_rel_error) << '\n';
    os << selector << "\tmax\t-\t" << format_double(max_rel_error) << '\n';
    return os.str();
  }
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kRelFloor = 1e-5;

// Central differences on up to `per_param` deterministically chosen entries
// of every parameter. The loss closure must rebuild the graph on each call.
inline GradCheckReport check_gradients(const std::string& selector, const std::function<Var(void)>& loss_fn,
                                       const nn::ParamList& params, std::uint64_t seed, std::size_t per_param = 16) {
  nn::set_trainable(params, true);
  nn::zero_grad(params);
  ag::backward(loss_fn());
  GradCheckReport rep;
  rep.selector = selector;
  Rng rng = make_rng(seed, Stream::grad_check);
  for (const auto& p : params) {
    Matrix& w = p.var.ptr()->value;
    const Matrix analytic = p.var.grad();
    GradGroup g{p.name, 0.0, 0};
    const auto n = static_cast<std::size_t>(w.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(idx, rng);
    idx.resize(std::min(n, per_param));
    for (std::size_t flat : idx) {
      double& x = w.data()[flat];
      const double orig = x;
      x = orig + kFdStep;
      const double fp = loss_fn().scalar();
      x = orig - kFdStep;
      const double fm = loss_fn().scalar();
      x = orig;
      const double numeric = (fp - fm) / (2.0 * kFdStep);
      const double a = analytic.data()[flat];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kRelFloor});
      g.max_rel_error = std::max(g.max_rel_error, rel);
      ++g.checked;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, g.max_rel_error);
    rep.groups.push_back(std::move(g));
  }
  nn::zero_grad(params);
  return rep;
}

namespace detail {

// Moves every parameter off its initialization (zero-initialized heads and
// modulation layers would otherwise hide gradient paths).
inline void randomize(const nn::ParamList& params, Rng& rng, double stddev = 0.3) {
  for (const auto& p : params) p.var.ptr()->value = normal_matrix(p.var.rows(), p.var.cols(), stddev, rng);
}

inline nn::ParamList with_prefix(const nn::ParamList& in, const std::string& prefix) {
  nn::ParamList out;
  for (const auto& p : in)
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& grad_check_selectors() {
  static const std::vector<std::string> s = {"linear", "barope-attention", "decoder", "mcgln-block", "mbae", "denoiser"};
  return s;
}

// Double precision, d = 8 toy modules.
inline GradCheckReport grad_check(const std::string& selector, std::uint64_t seed = 1) {
  const int d = 8, B = 3;
  Rng rng = make_rng(seed, Stream::grad_check, 1);
  const data::Vocab vocab{12, B};

  if (selector == "linear") {
    nn::Linear lin(5, 3, rng);
    nn::ParamList ps;
    lin.collect("linear", ps);
    detail::randomize(ps, rng);
    const Var x = ag::constant(normal_matrix(4, 5, 1.0, rng));
    const Var r = ag::constant(normal_matrix(4, 3, 1.0, rng));
    return check_gradients(selector, [&] { return ag::sum_all(ag::mul(lin(x), r)); }, ps, seed);
  }

  auto small_model = [&](int layers) {
    mbae::ModelConfig mc;
    mc.d = d;
    mc.heads = 2;
    mc.layers = layers;
    mc.ffn_hidden = 16;
    mc.dropout = 0.0;
    mc.max_len = 4;
    mc.position_mode = mbae::PositionMode::barope;
    return mbae::Mbae(mc, vocab, rng);
  };

  if (selector == "barope-attention") {
    // One attention sublayer: rotary + behavior scaling on Q and K.
    mbae::Mbae model = small_model(1);
    auto& layer = model.layers()[0];
    const std::vector<data::Sequence> seqs = {
        data::make_sequence(0, {3, 7}, {0, 2}, 3, vocab),
        data::make_sequence(1, {1, 4, 9}, {1, vocab.mask_token(), 0}, 3, vocab)};
    const Var x = ag::constant(normal_matrix(6, d, 1.0, rng));
    const Var r = ag::constant(normal_matrix(6, d, 1.0, rng));
    const std::vector<double> pos = {0, 1, 2, 0, 1, 2};
    const std::vector<int> starts = {1, 0};
    nn::ParamList ps = {{"attn.wq", layer.wq}, {"attn.wk", layer.wk}, {"attn.wv", layer.wv}, {"attn.wo", layer.wo},
                        {"attn.behavior_table", model.behavior_table()}};
    model.behavior_mod_net().collect("attn.behavior_mod", ps);
    auto loss = [&] {
      const Var s = attn::expand_pairs(model.behavior_scales(seqs));
      const Var q = ag::mul(attn::rotary(ag::matmul(x, layer.wq), pos, 2, model.frequencies()), s);
      const Var k = ag::mul(attn::rotary(ag::matmul(x, layer.wk), pos, 2, model.frequencies()), s);
      const Var ctx = attn::attention_core(q, k, ag::matmul(x, layer.wv), 2, 3, starts);
      return ag::sum_all(ag::mul(ag::matmul(ctx, layer.wo), r));
    };
    return check_gradients(selector, loss, ps, seed);
  }

  if (selector == "decoder") {
    mbae::Mbae model = small_model(1);
    const Var z = ag::constant(normal_matrix(5, d, 1.0, rng));
    const std::vector<int> targets = {0, 3, 11, 5, 3};
    nn::ParamList ps = model.decoder_params();
    ps.push_back({"encoder.item_table", model.item_table()});
    return check_gradients(selector, [&] { return mbae::mbae_loss(model.decode(z), targets); }, ps, seed);
  }

  if (selector == "mbae") {
    // Cloze loss on 2-token sequences through the full encoder and decoder.
    mbae::Mbae model = small_model(2);
    const int mask = vocab.mask_token();
    data::MaskedBatch batch;
    batch.sequences = {data::make_sequence(0, {mask, 7}, {1, 2}, 2, vocab),
                       data::make_sequence(1, {4, mask}, {0, mask}, 2, vocab)};
    batch.masked_positions = {{0}, {1}};
    batch.target_items = {{3}, {9}};
    batch.behavior_masked = {{0}, {1}};
    return check_gradients(selector, [&] { return mbae::cloze_forward(model, batch, {}).loss; }, model.params(), seed);
  }

  denoise::DenoiserConfig dc;
  dc.d = d;
  dc.depth = 2;
  dc.expert_hidden = 16;
  dc.num_behaviors = B;
  dc.shared_experts = 2;
  dc.private_experts = 1;
  denoise::Denoiser net(dc, rng);
  detail::randomize(net.params(), rng);
  const denoise::Behaviors beh = {0, std::nullopt, 2, 0, std::nullopt};
  const Var zt = ag::constant(normal_matrix(5, d, 1.0, rng));
  const Var za = ag::constant(normal_matrix(5, d, 1.0, rng));
  const std::vector<int> t = {1, 50, 200, 7, 120};

  if (selector == "mcgln-block") {
    const Var r = ag::constant(normal_matrix(5, d, 1.0, rng));
    const auto& blk = net.blocks()[0];
    nn::ParamList ps;
    blk.collect("block", ps);
    ps.push_back({"denoiser.behavior_table", net.behavior_table()});
    auto loss = [&] {
      const Var cond = ag::add(net.timestep_embed(t), net.behavior_embed(beh));
      return ag::sum_all(ag::mul(net.block_forward(blk, zt, za, cond, beh), r));
    };
    return check_gradients(selector, loss, ps, seed);
  }

  if (selector == "denoiser") {
    const Var eps = ag::constant(normal_matrix(5, d, 1.0, rng));
    return check_gradients(selector, [&] { return ag::mse(net.forward(zt, t, za, beh), eps); }, net.params(), seed);
  }

  throw UsageError("unknown grad-check module '" + selector + "'");
}

}  // namespace fatsmb::eval
