#pragma once

// Command-line front end. Every subcommand writes `resolved_config.txt` (all
// effective keys) into --out before doing any work. Configuration precedence:
// explicit flags > --set key=value > --config file > checkpoint manifest >
// built-in defaults.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "fatsmb/eval.hpp"
#include "fatsmb/stats.hpp"

namespace fatsmb::cli {

namespace fs = std::filesystem;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<long long> seed;
  std::string out_dir = "out";
};

struct Args {
  Common common;
  std::string data, checkpoint;
  std::optional<int> epochs;
  int user = -1;
  int behavior = -1;
  int k = 10;
  bool holdout = false;
  bool record = false;
  bool baseline = false;
  std::string ks = "10,20";
  std::string ratios = "0,0.2,0.5,1";
  std::string axis, values;
  std::string module = "all";
  double tol = 1e-4;
  std::string behavior_names;
  // gen-data
  data::SyntheticSpec spec;
  std::string freqs;
};

namespace detail {

inline std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& tok : split(s, ',')) {
    const auto t = trim(tok);
    if (t.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw UsageError(what + ": not a number: '" + t + "'");
    }
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

inline std::vector<int> parse_ints(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (double v : parse_doubles(s, what)) {
    if (v != std::floor(v)) throw UsageError(what + ": expected integers");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

// Resolved config: base (defaults or a checkpoint's), then file, then --set,
// then --seed.
inline KeyValues layered(const Common& c, const KeyValues& base) {
  KeyValues kv = base;
  if (!c.config_path.empty()) kv.merge(KeyValues::load(c.config_path));
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
    kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  if (c.seed) kv.set("seed", *c.seed);
  return kv;
}

inline KeyValues config_part(const KeyValues& manifest) {
  KeyValues out;
  for (const auto& [k, v] : manifest.entries())
    if (k.rfind("checkpoint.", 0) != 0) out.set(k, v);
  return out;
}

}  // namespace detail

// Runs one command; returns the process exit status.
class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int operator()(const std::string& cmd, Args& a) {
    const fs::path out_dir = a.common.out_dir;
    fs::create_directories(out_dir);
    if (cmd == "gen-data") return gen_data(a, out_dir);
    if (cmd == "entropy") return entropy(a, out_dir);
    if (cmd == "grad-check") return grad_check(a, out_dir);
    if (cmd == "pretrain") return train_stage(a, out_dir, 1);
    if (cmd == "train-diffusion") return train_stage(a, out_dir, 2);
    if (cmd == "finetune") return train_stage(a, out_dir, 3);
    if (cmd == "infer") return infer(a, out_dir);
    if (cmd == "evaluate") return evaluate(a, out_dir);
    if (cmd == "few-shot") return few_shot(a, out_dir);
    if (cmd == "sweep") return sweep(a, out_dir);
    if (cmd == "attn-dump") return attn_dump(a, out_dir);
    throw UsageError("unknown subcommand " + cmd);
  }

 private:
  std::ostream& out_;
  std::ostream& err_;

  void echo(const fs::path& dir, const std::string& cmd, const KeyValues& cfg, const KeyValues& extra) {
    KeyValues kv = cfg;
    kv.set("command", cmd);
    kv.merge(extra);
    detail::write_file(dir / "resolved_config.txt", kv.to_string());
  }

  static void need(const std::string& value, const std::string& flag) {
    if (value.empty()) throw UsageError("missing required option " + flag);
  }

  // Config for a fresh run: defaults < file < --set < flags.
  static pipeline::PipelineConfig fresh_config(const Args& a) {
    return pipeline::PipelineConfig::from_key_values(detail::layered(a.common, pipeline::PipelineConfig().to_key_values()));
  }

  // A checkpoint with file/--set/--seed overrides applied on top of its own
  // config; architecture changes surface as shape mismatches.
  static pipeline::Model load_model(const Args& a) {
    need(a.checkpoint, "--checkpoint");
    const KeyValues manifest = ckpt::load_manifest(a.checkpoint);
    auto cfg = pipeline::PipelineConfig::from_key_values(detail::layered(a.common, detail::config_part(manifest)));
    pipeline::Model stored = pipeline::Model::load(a.checkpoint);
    pipeline::Model m(cfg, stored.vocab);
    m.stage = stored.stage;
    ckpt::assign(ckpt::load_tensors(a.checkpoint), m.params());
    return m;
  }

  int gen_data(Args& a, const fs::path& dir) {
    auto spec = a.spec;
    if (a.common.seed) spec.seed = static_cast<std::uint64_t>(*a.common.seed);
    if (!a.freqs.empty()) spec.behavior_frequencies = detail::parse_doubles(a.freqs, "--freqs");
    else if (static_cast<int>(spec.behavior_frequencies.size()) != spec.num_behaviors)
      spec.behavior_frequencies.assign(static_cast<std::size_t>(spec.num_behaviors), 1.0 / spec.num_behaviors);
    spec.validate();
    KeyValues kv;
    kv.set("users", spec.num_users);
    kv.set("items", spec.num_items);
    kv.set("behaviors", spec.num_behaviors);
    kv.set("archetypes", spec.archetypes);
    kv.set("cluster_size", spec.cluster_size);
    kv.set("min_len", spec.min_len);
    kv.set("max_len", spec.max_len);
    std::string freqs;
    for (double f : spec.behavior_frequencies) freqs += (freqs.empty() ? "" : ",") + format_double(f);
    kv.set("freqs", freqs);
    kv.set("seed", spec.seed);
    echo(dir, "gen-data", kv, {});
    const auto ds = data::gen_synthetic(spec);
    const fs::path data_path = dir / "interactions.tsv";
    {
      std::ofstream f(data_path, std::ios::binary);
      data::write_interactions(f, ds.interactions);
    }
    data::write_header(data::header_path_for(data_path.string()), ds.header);
    std::ofstream mf(dir / "manifest.txt", std::ios::binary);
    data::write_manifest(mf, ds.manifest);
    std::size_t n = 0;
    for (const auto& u : ds.interactions) n += u.events.size();
    out_ << "wrote " << n << " interactions for " << ds.interactions.size() << " users to " << data_path.string() << '\n';
    return 0;
  }

  int entropy(Args& a, const fs::path& dir) {
    need(a.data, "--data");
    KeyValues extra;
    extra.set("data", a.data);
    echo(dir, "entropy", {}, extra);
    const auto header = data::read_header(data::header_path_for(a.data));
    const auto g = data::load_interactions(a.data, header.vocab());
    const auto rep = stats::entropy_report(stats::joint_counts(data::flatten(g)));
    const std::string text = stats::format_report(rep);
    out_ << text;
    if (a.record) out_ << stats::format_record(rep) << '\n';
    detail::write_file(dir / "entropy.txt", text);
    return 0;
  }

  int grad_check(Args& a, const fs::path& dir) {
    KeyValues extra;
    extra.set("module", a.module);
    extra.set("tol", a.tol);
    const auto seed = a.common.seed ? static_cast<std::uint64_t>(*a.common.seed) : 1;
    extra.set("seed", seed);
    echo(dir, "grad-check", {}, extra);
    std::vector<std::string> mods;
    if (a.module == "all") mods = eval::grad_check_selectors();
    else mods = {a.module};
    std::string text;
    bool ok = true;
    for (const auto& m : mods) {
      const auto rep = eval::grad_check(m, seed);
      text += rep.format();
      ok = ok && rep.pass(a.tol);
    }
    out_ << text;
    detail::write_file(dir / "grad_check.txt", text);
    if (!ok) err_ << "gradient check failed: relative error above " << format_double(a.tol) << '\n';
    return ok ? 0 : 1;
  }

  int train_stage(Args& a, const fs::path& dir, int stage) {
    need(a.data, "--data");
    static const char* names[] = {"", "pretrain", "train-diffusion", "finetune"};
    static const char* epoch_keys[] = {"", "train.stage1_epochs", "train.stage2_epochs", "train.stage3_epochs"};
    if (a.epochs) a.common.sets.push_back(std::string(epoch_keys[stage]) + "=" + std::to_string(*a.epochs));
    auto m = stage == 1 ? std::optional<pipeline::Model>() : std::optional<pipeline::Model>(load_model(a));
    const auto cfg = m ? m->cfg : fresh_config(a);
    KeyValues extra;
    extra.set("data", a.data);
    if (m) extra.set("checkpoint", a.checkpoint);
    echo(dir, names[stage], cfg.to_key_values(), extra);
    const auto ds = pipeline::load_dataset(a.data, cfg.seq_len, cfg.min_interactions);
    if (!m) m.emplace(cfg, ds.vocab());
    m->require_vocab(ds.vocab());
    std::ofstream log(dir / "train_log.txt", std::ios::binary);
    pipeline::TrainLog tl;
    if (stage == 1) tl = pipeline::stage1_pretrain(*m, ds.train, &log);
    if (stage == 2) tl = pipeline::stage2_train_ldm(*m, ds.train, &log);
    if (stage == 3) tl = pipeline::stage3_finetune(*m, ds.train, &log);
    m->save((dir / "checkpoint").string());
    if (!tl.empty())
      out_ << names[stage] << ": " << tl.size() << " epochs, final loss " << format_double(tl.back().loss) << ", metric "
           << format_double(tl.back().metric) << '\n';
    out_ << "checkpoint written to " << (dir / "checkpoint").string() << '\n';
    return 0;
  }

  int infer(Args& a, const fs::path& dir) {
    need(a.data, "--data");
    if (a.user < 0) throw UsageError("missing required option --user");
    if (a.behavior < 0) throw UsageError("missing required option --behavior");
    auto m = load_model(a);
    KeyValues extra;
    extra.set("data", a.data);
    extra.set("checkpoint", a.checkpoint);
    extra.set("user", a.user);
    extra.set("behavior", a.behavior);
    extra.set("k", a.k);
    extra.set("holdout", a.holdout);
    echo(dir, "infer", m.cfg.to_key_values(), extra);
    m.require_stage(2);
    const auto header = data::read_header(data::header_path_for(a.data));
    m.require_vocab(header.vocab());
    const auto g = data::load_interactions(a.data, header.vocab());
    const auto it = std::find_if(g.begin(), g.end(), [&](const data::UserHistory& u) { return static_cast<int>(u.user) == a.user; });
    if (it == g.end()) throw UsageError("user " + std::to_string(a.user) + " has no interactions in " + a.data);
    std::vector<data::Interaction> hist = it->events;
    if (a.holdout) {
      if (hist.size() < 2) throw UsageError("--holdout needs at least two interactions");
      hist.pop_back();
    }
    const auto prefix = pipeline::query_prefix(it->user, hist, m.cfg.seq_len, m.vocab, m.vocab.mask_token());
    const auto items = pipeline::infer_next_item(m, prefix, a.behavior, a.k, m.cfg.seed, &err_);
    std::ostringstream os;
    for (std::size_t i = 0; i < items.size(); ++i) os << i + 1 << '\t' << items[i] << '\n';
    out_ << os.str();
    detail::write_file(dir / ("infer_u" + std::to_string(a.user) + "_b" + std::to_string(a.behavior) + ".txt"), os.str());
    return 0;
  }

  int evaluate(Args& a, const fs::path& dir) {
    need(a.data, "--data");
    auto m = load_model(a);
    const auto ks = detail::parse_ints(a.ks, "--ks");
    KeyValues extra;
    extra.set("data", a.data);
    extra.set("checkpoint", a.checkpoint);
    extra.set("ks", a.ks);
    extra.set("baseline", a.baseline);
    echo(dir, "evaluate", m.cfg.to_key_values(), extra);
    m.require_stage(a.baseline ? 1 : 2);
    const auto ds = pipeline::load_dataset(a.data, m.cfg.seq_len, m.cfg.min_interactions);
    m.require_vocab(ds.vocab());
    const auto rep = eval::evaluate(m, ds.test, ks, m.cfg.seed,
                                    a.baseline ? pipeline::ScoreMode::agnostic : pipeline::ScoreMode::diffusion);
    const std::string text = rep.table() + "\n" + rep.to_key_values().to_string();
    out_ << text;
    detail::write_file(dir / "report.txt", text);
    detail::write_file(dir / "rankings.tsv", rep.rankings(ds.test));
    return 0;
  }

  int few_shot(Args& a, const fs::path& dir) {
    need(a.data, "--data");
    if (a.behavior < 0) throw UsageError("missing required option --behavior");
    const auto cfg = fresh_config(a);
    const auto ratios = detail::parse_doubles(a.ratios, "--ratios");
    const auto ks = detail::parse_ints(a.ks, "--ks");
    KeyValues extra;
    extra.set("data", a.data);
    extra.set("behavior", a.behavior);
    extra.set("ratios", a.ratios);
    extra.set("ks", a.ks);
    echo(dir, "few-shot", cfg.to_key_values(), extra);
    const auto ds = pipeline::load_dataset(a.data, cfg.seq_len, cfg.min_interactions);
    const auto rows = eval::few_shot(cfg, ds, a.behavior, ratios, cfg.seed, ks);
    std::ostringstream os;
    os << "ratio\tremaining";
    for (int K : ks) os << "\trecall@" << K << "\tndcg@" << K;
    os << '\n';
    std::vector<std::string> labels;
    eval::PlotSeries rs{"Recall@" + std::to_string(ks.front()), {}}, ns{"NDCG@" + std::to_string(ks.front()), {}};
    for (const auto& r : rows) {
      os << format_double(r.ratio) << '\t' << r.remaining;
      for (int K : ks) os << '\t' << format_double(r.report.recall(K, a.behavior)) << '\t' << format_double(r.report.ndcg(K, a.behavior));
      os << '\n';
      labels.push_back(format_double(r.ratio));
      rs.y.push_back(r.report.recall(ks.front(), a.behavior));
      ns.y.push_back(r.report.ndcg(ks.front(), a.behavior));
    }
    out_ << os.str();
    detail::write_file(dir / "few_shot.txt", os.str());
    detail::write_file(dir / "few_shot.svg",
                       eval::line_plot_svg("behavior " + std::to_string(a.behavior) + " omission", "ratio", labels, {rs, ns}));
    return 0;
  }

  int sweep(Args& a, const fs::path& dir) {
    need(a.data, "--data");
    need(a.axis, "--axis");
    need(a.values, "--values");
    const auto axis = eval::parse_axis(a.axis);
    const auto cfg = fresh_config(a);
    const auto values = detail::parse_doubles(a.values, "--values");
    const auto ks = detail::parse_ints(a.ks, "--ks");
    KeyValues extra;
    extra.set("data", a.data);
    extra.set("axis", a.axis);
    extra.set("values", a.values);
    extra.set("ks", a.ks);
    echo(dir, "sweep", cfg.to_key_values(), extra);
    const auto ds = pipeline::load_dataset(a.data, cfg.seq_len, cfg.min_interactions);
    const auto rows = eval::sweep(axis, values, cfg, ds, cfg.seed, &err_, ks);
    const std::string table = eval::sweep_table(axis, rows);
    out_ << table;
    const std::string stem = "sweep_" + eval::to_string(axis);
    detail::write_file(dir / (stem + ".txt"), table);
    detail::write_file(dir / (stem + ".svg"), eval::sweep_svg(axis, rows, ks.front()));
    return 0;
  }

  int attn_dump(Args& a, const fs::path& dir) {
    need(a.data, "--data");
    if (a.user < 0) throw UsageError("missing required option --user");
    auto m = load_model(a);
    KeyValues extra;
    extra.set("data", a.data);
    extra.set("checkpoint", a.checkpoint);
    extra.set("user", a.user);
    extra.set("behavior_names", a.behavior_names);
    echo(dir, "attn-dump", m.cfg.to_key_values(), extra);
    const auto header = data::read_header(data::header_path_for(a.data));
    m.require_vocab(header.vocab());
    const auto g = data::load_interactions(a.data, header.vocab());
    const auto it = std::find_if(g.begin(), g.end(), [&](const data::UserHistory& u) { return static_cast<int>(u.user) == a.user; });
    if (it == g.end()) throw UsageError("user " + std::to_string(a.user) + " has no interactions in " + a.data);
    const auto seq = data::build_sequences({*it}, m.cfg.seq_len, m.vocab).front();
    std::vector<std::string> names;
    if (!a.behavior_names.empty())
      for (const auto& n : split(a.behavior_names, ',')) names.push_back(trim(n));
    const Matrix maps = m.ae.attention_maps(seq);
    std::ostringstream grid, legend;
    mbae::write_attention_grid(grid, maps);
    for (const auto& l : mbae::attention_legend(seq, m.vocab, names)) legend << l << '\n';
    const std::string stem = "attention_u" + std::to_string(a.user);
    detail::write_file(dir / (stem + ".txt"), grid.str());
    detail::write_file(dir / (stem + ".legend.txt"), legend.str());
    out_ << "attention map written to " << (dir / (stem + ".txt")).string() << '\n';
    return 0;
  }
};

inline void add_common(CLI::App* sc, Args& a) {
  sc->add_option("--config", a.common.config_path, "key=value configuration file")->check(CLI::ExistingFile);
  sc->add_option("--set", a.common.sets, "override one configuration key (key=value); repeatable");
  sc->add_option("--seed", a.common.seed, "master seed; every random stream derives from it");
  sc->add_option("--out", a.common.out_dir, "output directory")->capture_default_str();
}

// argv-style entry point; args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"FatsMB: multi-behavior sequential recommendation with latent preference diffusion", "fatsmb"};
  app.require_subcommand(1, 1);
  Args a;
  std::vector<CLI::App*> subs;
  auto sub = [&](const std::string& name, const std::string& help) {
    auto* sc = app.add_subcommand(name, help);
    add_common(sc, a);
    subs.push_back(sc);
    return sc;
  };

  auto* gen = sub("gen-data", "generate a planted synthetic dataset");
  gen->add_option("--users", a.spec.num_users)->capture_default_str();
  gen->add_option("--items", a.spec.num_items)->capture_default_str();
  gen->add_option("--behaviors", a.spec.num_behaviors)->capture_default_str();
  gen->add_option("--archetypes", a.spec.archetypes)->capture_default_str();
  gen->add_option("--cluster-size", a.spec.cluster_size)->capture_default_str();
  gen->add_option("--min-len", a.spec.min_len)->capture_default_str();
  gen->add_option("--max-len", a.spec.max_len)->capture_default_str();
  gen->add_option("--freqs", a.freqs, "comma-separated behavior frequencies (default 0.55,0.2,0.15,0.1)");

  auto* ent = sub("entropy", "item/behavior entropy diagnostics");
  ent->add_option("--data", a.data, "interaction file")->required();
  ent->add_flag("--record", a.record, "also print a single-line record");

  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"pretrain", "stage 1: Cloze pretraining of the autoencoder"},
           {"train-diffusion", "stage 2: latent diffusion training (frozen autoencoder)"},
           {"finetune", "stage 3: decoder fine-tuning on guided samples"}}) {
    auto* sc = sub(name, help);
    sc->add_option("--data", a.data, "interaction file")->required();
    sc->add_option("--epochs", a.epochs, "epochs for this stage");
    if (name != "pretrain") sc->add_option("--checkpoint", a.checkpoint, "checkpoint from the previous stage")->required();
  }

  auto* inf = sub("infer", "top-K next items for one user under a target behavior");
  inf->add_option("--data", a.data, "interaction file")->required();
  inf->add_option("--checkpoint", a.checkpoint)->required();
  inf->add_option("--user", a.user)->required();
  inf->add_option("--behavior", a.behavior)->required();
  inf->add_option("--k", a.k)->capture_default_str();
  inf->add_flag("--holdout", a.holdout, "predict the user's held-out last interaction instead of the next one");

  auto* ev = sub("evaluate", "leave-one-out Recall@K / NDCG@K");
  ev->add_option("--data", a.data, "interaction file")->required();
  ev->add_option("--checkpoint", a.checkpoint)->required();
  ev->add_option("--ks", a.ks)->capture_default_str();
  ev->add_flag("--baseline", a.baseline, "decode the behavior-agnostic latent directly (no diffusion)");

  auto* fsh = sub("few-shot", "retrain with a fraction of one behavior's interactions removed");
  fsh->add_option("--data", a.data, "interaction file")->required();
  fsh->add_option("--behavior", a.behavior)->required();
  fsh->add_option("--ratios", a.ratios)->capture_default_str();
  fsh->add_option("--ks", a.ks)->capture_default_str();

  auto* sw = sub("sweep", "hyperparameter sweep over rho, sigma, T, stride or omega");
  sw->add_option("--data", a.data, "interaction file")->required();
  sw->add_option("--axis", a.axis)->required();
  sw->add_option("--values", a.values, "comma-separated values")->required();
  sw->add_option("--ks", a.ks)->capture_default_str();

  auto* ad = sub("attn-dump", "layer/head-averaged attention map for one user");
  ad->add_option("--data", a.data, "interaction file")->required();
  ad->add_option("--checkpoint", a.checkpoint)->required();
  ad->add_option("--user", a.user)->required();
  ad->add_option("--behavior-names", a.behavior_names, "comma-separated labels for the legend");

  auto* gc = sub("grad-check", "finite-difference gradient check");
  gc->add_option("--module", a.module, "all, linear, barope-attention, decoder, mcgln-block, mbae or denoiser")->capture_default_str();
  gc->add_option("--tol", a.tol)->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  std::string cmd;
  for (auto* sc : subs)
    if (sc->parsed()) cmd = sc->get_name();
  try {
    Runner runner(out, err);
    return runner(cmd, a);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\nrun `fatsmb " << cmd << " --help` for options\n";
    return 2;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace fatsmb::cli
