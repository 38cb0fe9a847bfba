#pragma once

// Interaction ingestion, fixed-length multi-behavior sequences, Cloze masking,
// leave-one-out splits, and the planted synthetic generator.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fatsmb/common.hpp"
#include "fatsmb/config.hpp"

namespace fatsmb::data {

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::uint32_t behavior = 0;
  std::uint64_t timestamp = 0;
  std::size_t line = 0;  // 1-based position in the source file; tiebreak

  friend bool operator==(const Interaction& a, const Interaction& b) {
    return a.user == b.user && a.item == b.item && a.behavior == b.behavior && a.timestamp == b.timestamp;
  }
};

// Reserved tokens follow both vocabularies: pad = max(|V|, |B|), mask = pad + 1.
struct Vocab {
  int num_items = 0;
  int num_behaviors = 0;

  int pad_token() const { return std::max(num_items, num_behaviors); }
  int mask_token() const { return pad_token() + 1; }
  bool is_item(int tok) const { return tok >= 0 && tok < num_items; }
  bool is_behavior(int tok) const { return tok >= 0 && tok < num_behaviors; }

  // Embedding-table rows: real ids first, then pad, then mask.
  int item_row(int tok) const {
    if (is_item(tok)) return tok;
    if (tok == pad_token()) return num_items;
    if (tok == mask_token()) return num_items + 1;
    throw Error("item token out of table range: " + std::to_string(tok));
  }
  int behavior_row(int tok) const {
    if (is_behavior(tok)) return tok;
    if (tok == pad_token()) return num_behaviors;
    if (tok == mask_token()) return num_behaviors + 1;
    throw Error("behavior token out of table range: " + std::to_string(tok));
  }
};

struct DatasetHeader {
  int num_users = 0;
  int num_items = 0;
  int num_behaviors = 0;

  Vocab vocab() const { return {num_items, num_behaviors}; }
};

struct UserHistory {
  std::uint32_t user = 0;
  std::vector<Interaction> events;  // sorted by (timestamp, line)
};
using Grouped = std::vector<UserHistory>;  // ascending user id

struct Sequence {
  std::uint32_t user = 0;
  std::vector<int> items;
  std::vector<int> behaviors;
  int length_real = 0;

  int length() const { return static_cast<int>(items.size()); }
  int first_real() const { return length() - length_real; }
};

struct MaskedBatch {
  std::vector<Sequence> sequences;
  std::vector<std::vector<int>> masked_positions;
  std::vector<std::vector<int>> target_items;
  std::vector<std::vector<char>> behavior_masked;

  std::size_t total_masked() const {
    std::size_t n = 0;
    for (const auto& m : masked_positions) n += m.size();
    return n;
  }
};

struct NextItemExample {
  Sequence prefix;  // real history + query slot at index L-1
  int target_item = 0;
  int target_behavior = 0;
};

struct SplitResult {
  std::vector<NextItemExample> examples;
  std::size_t skipped = 0;
};

// ---------------------------------------------------------------- header / file io

inline std::string header_path_for(const std::string& data_path) { return data_path + ".header"; }

inline DatasetHeader read_header(const std::string& path) {
  const auto kv = KeyValues::load(path);
  DatasetHeader h;
  h.num_users = static_cast<int>(kv.integer("num_users"));
  h.num_items = static_cast<int>(kv.integer("num_items"));
  h.num_behaviors = static_cast<int>(kv.integer("num_behaviors"));
  if (h.num_items <= 0 || h.num_behaviors <= 0 || h.num_users < 0)
    throw ValidationError("header " + path + ": vocabulary sizes must be positive");
  return h;
}

inline void write_header(const std::string& path, const DatasetHeader& h) {
  KeyValues kv;
  kv.set("num_users", h.num_users);
  kv.set("num_items", h.num_items);
  kv.set("num_behaviors", h.num_behaviors);
  kv.save(path);
}

inline std::vector<Interaction> parse_interactions(std::istream& in) {
  std::vector<Interaction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4) throw ParseError("expected 4 tab-separated fields, got " + std::to_string(fields.size()), n);
    std::uint64_t v[4];
    for (int f = 0; f < 4; ++f) {
      const auto& s = fields[static_cast<std::size_t>(f)];
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v[f]);
      if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError("field " + std::to_string(f + 1) + " is not a non-negative integer: '" + s + "'", n);
    }
    if (v[0] > UINT32_MAX || v[1] > UINT32_MAX || v[2] > UINT32_MAX) throw ParseError("id exceeds 32 bits", n);
    out.push_back({static_cast<std::uint32_t>(v[0]), static_cast<std::uint32_t>(v[1]),
                   static_cast<std::uint32_t>(v[2]), v[3], n});
  }
  return out;
}

// Validates ids and groups by user; each group is ordered by (timestamp, line).
inline Grouped group_interactions(std::vector<Interaction> flat, const Vocab& vocab) {
  if (flat.empty()) throw EmptyDatasetError("no interactions");
  for (const auto& x : flat) {
    if (static_cast<int>(x.item) >= vocab.num_items)
      throw ValidationError("line " + std::to_string(x.line) + ": item id " + std::to_string(x.item) +
                            " out of range (num_items=" + std::to_string(vocab.num_items) + ")");
    if (static_cast<int>(x.behavior) >= vocab.num_behaviors)
      throw ValidationError("line " + std::to_string(x.line) + ": behavior id " + std::to_string(x.behavior) +
                            " out of range (num_behaviors=" + std::to_string(vocab.num_behaviors) + ")");
  }
  std::stable_sort(flat.begin(), flat.end(), [](const Interaction& a, const Interaction& b) {
    if (a.user != b.user) return a.user < b.user;
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.line < b.line;
  });
  Grouped out;
  for (const auto& x : flat) {
    if (out.empty() || out.back().user != x.user) out.push_back({x.user, {}});
    out.back().events.push_back(x);
  }
  return out;
}

inline Grouped load_interactions(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return group_interactions(parse_interactions(in), vocab);
}

inline std::vector<Interaction> flatten(const Grouped& g) {
  std::vector<Interaction> out;
  for (const auto& u : g) out.insert(out.end(), u.events.begin(), u.events.end());
  return out;
}

inline void write_interactions(std::ostream& out, const Grouped& g) {
  for (const auto& u : g)
    for (const auto& x : u.events) out << x.user << '\t' << x.item << '\t' << x.behavior << '\t' << x.timestamp << '\n';
}

// Drops users with fewer than `min_count` interactions.
inline Grouped filter_min_interactions(const Grouped& g, std::size_t min_count) {
  Grouped out;
  for (const auto& u : g)
    if (u.events.size() >= min_count) out.push_back(u);
  return out;
}

// Splits every user's final interaction off as the held-out test event.
inline std::pair<Grouped, Grouped> holdout_last(const Grouped& g) {
  Grouped train, test;
  for (const auto& u : g) {
    if (u.events.size() < 2) continue;
    train.push_back({u.user, {u.events.begin(), u.events.end() - 1}});
    test.push_back({u.user, {u.events.back()}});
  }
  return {train, test};
}

// ---------------------------------------------------------------- sequences

inline Sequence make_sequence(std::uint32_t user, const std::vector<int>& items, const std::vector<int>& behaviors,
                              int L, const Vocab& vocab) {
  const int n = static_cast<int>(items.size());
  const int keep = std::min(n, L);
  Sequence s;
  s.user = user;
  s.items.assign(static_cast<std::size_t>(L), vocab.pad_token());
  s.behaviors.assign(static_cast<std::size_t>(L), vocab.pad_token());
  for (int i = 0; i < keep; ++i) {
    s.items[static_cast<std::size_t>(L - keep + i)] = items[static_cast<std::size_t>(n - keep + i)];
    s.behaviors[static_cast<std::size_t>(L - keep + i)] = behaviors[static_cast<std::size_t>(n - keep + i)];
  }
  s.length_real = keep;
  return s;
}

inline std::vector<Sequence> build_sequences(const Grouped& g, int L, const Vocab& vocab) {
  if (L <= 0) throw ConfigError("sequence length L must be positive");
  std::vector<Sequence> out;
  out.reserve(g.size());
  for (const auto& u : g) {
    if (u.events.empty()) throw ValidationError("user " + std::to_string(u.user) + " has no interactions");
    std::vector<int> items, behaviors;
    for (const auto& x : u.events) {
      items.push_back(static_cast<int>(x.item));
      behaviors.push_back(static_cast<int>(x.behavior));
    }
    out.push_back(make_sequence(u.user, items, behaviors, L, vocab));
  }
  return out;
}

// Real (item, behavior) pairs of a sequence, oldest first.
inline std::vector<std::pair<int, int>> real_pairs(const Sequence& s) {
  std::vector<std::pair<int, int>> out;
  for (int i = s.first_real(); i < s.length(); ++i)
    out.emplace_back(s.items[static_cast<std::size_t>(i)], s.behaviors[static_cast<std::size_t>(i)]);
  return out;
}

// History followed by a query slot (item = mask, behavior = `slot_behavior`)
// at index L-1; history is truncated to the most recent L-1 pairs.
inline Sequence with_query_slot(std::uint32_t user, const std::vector<std::pair<int, int>>& history, int L,
                                const Vocab& vocab, int slot_behavior) {
  std::vector<int> items, behaviors;
  for (const auto& [i, b] : history) {
    items.push_back(i);
    behaviors.push_back(b);
  }
  items.push_back(vocab.mask_token());
  behaviors.push_back(slot_behavior);
  return make_sequence(user, items, behaviors, L, vocab);
}

inline SplitResult next_item_split(const std::vector<Sequence>& seqs, const Vocab& vocab) {
  SplitResult r;
  for (const auto& s : seqs) {
    if (s.length_real < 2) {
      ++r.skipped;
      continue;
    }
    auto pairs = real_pairs(s);
    const auto [item, behavior] = pairs.back();
    pairs.pop_back();
    r.examples.push_back({with_query_slot(s.user, pairs, s.length(), vocab, vocab.mask_token()), item, behavior});
  }
  return r;
}

// Cloze masking. Each real item is masked with probability rho; each masked
// position additionally masks its behavior with probability sigma. A sequence
// that draws no mask gets one uniformly chosen real position masked.
inline MaskedBatch cloze_mask(const std::vector<Sequence>& seqs, double rho, double sigma, const Vocab& vocab, Rng& rng) {
  if (rho < 0.0 || rho > 1.0 || sigma < 0.0 || sigma > 1.0) throw ConfigError("cloze probabilities must lie in [0,1]");
  MaskedBatch b;
  const int mask = vocab.mask_token();
  for (const auto& src : seqs) {
    if (src.length_real < 1) throw ValidationError("cannot mask an empty sequence");
    Sequence s = src;
    std::vector<int> pos, tgt;
    std::vector<char> bm;
    auto apply = [&](int i) {
      const auto ui = static_cast<std::size_t>(i);
      pos.push_back(i);
      tgt.push_back(s.items[ui]);
      s.items[ui] = mask;
      const bool mb = uniform01(rng) < sigma;
      if (mb) s.behaviors[ui] = mask;
      bm.push_back(mb ? 1 : 0);
    };
    for (int i = s.first_real(); i < s.length(); ++i)
      if (uniform01(rng) < rho) apply(i);
    if (pos.empty()) apply(s.first_real() + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.length_real))));
    b.sequences.push_back(std::move(s));
    b.masked_positions.push_back(std::move(pos));
    b.target_items.push_back(std::move(tgt));
    b.behavior_masked.push_back(std::move(bm));
  }
  return b;
}

// ---------------------------------------------------------------- synthetic data

struct SyntheticSpec {
  int num_users = 500;
  int num_items = 200;
  int num_behaviors = 4;
  int archetypes = 5;
  int min_len = 10;
  int max_len = 30;
  std::vector<double> behavior_frequencies = {0.55, 0.2, 0.15, 0.1};
  int cluster_size = 10;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_users <= 0 || num_items <= 0 || num_behaviors <= 0 || archetypes <= 0 || cluster_size <= 0)
      throw ConfigError("synthetic spec: counts must be positive");
    if (min_len < 1 || max_len < min_len) throw ConfigError("synthetic spec: invalid sequence length range");
    if (static_cast<int>(behavior_frequencies.size()) != num_behaviors)
      throw ConfigError("synthetic spec: behavior_frequencies must have num_behaviors entries");
    double s = 0.0;
    for (double f : behavior_frequencies) {
      if (f < 0.0) throw ConfigError("synthetic spec: negative behavior frequency");
      s += f;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ConfigError("synthetic spec: behavior_frequencies must sum to 1");
    if (static_cast<long long>(archetypes) * num_behaviors * cluster_size > num_items)
      throw ConfigError("synthetic spec: archetypes x behaviors x cluster_size exceeds num_items");
  }
};

struct SyntheticManifest {
  SyntheticSpec spec;
  std::vector<int> user_archetype;                // indexed by user id
  std::vector<std::vector<std::vector<int>>> clusters;  // [archetype][behavior] -> items

  const std::vector<int>& cluster(int archetype, int behavior) const {
    return clusters[static_cast<std::size_t>(archetype)][static_cast<std::size_t>(behavior)];
  }
  bool in_cluster(std::uint32_t user, int behavior, int item) const {
    const auto& c = cluster(user_archetype[user], behavior);
    return std::find(c.begin(), c.end(), item) != c.end();
  }
};

struct SyntheticDataset {
  DatasetHeader header;
  Grouped interactions;
  SyntheticManifest manifest;
};

inline SyntheticDataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, Stream::data);
  SyntheticDataset ds;
  ds.header = {spec.num_users, spec.num_items, spec.num_behaviors};
  ds.manifest.spec = spec;

  std::vector<int> perm(static_cast<std::size_t>(spec.num_items));
  std::iota(perm.begin(), perm.end(), 0);
  shuffle(perm, rng);
  auto& clusters = ds.manifest.clusters;
  clusters.assign(static_cast<std::size_t>(spec.archetypes),
                  std::vector<std::vector<int>>(static_cast<std::size_t>(spec.num_behaviors)));
  std::size_t at = 0;
  for (auto& per_a : clusters)
    for (auto& c : per_a) {
      c.assign(perm.begin() + static_cast<std::ptrdiff_t>(at), perm.begin() + static_cast<std::ptrdiff_t>(at + spec.cluster_size));
      std::sort(c.begin(), c.end());
      at += static_cast<std::size_t>(spec.cluster_size);
    }

  std::vector<double> cdf;
  double acc = 0.0;
  for (double f : spec.behavior_frequencies) cdf.push_back(acc += f);

  for (int u = 0; u < spec.num_users; ++u) {
    const int a = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec.archetypes)));
    ds.manifest.user_archetype.push_back(a);
    const int n = spec.min_len + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec.max_len - spec.min_len + 1)));
    UserHistory h{static_cast<std::uint32_t>(u), {}};
    std::uint64_t ts = 0;
    for (int k = 0; k < n; ++k) {
      const double r = uniform01(rng);
      int b = 0;
      while (b + 1 < spec.num_behaviors && r >= cdf[static_cast<std::size_t>(b)]) ++b;
      const auto& c = clusters[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
      const int item = c[uniform_index(rng, c.size())];
      ts += 1 + uniform_index(rng, 5);
      h.events.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(item), static_cast<std::uint32_t>(b), ts, 0});
    }
    ds.interactions.push_back(std::move(h));
  }
  std::size_t line = 0;
  for (auto& u : ds.interactions)
    for (auto& x : u.events) x.line = ++line;
  return ds;
}

inline void write_manifest(std::ostream& out, const SyntheticManifest& m) {
  const auto& s = m.spec;
  out << "num_users=" << s.num_users << '\n'
      << "num_items=" << s.num_items << '\n'
      << "num_behaviors=" << s.num_behaviors << '\n'
      << "archetypes=" << s.archetypes << '\n'
      << "cluster_size=" << s.cluster_size << '\n'
      << "min_len=" << s.min_len << '\n'
      << "max_len=" << s.max_len << '\n'
      << "seed=" << s.seed << '\n';
  out << "behavior_frequencies=";
  for (std::size_t i = 0; i < s.behavior_frequencies.size(); ++i)
    out << (i ? "," : "") << format_double(s.behavior_frequencies[i]);
  out << '\n' << "user_archetypes=";
  for (std::size_t i = 0; i < m.user_archetype.size(); ++i) out << (i ? "," : "") << m.user_archetype[i];
  out << '\n';
  for (std::size_t a = 0; a < m.clusters.size(); ++a)
    for (std::size_t b = 0; b < m.clusters[a].size(); ++b) {
      out << "cluster " << a << ' ' << b;
      for (int item : m.clusters[a][b]) out << ' ' << item;
      out << '\n';
    }
}

inline SyntheticManifest read_manifest(std::istream& in) {
  SyntheticManifest m;
  KeyValues kv;
  std::vector<std::vector<int>> cluster_lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.rfind("cluster ", 0) == 0) {
      std::istringstream is(t.substr(8));
      std::vector<int> v;
      int x;
      while (is >> x) v.push_back(x);
      if (v.size() < 2) throw ParseError("malformed cluster line", n);
      cluster_lines.push_back(std::move(v));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value or cluster line", n);
    kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  auto& s = m.spec;
  s.num_users = static_cast<int>(kv.integer("num_users"));
  s.num_items = static_cast<int>(kv.integer("num_items"));
  s.num_behaviors = static_cast<int>(kv.integer("num_behaviors"));
  s.archetypes = static_cast<int>(kv.integer("archetypes"));
  s.cluster_size = static_cast<int>(kv.integer("cluster_size"));
  s.min_len = static_cast<int>(kv.integer("min_len"));
  s.max_len = static_cast<int>(kv.integer("max_len"));
  s.seed = static_cast<std::uint64_t>(kv.integer("seed"));
  s.behavior_frequencies.clear();
  for (const auto& f : split(kv.str("behavior_frequencies"), ',')) s.behavior_frequencies.push_back(std::stod(f));
  for (const auto& a : split(kv.str("user_archetypes"), ',')) m.user_archetype.push_back(std::stoi(a));
  m.clusters.assign(static_cast<std::size_t>(s.archetypes), std::vector<std::vector<int>>(static_cast<std::size_t>(s.num_behaviors)));
  for (const auto& v : cluster_lines) m.clusters.at(static_cast<std::size_t>(v[0])).at(static_cast<std::size_t>(v[1])) = {v.begin() + 2, v.end()};
  return m;
}

// Fraction of interactions that lie in their planted cluster.
inline double manifest_purity(const Grouped& g, const SyntheticManifest& m) {
  std::size_t total = 0, pure = 0;
  for (const auto& u : g)
    for (const auto& x : u.events) {
      ++total;
      if (m.in_cluster(x.user, static_cast<int>(x.behavior), static_cast<int>(x.item))) ++pure;
    }
  return total ? static_cast<double>(pure) / static_cast<double>(total) : 0.0;
}

}  // namespace fatsmb::data
