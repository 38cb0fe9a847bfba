#pragma once

// Item/behavior information diagnostics: plug-in entropies in bits over the
// empirical joint frequency of (item, behavior) pairs.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fatsmb/config.hpp"
#include "fatsmb/data.hpp"

namespace fatsmb::stats {

struct JointCounts {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> counts;  // (item, behavior) -> n
  std::uint64_t total = 0;

  void add(std::uint32_t item, std::uint32_t behavior, std::uint64_t n = 1) {
    counts[{item, behavior}] += n;
    total += n;
  }
};

struct EntropyReport {
  double H_I = 0.0;
  double H_B = 0.0;
  double H_B_given_I = 0.0;
  double H_I_given_B = 0.0;
  double MI = 0.0;
};

inline JointCounts joint_counts(const std::vector<data::Interaction>& interactions) {
  if (interactions.empty()) throw EmptyDatasetError("joint_counts: no interactions");
  JointCounts jc;
  for (const auto& x : interactions) jc.add(x.item, x.behavior);
  return jc;
}

namespace detail {
// Sum of -p log2 p over a list of counts sharing `total`, with 0 log 0 = 0.
template <typename Range>
long double entropy_bits(const Range& counts, long double total) {
  long double h = 0.0L;
  for (const auto n : counts) {
    if (n == 0) continue;
    const long double p = static_cast<long double>(n) / total;
    h -= p * std::log2(p);
  }
  return h;
}
}  // namespace detail

inline EntropyReport entropy_report(const JointCounts& jc) {
  if (jc.total == 0) throw EmptyDatasetError("entropy_report: empty counts");
  std::map<std::uint32_t, std::uint64_t> item_marginal, behavior_marginal;
  std::vector<std::uint64_t> joint;
  joint.reserve(jc.counts.size());
  for (const auto& [key, n] : jc.counts) {
    item_marginal[key.first] += n;
    behavior_marginal[key.second] += n;
    joint.push_back(n);
  }
  auto values = [](const std::map<std::uint32_t, std::uint64_t>& m) {
    std::vector<std::uint64_t> v;
    for (const auto& [k, n] : m) v.push_back(n);
    return v;
  };
  const long double total = static_cast<long double>(jc.total);
  const long double h_joint = detail::entropy_bits(joint, total);
  const long double h_i = detail::entropy_bits(values(item_marginal), total);
  const long double h_b = detail::entropy_bits(values(behavior_marginal), total);

  EntropyReport r;
  r.H_I = static_cast<double>(h_i);
  r.H_B = static_cast<double>(h_b);
  r.H_B_given_I = static_cast<double>(h_joint - h_i);
  r.H_I_given_B = static_cast<double>(h_joint - h_b);
  r.MI = static_cast<double>(h_i + h_b - h_joint);
  return r;
}

inline KeyValues to_key_values(const EntropyReport& r) {
  KeyValues kv;
  kv.set("H_I", r.H_I);
  kv.set("H_B", r.H_B);
  kv.set("H_B_given_I", r.H_B_given_I);
  kv.set("H_I_given_B", r.H_I_given_B);
  kv.set("MI", r.MI);
  return kv;
}

// Key=value lines in a fixed field order.
inline std::string format_report(const EntropyReport& r) {
  std::ostringstream os;
  os << "H_I=" << format_double(r.H_I) << '\n'
     << "H_B=" << format_double(r.H_B) << '\n'
     << "H_B_given_I=" << format_double(r.H_B_given_I) << '\n'
     << "H_I_given_B=" << format_double(r.H_I_given_B) << '\n'
     << "MI=" << format_double(r.MI) << '\n';
  return os.str();
}

// Single-line machine-readable record.
inline std::string format_record(const EntropyReport& r) {
  std::ostringstream os;
  os << "entropy H_I=" << format_double(r.H_I) << " H_B=" << format_double(r.H_B)
     << " H_B_given_I=" << format_double(r.H_B_given_I) << " H_I_given_B=" << format_double(r.H_I_given_B)
     << " MI=" << format_double(r.MI);
  return os.str();
}

}  // namespace fatsmb::stats
