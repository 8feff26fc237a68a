#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cicd/selector.hpp"

namespace fixture {

using cicd::Rng;

using Records = std::vector<std::pair<std::string, std::vector<double>>>;

inline long double cos_ld(const std::vector<double>& a, std::span<const double> b) {
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::string brute_force(const Records& recs, const std::string& qid, const std::vector<double>& q) {
  std::optional<std::size_t> best;
  long double best_sim = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].first == qid) continue;
    const long double s = cos_ld(q, recs[i].second);
    const bool tie = best && std::abs(s - best_sim) <= 1e-15L;
    if (!best || (!tie && s < best_sim) || (tie && recs[i].first < recs[*best].first)) {
      best = i;
      best_sim = tie ? std::min(s, best_sim) : s;
    }
  }
  return recs[*best].first;
}

inline std::vector<double> random_vec(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  do {
    for (auto& x : v) x = rng.uniform() * 2.0 - 1.0;
  } while (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }));
  return v;
}

inline std::string random_id(Rng& rng) {
  std::string s;
  const std::size_t n = 1 + rng.below(3);
  for (std::size_t i = 0; i < n; ++i) s += static_cast<char>('a' + rng.below(4));
  return s;
}

inline Records random_records(Rng& rng, std::size_t n, std::size_t dim) {
  Records recs;
  std::set<std::string> used;
  while (recs.size() < n) {
    std::string id = random_id(rng);
    if (!used.insert(id).second) continue;
    if (!recs.empty() && rng.uniform() < 0.3) {
      auto v = recs[rng.below(recs.size())].second;
      const double scale = std::ldexp(1.0, static_cast<int>(rng.below(5)) - 2);
      for (auto& x : v) x *= scale;
      recs.emplace_back(id, v);
    } else {
      recs.emplace_back(id, random_vec(rng, dim));
    }
  }
  return recs;
}

}  // namespace fixture
