#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cicd/error.hpp"
#include "cicd/logits.hpp"
#include "cicd/util.hpp"

namespace cicd {

class EmbeddingStore {
 public:
  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const double> vector(std::size_t i) const { return vectors_.at(i); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::span<const double> vector(const std::string& id) const {
    auto i = find(id);
    if (!i) throw Error(Errc::not_found, "no embedding for id '" + id + "'");
    return vectors_[*i];
  }

 private:
  friend EmbeddingStore build_store(std::vector<std::pair<std::string, std::vector<double>>> records);

  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<std::vector<double>> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline EmbeddingStore build_store(std::vector<std::pair<std::string, std::vector<double>>> records) {
  if (records.empty()) throw Error(Errc::insufficient_pool, "embedding store needs at least one record");
  EmbeddingStore s;
  s.dim_ = records.front().second.size();
  if (s.dim_ == 0) throw Error(Errc::dimension_error, "embedding dimension must be positive");
  for (auto& [id, vec] : records) {
    if (vec.size() != s.dim_)
      throw Error(Errc::dimension_error, "record '" + id + "' has dimension " + std::to_string(vec.size()) +
                                             ", expected " + std::to_string(s.dim_));
    if (!s.index_.emplace(id, s.ids_.size()).second) throw Error(Errc::duplicate_id, "duplicate id '" + id + "'");
    s.ids_.push_back(std::move(id));
    s.vectors_.push_back(std::move(vec));
  }
  return s;
}

enum class SelectionMode { retrieved, random };

struct SelectionResult {
  std::string chosen_id;
  std::optional<double> similarity;
  SelectionMode mode = SelectionMode::random;
};

inline SelectionResult select_retrieved(const EmbeddingStore& store, const std::string& query_id,
                                        std::span<const double> query_vec) {
  if (query_vec.size() != store.dim()) throw Error(Errc::dimension_error, "query dimension differs from store");
  std::optional<std::size_t> best;
  double best_sim = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& id = store.ids()[i];
    if (id == query_id) continue;
    const double sim = cosine_similarity(query_vec, store.vector(i));
    if (!best || sim < best_sim || (sim == best_sim && id < store.ids()[*best])) {
      best = i;
      best_sim = sim;
    }
  }
  if (!best) throw Error(Errc::insufficient_pool, "no candidate other than the query");
  return {store.ids()[*best], best_sim, SelectionMode::retrieved};
}

inline SelectionResult select_retrieved(const EmbeddingStore& store, const std::string& query_id) {
  return select_retrieved(store, query_id, store.vector(query_id));
}

inline SelectionResult select_random(const EmbeddingStore& store, const std::string& query_id, Rng& rng) {
  if (store.size() < 2) throw Error(Errc::insufficient_pool, "random selection needs at least two entries");
  auto self = store.find(query_id);
  const std::size_t pool = self ? store.size() - 1 : store.size();
  std::size_t k = static_cast<std::size_t>(rng.below(pool));
  if (self && k >= *self) ++k;
  return {store.ids()[k], std::nullopt, SelectionMode::random};
}

// Same draw over a plain id list, for backends that have no embeddings.
inline std::string select_random_id(const std::vector<std::string>& ids, const std::string& query_id, Rng& rng) {
  std::vector<std::string> pool;
  for (const auto& id : ids) {
    if (id != query_id) pool.push_back(id);
  }
  if (pool.empty()) throw Error(Errc::insufficient_pool, "random selection needs at least two entries");
  return pool[static_cast<std::size_t>(rng.below(pool.size()))];
}

// CICD-EMB v1 text format.
inline EmbeddingStore load_store(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error(Errc::parse_error, "missing CICD-EMB header", 0);
  std::istringstream header(line);
  std::string magic, version;
  long long dim = -1, count = -1;
  header >> magic >> version >> dim >> count;
  if (magic != "CICD-EMB" || version != "v1" || header.fail() || dim <= 0 || count < 0)
    throw Error(Errc::parse_error, "bad CICD-EMB header: '" + line + "'", 0);
  std::vector<std::pair<std::string, std::vector<double>>> records;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id;
    row >> id;
    std::vector<double> vec;
    std::string tok;
    while (row >> tok) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || !std::isfinite(v))
        throw Error(Errc::parse_error, "line " + std::to_string(lineno) + ": bad number '" + tok + "'", lineno);
      vec.push_back(v);
    }
    if (vec.size() != static_cast<std::size_t>(dim))
      throw Error(Errc::dimension_error, "line " + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                                             " values, got " + std::to_string(vec.size()));
    records.emplace_back(std::move(id), std::move(vec));
  }
  if (records.size() != static_cast<std::size_t>(count))
    throw Error(Errc::parse_error, "header declares " + std::to_string(count) + " records, found " +
                                       std::to_string(records.size()));
  return build_store(std::move(records));
}

inline EmbeddingStore load_store(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::not_found, "cannot open embedding file '" + path + "'");
  return load_store(in);
}

inline void save_store(std::ostream& os, const EmbeddingStore& store) {
  os << "CICD-EMB v1 " << store.dim() << ' ' << store.size() << '\n';
  std::ostringstream num;
  num.precision(17);
  for (std::size_t i = 0; i < store.size(); ++i) {
    os << store.ids()[i];
    for (double v : store.vector(i)) {
      num.str("");
      num << v;
      os << ' ' << num.str();
    }
    os << '\n';
  }
}

}  // namespace cicd
