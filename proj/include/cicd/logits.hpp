#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "cicd/error.hpp"

namespace cicd {

using TokenId = std::uint32_t;

// Dense scores over a vocabulary. Excluded entries are tracked in a
// separate mask; their stored value is ignored.
class LogitVector {
 public:
  LogitVector() = default;

  explicit LogitVector(std::vector<double> values) : values_(std::move(values)) {
    for (double v : values_) {
      if (!std::isfinite(v)) throw std::invalid_argument("LogitVector: non-finite unmasked value");
    }
  }

  LogitVector(std::vector<double> values, std::vector<bool> masked) : values_(std::move(values)) {
    if (masked.size() != values_.size()) throw Error(Errc::dimension_error, "mask length differs from values");
    masked_.assign(masked.begin(), masked.end());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!masked_[i] && !std::isfinite(values_[i]))
        throw std::invalid_argument("LogitVector: non-finite unmasked value");
    }
    if (std::none_of(masked_.begin(), masked_.end(), [](char m) { return m != 0; })) masked_.clear();
  }

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }

  bool masked(std::size_t i) const { return !masked_.empty() && masked_[i] != 0; }
  bool any_masked() const noexcept { return !masked_.empty(); }

  std::size_t unmasked_count() const {
    if (masked_.empty()) return values_.size();
    return static_cast<std::size_t>(std::count(masked_.begin(), masked_.end(), char{0}));
  }

  void mask(std::size_t i) {
    if (masked_.empty()) masked_.assign(values_.size(), 0);
    masked_.at(i) = 1;
  }

  friend bool operator==(const LogitVector& a, const LogitVector& b) {
    if (a.values_.size() != b.values_.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a.masked(i) != b.masked(i)) return false;
      if (!a.masked(i) && a.values_[i] != b.values_[i]) return false;
    }
    return true;
  }

 private:
  std::vector<double> values_;
  std::vector<char> masked_;
};

class Distribution {
 public:
  Distribution() = default;

  explicit Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw Error(Errc::dimension_error, "empty distribution");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("Distribution: entry outside [0,1]");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("Distribution: probabilities do not sum to 1");
  }

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const noexcept { return probs_; }

  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
  }

 private:
  std::vector<double> probs_;
};

struct DivergenceValue {
  double jsd = 0.0;
  double log10_jsd = -std::numeric_limits<double>::infinity();

  static DivergenceValue from_jsd(double jsd) {
    DivergenceValue d;
    d.jsd = jsd;
    d.log10_jsd = jsd > 0.0 ? std::log10(jsd) : -std::numeric_limits<double>::infinity();
    return d;
  }
};

inline Distribution softmax(const LogitVector& logits) {
  const std::size_t n = logits.size();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (!logits.masked(i)) hi = std::max(hi, logits[i]);
  }
  if (hi == -std::numeric_limits<double>::infinity()) throw Error(Errc::empty_support, "all logits masked");
  std::vector<double> out(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (logits.masked(i)) continue;
    out[i] = std::exp(logits[i] - hi);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return Distribution(std::move(out));
}

inline void require_same_size(std::size_t a, std::size_t b) {
  if (a != b) throw Error(Errc::dimension_error, "vocabulary sizes differ: " + std::to_string(a) + " vs " + std::to_string(b));
}

inline double kl_divergence(const Distribution& p, const Distribution& q) {
  require_same_size(p.size(), q.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    sum += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(sum, 0.0);
}

inline DivergenceValue js_divergence(const Distribution& p, const Distribution& q) {
  require_same_size(p.size(), q.size());
  auto half_term = [](double x, double m) { return x > 0.0 ? 0.5 * x * std::log(x / m) : 0.0; };
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i];
    const double b = q[i];
    if (a == b) continue;
    const double m = 0.5 * (a + b);
    sum += half_term(a, m) + half_term(b, m);
  }
  sum = std::clamp(sum, 0.0, std::numbers::ln2);
  return DivergenceValue::from_jsd(sum);
}

inline double total_variation(const Distribution& p, const Distribution& q) {
  require_same_size(p.size(), q.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += std::abs(p[i] - q[i]);
  return std::min(0.5 * sum, 1.0);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size());
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error(Errc::zero_norm, "cosine similarity of a zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct DistanceSuite {
  double cosine_distance = 0.0;
  double euclidean_distance = 0.0;
  double total_variation = 0.0;
};

inline DistanceSuite distance_suite(const LogitVector& a, const LogitVector& b) {
  require_same_size(a.size(), b.size());
  if (a.any_masked() || b.any_masked()) throw Error(Errc::dimension_error, "distance_suite requires unmasked vectors");
  DistanceSuite d;
  d.cosine_distance = 1.0 - cosine_similarity(a.values(), b.values());
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  d.euclidean_distance = std::sqrt(sq);
  d.total_variation = total_variation(softmax(a), softmax(b));
  return d;
}

// Indices with p_i >= beta * max(p), ascending.
inline std::vector<TokenId> adaptive_plausibility_mask(const Distribution& p, double beta) {
  if (!(beta > 0.0 && beta < 1.0)) throw Error(Errc::config_error, "beta must lie in (0,1)");
  const double cutoff = beta * p[p.argmax()];
  std::vector<TokenId> kept;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] >= cutoff) kept.push_back(static_cast<TokenId>(i));
  }
  return kept;
}

}  // namespace cicd
