#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cicd/engine.hpp"
#include "cicd/error.hpp"

namespace cicd::eval {

struct CaptionRecord {
  std::string image_id;
  std::vector<std::string> mentions;  // multiset, in generation order
  std::set<std::string> truth;
};

struct ChairScores {
  double chair_s = 0.0;
  double chair_i = 0.0;
  double recall = 0.0;
  bool no_mentions = false;  // chair_i undefined, reported as 0
};

inline ChairScores chair_scores(const std::vector<CaptionRecord>& records) {
  if (records.empty()) throw Error(Errc::config_error, "chair_scores needs at least one caption");
  std::size_t mentions = 0, hallucinated = 0, bad_captions = 0, recall_captions = 0;
  double recall_sum = 0.0;
  for (const auto& r : records) {
    bool bad = false;
    std::set<std::string> hit;
    for (const auto& m : r.mentions) {
      ++mentions;
      if (r.truth.count(m)) {
        hit.insert(m);
      } else {
        ++hallucinated;
        bad = true;
      }
    }
    if (bad) ++bad_captions;
    if (!r.truth.empty()) {
      recall_sum += static_cast<double>(hit.size()) / static_cast<double>(r.truth.size());
      ++recall_captions;
    }
  }
  ChairScores s;
  s.chair_s = static_cast<double>(bad_captions) / static_cast<double>(records.size());
  s.no_mentions = mentions == 0;
  s.chair_i = s.no_mentions ? 0.0 : static_cast<double>(hallucinated) / static_cast<double>(mentions);
  s.recall = recall_captions ? recall_sum / static_cast<double>(recall_captions) : 0.0;
  return s;
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
};

struct PopeScores {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PopeScores pope_scores(const ConfusionCounts& c) {
  if (c.total() == 0) throw Error(Errc::config_error, "empty confusion table");
  PopeScores s;
  s.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  s.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  s.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline double amber_composite(double chair_pct, double f1_pct) { return (100.0 - chair_pct + f1_pct) / 2.0; }

inline double capture_score(double f1_obj, double f1_attr, double f1_rel) {
  for (double v : {f1_obj, f1_attr, f1_rel}) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(Errc::config_error, "CAPTURE inputs must lie in [0,1]");
  }
  return (5.0 * f1_obj + 5.0 * f1_attr + 2.0 * f1_rel) / 12.0;
}

inline double overlap_ratio(const std::set<std::string>& words_a, const std::set<std::string>& words_b) {
  if (words_a.empty()) throw Error(Errc::config_error, "overlap ratio of an empty word set");
  std::size_t shared = 0;
  for (const auto& w : words_a) shared += words_b.count(w);
  return static_cast<double>(shared) / static_cast<double>(words_a.size());
}

// log10 JSD histogram over [-12, 1] in 0.25-wide bins; exact zeros are
// kept apart, values outside the range land in the edge bins.
struct JsdStats {
  static constexpr double kLow = -12.0;
  static constexpr double kHigh = 1.0;
  static constexpr std::size_t kBins = 52;

  double gamma = -4.0;
  std::size_t steps = 0;
  std::size_t zero_count = 0;
  std::vector<std::size_t> bins = std::vector<std::size_t>(kBins, 0);
  std::size_t below = 0;

  double fraction_below() const { return steps ? static_cast<double>(below) / static_cast<double>(steps) : 0.0; }
  static double bin_low(std::size_t i) { return kLow + (kHigh - kLow) * static_cast<double>(i) / kBins; }
  static double bin_high(std::size_t i) { return kLow + (kHigh - kLow) * static_cast<double>(i + 1) / kBins; }

  void add(const DivergenceValue& d) {
    ++steps;
    if (d.log10_jsd <= gamma) ++below;
    if (d.jsd == 0.0) {
      ++zero_count;
      return;
    }
    const double x = (d.log10_jsd - kLow) / (kHigh - kLow) * kBins;
    const auto i = static_cast<std::size_t>(std::clamp(std::floor(x), 0.0, static_cast<double>(kBins - 1)));
    ++bins[i];
  }
};

inline JsdStats jsd_stats(const std::vector<DivergenceValue>& values, double gamma) {
  if (values.empty()) throw Error(Errc::config_error, "jsd_stats needs at least one step");
  JsdStats s;
  s.gamma = gamma;
  for (const auto& v : values) s.add(v);
  return s;
}

inline JsdStats jsd_stats(const std::vector<StepTrace>& traces, double gamma) {
  std::vector<DivergenceValue> values;
  values.reserve(traces.size());
  for (const auto& t : traces) values.push_back(t.jsd);
  return jsd_stats(values, gamma);
}

inline nlohmann::json gamma_json(double gamma) {
  if (std::isinf(gamma)) return gamma < 0 ? "-inf" : "inf";
  return gamma;
}

inline nlohmann::json to_json(const JsdStats& s) {
  nlohmann::json j;
  j["gamma"] = gamma_json(s.gamma);
  j["steps"] = s.steps;
  j["fraction_below"] = s.fraction_below();
  j["zero_count"] = s.zero_count;
  j["bins"] = s.bins;
  j["range"] = {JsdStats::kLow, JsdStats::kHigh};
  return j;
}

inline void write_histogram_csv(std::ostream& os, const JsdStats& s) {
  os << "bin_low,bin_high,count\n";
  os << "-inf,-inf," << s.zero_count << '\n';
  for (std::size_t i = 0; i < JsdStats::kBins; ++i) {
    os << JsdStats::bin_low(i) << ',' << JsdStats::bin_high(i) << ',' << s.bins[i] << '\n';
  }
}

struct EvalReport {
  ChairScores chair;
  std::optional<PopeScores> pope;
  std::optional<double> amber;
  std::optional<double> capture;
  std::optional<JsdStats> jsd;
  double mean_length = 0.0;
  std::size_t captions = 0;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["chair_s"] = r.chair.chair_s;
  j["chair_i"] = r.chair.chair_i;
  j["recall"] = r.chair.recall;
  j["chair_i_undefined"] = r.chair.no_mentions;
  if (r.pope) {
    j["pope"] = {{"accuracy", r.pope->accuracy}, {"precision", r.pope->precision}, {"recall", r.pope->recall},
                 {"f1", r.pope->f1}};
  } else {
    j["pope"] = nullptr;
  }
  j["amber_composite"] = r.amber ? nlohmann::json(*r.amber) : nlohmann::json(nullptr);
  j["capture"] = r.capture ? nlohmann::json(*r.capture) : nlohmann::json(nullptr);
  j["jsd_stats"] = r.jsd ? to_json(*r.jsd) : nlohmann::json(nullptr);
  j["lengths"] = {{"captions", r.captions}, {"mean_tokens", r.mean_length}};
  return j;
}

}  // namespace cicd::eval
