#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cicd/backend.hpp"
#include "cicd/error.hpp"
#include "cicd/logits.hpp"
#include "cicd/util.hpp"

namespace cicd {

enum class AlphaMode { dynamic, fixed, off };

struct AlphaClip {
  double low = 1.0;
  double high = 3.0;
};

struct EngineConfig {
  double gamma = -4.0;
  double beta = 0.1;
  AlphaMode alpha_mode = AlphaMode::dynamic;
  double fixed_alpha = 1.0;
  AlphaClip alpha_clip;
  double temperature = 1.0;
  bool greedy = false;
  std::size_t max_len = 64;
  std::uint64_t seed = 0;
  bool full_trace = false;

  void validate() const {
    if (std::isnan(gamma)) throw Error(Errc::config_error, "gamma is NaN");
    if (!(beta > 0.0 && beta < 1.0)) throw Error(Errc::config_error, "beta must lie in (0,1)");
    if (!(alpha_clip.low <= alpha_clip.high) || !std::isfinite(alpha_clip.low) || !std::isfinite(alpha_clip.high))
      throw Error(Errc::config_error, "alpha clip must be a finite interval with low <= high");
    if (alpha_mode == AlphaMode::fixed &&
        !(std::isfinite(fixed_alpha) && fixed_alpha >= alpha_clip.low && fixed_alpha <= alpha_clip.high))
      throw Error(Errc::config_error, "fixed alpha must lie inside the alpha clip");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw Error(Errc::config_error, "temperature must be positive");
  }
};

inline std::string alpha_mode_string(const EngineConfig& cfg) {
  switch (cfg.alpha_mode) {
    case AlphaMode::dynamic: return "dynamic";
    case AlphaMode::off: return "off";
    case AlphaMode::fixed: {
      std::ostringstream os;
      os.precision(17);
      os << "fixed:" << cfg.fixed_alpha;
      return os.str();
    }
  }
  return "dynamic";
}

inline nlohmann::json config_to_json(const EngineConfig& cfg) {
  nlohmann::json j;
  j["gamma"] = std::isinf(cfg.gamma) ? nlohmann::json(cfg.gamma < 0 ? "-inf" : "inf") : nlohmann::json(cfg.gamma);
  j["beta"] = cfg.beta;
  j["alpha_mode"] = alpha_mode_string(cfg);
  j["alpha_clip"] = {cfg.alpha_clip.low, cfg.alpha_clip.high};
  j["temperature"] = cfg.temperature;
  j["greedy"] = cfg.greedy;
  j["max_len"] = cfg.max_len;
  j["seed"] = cfg.seed;
  j["full_trace"] = cfg.full_trace;
  return j;
}

struct StepTrace {
  std::size_t step = 0;
  DivergenceValue jsd;
  bool gated_contrastive = false;
  std::optional<double> alpha;
  TokenId token = 0;
  std::string token_text;
  std::size_t kept_indices_count = 0;
  std::string orig_digest;
  std::string contrast_digest;
  std::vector<double> orig_logits;  // filled only with full tracing
  std::vector<double> contrast_logits;
};

struct StepOutcome {
  LogitVector final_logits;
  DivergenceValue jsd;
  bool gated_contrastive = false;
  std::optional<double> alpha;
  std::size_t kept_indices_count = 0;
};

struct GenerationResult {
  std::vector<TokenId> tokens;
  std::string text;
  std::vector<StepTrace> traces;
  EngineConfig config_echo;
};

inline double dynamic_alpha(double jsd, AlphaClip clip = {}) {
  if (jsd == 0.0) throw Error(Errc::degenerate_divergence, "alpha requested for zero divergence");
  if (!(jsd > 0.0)) throw std::invalid_argument("dynamic_alpha: negative or NaN divergence");
  return std::clamp(1.0 - std::log10(jsd), clip.low, clip.high);
}

inline double dynamic_alpha(const DivergenceValue& d, AlphaClip clip = {}) { return dynamic_alpha(d.jsd, clip); }

inline LogitVector fuse_logits(const LogitVector& orig, const LogitVector& contrast, double alpha) {
  require_same_size(orig.size(), contrast.size());
  if (!std::isfinite(alpha)) throw std::invalid_argument("fuse_logits: non-finite alpha");
  std::vector<double> out(orig.size(), 0.0);
  std::vector<bool> masked(orig.size(), false);
  for (std::size_t i = 0; i < orig.size(); ++i) {
    if (orig.masked(i) || contrast.masked(i)) {
      masked[i] = true;
      continue;
    }
    out[i] = (1.0 + alpha) * orig[i] - alpha * contrast[i];
  }
  return LogitVector(std::move(out), std::move(masked));
}

inline StepOutcome cicd_step(const LogitVector& orig, const LogitVector& contrast, const EngineConfig& cfg) {
  if (orig.size() != contrast.size())
    throw Error(Errc::session_mismatch, "step logits have different vocabulary sizes: " + std::to_string(orig.size()) +
                                            " vs " + std::to_string(contrast.size()));
  const Distribution p = softmax(orig);
  const Distribution q = softmax(contrast);
  StepOutcome out;
  out.jsd = js_divergence(p, q);
  out.gated_contrastive = out.jsd.log10_jsd > cfg.gamma;
  if (!out.gated_contrastive || cfg.alpha_mode == AlphaMode::off) {
    out.final_logits = orig;
    out.kept_indices_count = orig.unmasked_count();
    return out;
  }
  const double alpha = cfg.alpha_mode == AlphaMode::fixed ? cfg.fixed_alpha : dynamic_alpha(out.jsd, cfg.alpha_clip);
  out.alpha = alpha;
  LogitVector fused = fuse_logits(orig, contrast, alpha);
  std::vector<bool> keep(orig.size(), false);
  for (TokenId i : adaptive_plausibility_mask(p, cfg.beta)) keep[i] = true;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    if (!keep[i]) fused.mask(i);
  }
  out.kept_indices_count = fused.unmasked_count();
  out.final_logits = std::move(fused);
  return out;
}

inline TokenId argmax_token(const LogitVector& logits) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits.masked(i)) continue;
    if (!best || logits[i] > logits[*best]) best = i;
  }
  if (!best) throw Error(Errc::empty_support, "all logits masked");
  return static_cast<TokenId>(*best);
}

// Inverse-CDF draw with exactly one uniform per call.
inline TokenId sample_token(const LogitVector& final_logits, double temperature, Rng& rng, bool greedy = false) {
  if (greedy) return argmax_token(final_logits);
  if (!(temperature > 0.0)) throw Error(Errc::config_error, "temperature must be positive");
  std::vector<double> scaled(final_logits.values().begin(), final_logits.values().end());
  std::vector<bool> masked(scaled.size(), false);
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    masked[i] = final_logits.masked(i);
    scaled[i] = masked[i] ? 0.0 : scaled[i] / temperature;
  }
  const Distribution p = softmax(LogitVector(std::move(scaled), std::move(masked)));
  const double u = rng.uniform();
  double cum = 0.0;
  std::optional<std::size_t> last;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (final_logits.masked(i)) continue;
    last = i;
    cum += p[i];
    if (cum > u) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(*last);
}

inline std::string logit_digest(const LogitVector& v) {
  Fnv1a h;
  h.update(v.values());
  return h.hex();
}

namespace detail {

inline std::string next_session_id(const char* role) {
  static std::atomic<std::uint64_t> counter{0};
  return std::string(role) + "-" + std::to_string(counter.fetch_add(1));
}

template <typename F>
auto guarded(std::size_t step, const std::string& what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == Errc::session_mismatch || e.code() == Errc::session_error) throw;
    throw Error(Errc::session_error, what + " failed at step " + std::to_string(step) + ": " + e.what(), step);
  } catch (const std::exception& e) {
    throw Error(Errc::session_error, what + " failed at step " + std::to_string(step) + ": " + e.what(), step);
  }
}

}  // namespace detail

inline std::string token_text(const BackendInfo& info, TokenId t) {
  if (t < info.tokens.size()) return info.tokens[t];
  return "<" + std::to_string(t) + ">";
}

// Drives two sessions that share the prompt and every sampled token but
// see different images.
inline GenerationResult generate(ModelBackend& orig_backend, const std::string& orig_image, ModelBackend& contrast_backend,
                                 const std::string& contrast_image, std::span<const TokenId> prompt,
                                 const EngineConfig& cfg) {
  cfg.validate();
  GenerationResult result;
  result.config_echo = cfg;

  const BackendInfo info = detail::guarded(0, "hello", [&] { return orig_backend.hello(); });
  const BackendInfo other =
      &orig_backend == &contrast_backend ? info : detail::guarded(0, "hello", [&] { return contrast_backend.hello(); });
  if (info.vocab_size != other.vocab_size || info.vocab_digest != other.vocab_digest)
    throw Error(Errc::session_mismatch, "backends report different vocabularies");

  SessionState a{detail::next_session_id("orig"), orig_image, {prompt.begin(), prompt.end()}, -1};
  SessionState b{detail::next_session_id("contrast"), contrast_image, {prompt.begin(), prompt.end()}, -1};
  detail::guarded(0, "init", [&] { orig_backend.init(a.session, a.image_id, prompt); });
  detail::guarded(0, "init", [&] { contrast_backend.init(b.session, b.image_id, prompt); });

  auto close_both = [&] {
    try {
      orig_backend.close(a.session);
    } catch (...) {
    }
    try {
      contrast_backend.close(b.session);
    } catch (...) {
    }
  };

  try {
    Rng rng(cfg.seed);
    std::string text;
    for (std::size_t t = 0; t < cfg.max_len; ++t) {
      lockstep_barrier(a, b);
      const LogitVector lo = detail::guarded(t, "step", [&] { return orig_backend.step(a.session, t); });
      const LogitVector lc = detail::guarded(t, "step", [&] { return contrast_backend.step(b.session, t); });
      a.last_step = b.last_step = static_cast<std::int64_t>(t);
      if (lo.size() != info.vocab_size || lc.size() != info.vocab_size)
        throw Error(Errc::session_mismatch, "logit length differs from negotiated vocabulary size", t);

      const StepOutcome outcome = cicd_step(lo, lc, cfg);
      const TokenId token = sample_token(outcome.final_logits, cfg.temperature, rng, cfg.greedy);

      detail::guarded(t, "feed", [&] { orig_backend.feed(a.session, token); });
      detail::guarded(t, "feed", [&] { contrast_backend.feed(b.session, token); });
      a.fed_tokens.push_back(token);
      b.fed_tokens.push_back(token);

      StepTrace tr;
      tr.step = t;
      tr.jsd = outcome.jsd;
      tr.gated_contrastive = outcome.gated_contrastive;
      tr.alpha = outcome.alpha;
      tr.token = token;
      tr.token_text = token_text(info, token);
      tr.kept_indices_count = outcome.kept_indices_count;
      tr.orig_digest = logit_digest(lo);
      tr.contrast_digest = logit_digest(lc);
      if (cfg.full_trace) {
        tr.orig_logits.assign(lo.values().begin(), lo.values().end());
        tr.contrast_logits.assign(lc.values().begin(), lc.values().end());
      }
      result.traces.push_back(std::move(tr));
      result.tokens.push_back(token);
      if (token == info.end_token) break;
      if (!text.empty()) text += ' ';
      text += token_text(info, token);
    }
    lockstep_barrier(a, b);
    result.text = std::move(text);
  } catch (...) {
    close_both();
    throw;
  }
  close_both();
  return result;
}

inline GenerationResult generate(ModelBackend& backend, const std::string& orig_image, const std::string& contrast_image,
                                 std::span<const TokenId> prompt, const EngineConfig& cfg) {
  return generate(backend, orig_image, backend, contrast_image, prompt, cfg);
}

inline nlohmann::json trace_to_json(const StepTrace& t) {
  nlohmann::json j;
  j["step"] = t.step;
  j["jsd"] = t.jsd.jsd;
  j["log10_jsd"] = std::isfinite(t.jsd.log10_jsd) ? nlohmann::json(t.jsd.log10_jsd) : nlohmann::json(nullptr);
  j["gated"] = t.gated_contrastive;
  j["alpha"] = t.alpha ? nlohmann::json(*t.alpha) : nlohmann::json(nullptr);
  j["token"] = t.token;
  j["token_text"] = t.token_text;
  j["kept"] = t.kept_indices_count;
  j["orig_digest"] = t.orig_digest;
  j["contrast_digest"] = t.contrast_digest;
  if (!t.orig_logits.empty()) {
    j["orig_logits"] = t.orig_logits;
    j["contrast_logits"] = t.contrast_logits;
  }
  return j;
}

inline StepTrace trace_from_json(const nlohmann::json& j) {
  StepTrace t;
  t.step = j.at("step").get<std::size_t>();
  t.jsd = DivergenceValue::from_jsd(j.at("jsd").get<double>());
  t.gated_contrastive = j.at("gated").get<bool>();
  if (!j.at("alpha").is_null()) t.alpha = j.at("alpha").get<double>();
  t.token = j.at("token").get<TokenId>();
  t.token_text = j.at("token_text").get<std::string>();
  t.kept_indices_count = j.value("kept", std::size_t{0});
  t.orig_digest = j.value("orig_digest", std::string{});
  t.contrast_digest = j.value("contrast_digest", std::string{});
  if (j.contains("orig_logits")) {
    t.orig_logits = j.at("orig_logits").get<std::vector<double>>();
    t.contrast_logits = j.at("contrast_logits").get<std::vector<double>>();
  }
  return t;
}

inline void write_trace_jsonl(std::ostream& os, const std::vector<StepTrace>& traces) {
  for (const auto& t : traces) os << trace_to_json(t).dump() << '\n';
}

inline std::vector<StepTrace> read_trace_jsonl(std::istream& is) {
  std::vector<StepTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(trace_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::parse_error, "trace line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace cicd
