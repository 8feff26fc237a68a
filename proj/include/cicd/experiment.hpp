#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cicd/engine.hpp"
#include "cicd/metrics.hpp"
#include "cicd/selector.hpp"
#include "cicd/sim.hpp"

namespace cicd::experiment {

enum class ContrastKind { random, retrieve, fixed };

struct ContrastSpec {
  ContrastKind kind = ContrastKind::random;
  std::string value;  // embedding file for retrieve (empty: world embeddings), image id for fixed

  std::string str() const {
    switch (kind) {
      case ContrastKind::random: return "random";
      case ContrastKind::retrieve: return value.empty() ? "retrieve" : "retrieve:" + value;
      case ContrastKind::fixed: return value;
    }
    return "random";
  }
};

inline ContrastSpec parse_contrast(const std::string& s) {
  if (s.empty()) throw Error(Errc::config_error, "empty contrast source");
  if (s == "random") return {ContrastKind::random, {}};
  if (s == "retrieve") return {ContrastKind::retrieve, {}};
  if (s.rfind("retrieve:", 0) == 0) return {ContrastKind::retrieve, s.substr(9)};
  return {ContrastKind::fixed, s};
}

struct ExperimentConfig {
  EngineConfig engine;
  std::size_t images = 200;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  ContrastSpec contrast;
  std::vector<TokenId> prompt;
  bool regular_baseline = true;
};

inline std::uint64_t sampling_seed(std::uint64_t seed, std::size_t image) { return mix_seed(seed, 0x5a3b1eULL, image); }
inline std::uint64_t contrast_seed(std::uint64_t seed, std::size_t image) { return mix_seed(seed, 0xc0a7ULL, image); }

// Resolves contrast images for one corpus.
class ContrastChooser {
 public:
  ContrastChooser(const sim::SynthWorld& world, std::size_t images, const ContrastSpec& spec)
      : world_(world), spec_(spec) {
    pool_.assign(world.image_ids.begin(), world.image_ids.begin() + static_cast<std::ptrdiff_t>(images));
    if (spec.kind == ContrastKind::retrieve) store_ = spec.value.empty() ? world.embeddings() : load_store(spec.value);
    if (spec.kind == ContrastKind::fixed) world.image_index(spec.value);
  }

  std::size_t choose(std::size_t image, std::uint64_t seed) const {
    const std::string& id = world_.image_ids[image];
    switch (spec_.kind) {
      case ContrastKind::random: {
        Rng rng(contrast_seed(seed, image));
        return world_.image_index(select_random_id(pool_, id, rng));
      }
      case ContrastKind::retrieve: return world_.image_index(select_retrieved(*store_, id).chosen_id);
      case ContrastKind::fixed:
        if (spec_.value == id) throw Error(Errc::config_error, "contrast image equals the query image " + id);
        return world_.image_index(spec_.value);
    }
    return 0;
  }

 private:
  const sim::SynthWorld& world_;
  ContrastSpec spec_;
  std::vector<std::string> pool_;
  std::optional<EmbeddingStore> store_;
};

struct ModeSummary {
  eval::EvalReport report;
  std::size_t function_slots = 0;
  std::size_t function_filled = 0;
  std::size_t mentions = 0;
  double fluency() const {
    return function_slots ? static_cast<double>(function_filled) / static_cast<double>(function_slots) : 0.0;
  }
};

struct SlotJsd {
  eval::JsdStats function;
  eval::JsdStats object;
  eval::JsdStats object_disjoint;
};

struct ExperimentResult {
  std::optional<ModeSummary> regular;
  ModeSummary cicd;
  SlotJsd slots;
  double visual_overlap = 0.0;
};

namespace detail {

class ModeAccumulator {
 public:
  explicit ModeAccumulator(const sim::SynthWorld& w) : world_(w) {}

  void add(std::size_t image, std::size_t prompt_len, const GenerationResult& g) {
    eval::CaptionRecord rec;
    rec.image_id = world_.image_ids[image];
    rec.truth = world_.ground_truth_objects(rec.image_id);
    std::set<std::size_t> said;
    for (std::size_t t = 0; t < g.tokens.size(); ++t) {
      const TokenId tok = g.tokens[t];
      if (world_.is_object_token(tok)) {
        rec.mentions.push_back(world_.tokens[tok]);
        said.insert(world_.object_of(tok));
      }
      if (world_.slot_kind(prompt_len + t) == sim::SlotKind::function) {
        ++summary_.function_slots;
        if (world_.is_function_token(tok)) ++summary_.function_filled;
      }
    }
    summary_.mentions += rec.mentions.size();
    tokens_ += g.tokens.size();

    // Object probe: every present object plus as many absent ones, most
    // prior-favoured first; the caption answers "yes" by mentioning it.
    const auto& present = world_.image_objects[image];
    for (std::size_t o : present) (said.count(o) ? counts_.tp : counts_.fn) += 1;
    for (std::size_t o : probe_negatives(image, present.size())) (said.count(o) ? counts_.fp : counts_.tn) += 1;

    std::size_t unique_bad = 0;
    for (std::size_t o : said) unique_bad += world_.image_has(image, o) ? 0 : 1;
    if (!said.empty()) {
      amber_chair_sum_ += static_cast<double>(unique_bad) / static_cast<double>(said.size());
      ++amber_captions_;
    }
    records_.push_back(std::move(rec));
  }

  ModeSummary finish(std::optional<eval::JsdStats> jsd) {
    summary_.report.chair = eval::chair_scores(records_);
    summary_.report.pope = eval::pope_scores(counts_);
    const double amber_chair = amber_captions_ ? 100.0 * amber_chair_sum_ / static_cast<double>(amber_captions_) : 0.0;
    summary_.report.amber = eval::amber_composite(amber_chair, 100.0 * summary_.report.pope->f1);
    summary_.report.jsd = std::move(jsd);
    summary_.report.captions = records_.size();
    summary_.report.mean_length = records_.empty() ? 0.0 : static_cast<double>(tokens_) / static_cast<double>(records_.size());
    return summary_;
  }

 private:
  std::vector<std::size_t> probe_negatives(std::size_t image, std::size_t k) const {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t o = 0; o < world_.n_objects(); ++o) {
      if (world_.image_has(image, o)) continue;
      double score = world_.prior[world_.n_objects()][o];
      for (std::size_t p : world_.image_objects[image]) score += world_.prior[p][o];
      ranked.emplace_back(-score, o);
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) out.push_back(ranked[i].second);
    return out;
  }

  const sim::SynthWorld& world_;
  ModeSummary summary_;
  std::vector<eval::CaptionRecord> records_;
  eval::ConfusionCounts counts_;
  double amber_chair_sum_ = 0.0;
  std::size_t amber_captions_ = 0;
  std::size_t tokens_ = 0;
};

}  // namespace detail

inline EngineConfig regular_config(EngineConfig cfg) {
  cfg.gamma = std::numeric_limits<double>::infinity();
  return cfg;
}

// Per-caption callback, e.g. for streaming traces.
using CaptionSink = std::function<void(std::uint64_t seed, std::size_t image, std::size_t contrast, const GenerationResult& cicd)>;

inline ExperimentResult run_experiment(const sim::SynthWorld& world, const ExperimentConfig& cfg,
                                       const CaptionSink& sink = {}) {
  if (cfg.images == 0) throw Error(Errc::config_error, "experiment needs at least one image");
  if (cfg.images > world.image_ids.size())
    throw Error(Errc::config_error, "experiment asks for " + std::to_string(cfg.images) + " images, world has " +
                                        std::to_string(world.image_ids.size()));
  if (cfg.seeds.empty()) throw Error(Errc::config_error, "experiment needs at least one seed");
  cfg.engine.validate();

  const ContrastChooser chooser(world, cfg.images, cfg.contrast);
  sim::SimBackend backend(world);
  detail::ModeAccumulator regular(world), cicd(world);
  eval::JsdStats all;
  all.gamma = cfg.engine.gamma;
  SlotJsd slots;
  slots.function.gamma = slots.object.gamma = slots.object_disjoint.gamma = cfg.engine.gamma;
  double overlap_sum = 0.0;
  std::size_t overlap_n = 0;

  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t i = 0; i < cfg.images; ++i) {
      const std::size_t c = chooser.choose(i, seed);
      EngineConfig ec = cfg.engine;
      ec.seed = sampling_seed(seed, i);
      const auto& a = world.image_ids[i];
      const auto& b = world.image_ids[c];
      if (cfg.regular_baseline) regular.add(i, cfg.prompt.size(), generate(backend, a, b, cfg.prompt, regular_config(ec)));
      GenerationResult g = generate(backend, a, b, cfg.prompt, ec);
      cicd.add(i, cfg.prompt.size(), g);
      for (const auto& tr : g.traces) {
        all.add(tr.jsd);
        const auto kind = world.slot_kind(cfg.prompt.size() + tr.step);
        if (kind == sim::SlotKind::function) slots.function.add(tr.jsd);
        if (kind == sim::SlotKind::object) {
          slots.object.add(tr.jsd);
          if (world.disjoint(i, c)) slots.object_disjoint.add(tr.jsd);
        }
      }
      overlap_sum += eval::overlap_ratio(world.ground_truth_objects(a), world.ground_truth_objects(b));
      ++overlap_n;
      if (sink) sink(seed, i, c, g);
    }
  }

  ExperimentResult r;
  if (cfg.regular_baseline) r.regular = regular.finish(std::nullopt);
  r.cicd = cicd.finish(all);
  r.slots = slots;
  r.visual_overlap = overlap_sum / static_cast<double>(overlap_n);
  return r;
}

inline nlohmann::json summary_json(const ModeSummary& m) {
  nlohmann::json j = eval::to_json(m.report);
  j["fluency"] = m.fluency();
  j["function_slots"] = m.function_slots;
  j["mentions"] = m.mentions;
  return j;
}

inline nlohmann::json report_json(const ExperimentResult& r, const nlohmann::json& config_echo) {
  nlohmann::json j;
  j["config"] = config_echo;
  j["regular"] = r.regular ? summary_json(*r.regular) : nlohmann::json(nullptr);
  j["cicd"] = summary_json(r.cicd);
  if (r.regular) {
    auto rel = [](double base, double v) { return base > 0.0 ? (base - v) / base : 0.0; };
    j["relative_reduction"] = {{"chair_s", rel(r.regular->report.chair.chair_s, r.cicd.report.chair.chair_s)},
                               {"chair_i", rel(r.regular->report.chair.chair_i, r.cicd.report.chair.chair_i)}};
  }
  j["jsd_by_slot"] = {{"function", eval::to_json(r.slots.function)},
                      {"object", eval::to_json(r.slots.object)},
                      {"object_disjoint", eval::to_json(r.slots.object_disjoint)}};
  j["visual_overlap"] = r.visual_overlap;
  return j;
}

inline nlohmann::json experiment_config_json(const ExperimentConfig& cfg, const sim::SynthWorld& world) {
  nlohmann::json j;
  j["engine"] = config_to_json(cfg.engine);
  j["engine"].erase("seed");
  j["images"] = cfg.images;
  j["seeds"] = cfg.seeds;
  j["contrast"] = cfg.contrast.str();
  j["prompt"] = cfg.prompt;
  j["regular_baseline"] = cfg.regular_baseline;
  j["world_digest"] = world.digest();
  return j;
}

struct SweepRow {
  double gamma = 0.0;
  double chair_s = 0.0;
  double chair_i = 0.0;
  double recall = 0.0;
  double fluency = 0.0;
};

inline std::vector<SweepRow> sweep_gamma(const sim::SynthWorld& world, ExperimentConfig cfg,
                                         const std::vector<double>& gammas) {
  if (gammas.empty()) throw Error(Errc::config_error, "gamma sweep needs at least one value");
  cfg.regular_baseline = false;
  std::vector<SweepRow> rows;
  for (double g : gammas) {
    cfg.engine.gamma = g;
    const auto r = run_experiment(world, cfg);
    const auto& c = r.cicd.report.chair;
    rows.push_back({g, c.chair_s, c.chair_i, c.recall, r.cicd.fluency()});
  }
  return rows;
}

inline std::string gamma_text(double g) {
  if (std::isinf(g)) return g < 0 ? "-inf" : "inf";
  std::ostringstream os;
  os.precision(17);
  os << g;
  return os.str();
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "gamma,chair_s,chair_i,recall,fluency\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << gamma_text(r.gamma) << ',' << r.chair_s << ',' << r.chair_i << ',' << r.recall << ',' << r.fluency << '\n';
  }
}

struct Bimodality {
  double function_below = 0.0;          // share of function-slot steps with log10 JSD <= gamma
  double object_disjoint_above = 0.0;   // share of disjoint object-slot steps above gamma
  std::size_t function_steps = 0;
  std::size_t object_disjoint_steps = 0;
  bool holds(double level = 0.95) const {
    return function_steps > 0 && object_disjoint_steps > 0 && function_below >= level && object_disjoint_above >= level;
  }
};

// Exact zeros count as log10(0 + 1e-30) = -30.
inline Bimodality measure_bimodality(const sim::SynthWorld& world, std::size_t captions, std::uint64_t seed = 0,
                                     double gamma = -4.0) {
  ExperimentConfig cfg;
  cfg.engine.gamma = gamma;
  cfg.images = std::min(captions, world.image_ids.size());
  cfg.seeds.clear();
  for (std::size_t done = 0; done < captions; done += cfg.images) cfg.seeds.push_back(seed + cfg.seeds.size());
  cfg.regular_baseline = false;
  const auto r = run_experiment(world, cfg);
  Bimodality b;
  b.function_steps = r.slots.function.steps;
  b.object_disjoint_steps = r.slots.object_disjoint.steps;
  b.function_below = r.slots.function.fraction_below();
  b.object_disjoint_above = 1.0 - r.slots.object_disjoint.fraction_below();
  return b;
}

// Raises the visual weight until the two JSD regimes separate at gamma;
// the outcome is stored in the world document.
inline sim::SynthWorld calibrate(sim::WorldConfig cfg, std::size_t captions = 200, double gamma = -4.0) {
  const double base = cfg.w_vis;
  const double steps[] = {1.0, 1.25, 1.5, 2.0, 3.0, 4.0};
  std::size_t attempt = 0;
  for (double m : steps) {
    ++attempt;
    cfg.w_vis = base * m;
    sim::SynthWorld w = sim::build_world(cfg);
    const Bimodality b = measure_bimodality(w, captions, 0, gamma);
    if (b.holds()) {
      w.calibration = {{"gamma", gamma},
                       {"captions", captions},
                       {"attempts", attempt},
                       {"w_lang", cfg.w_lang},
                       {"w_vis", cfg.w_vis},
                       {"prior_sharpness", cfg.prior_sharpness},
                       {"function_below", b.function_below},
                       {"object_disjoint_above", b.object_disjoint_above}};
      return w;
    }
  }
  throw Error(Errc::config_error, "calibration did not separate the JSD regimes");
}

struct SlotDistance {
  std::size_t count = 0;
  double mean_cosine = 0.0, max_cosine = 0.0;
  double mean_euclidean = 0.0, max_euclidean = 0.0;
  double mean_tv = 0.0, max_tv = 0.0;
  double mean_jsd = 0.0, max_jsd = 0.0;

  void add(const DistanceSuite& d, double jsd) {
    ++count;
    const double n = static_cast<double>(count);
    auto upd = [n](double& mean, double& mx, double v) {
      mean += (v - mean) / n;
      mx = std::max(mx, v);
    };
    upd(mean_cosine, max_cosine, d.cosine_distance);
    upd(mean_euclidean, max_euclidean, d.euclidean_distance);
    upd(mean_tv, max_tv, d.total_variation);
    upd(mean_jsd, max_jsd, jsd);
  }
};

inline nlohmann::json to_json(const SlotDistance& s) {
  return {{"count", s.count},
          {"cosine", {{"mean", s.mean_cosine}, {"max", s.max_cosine}}},
          {"euclidean", {{"mean", s.mean_euclidean}, {"max", s.max_euclidean}}},
          {"total_variation", {{"mean", s.mean_tv}, {"max", s.max_tv}}},
          {"jsd", {{"mean", s.mean_jsd}, {"max", s.max_jsd}}}};
}

struct Consistency {
  SlotDistance function, object, end;
};

// Distances between the next-token logits of random image pairs at
// prefixes taken from regularly decoded captions.
inline Consistency analyze_consistency(const sim::SynthWorld& world, std::size_t prefixes, std::size_t pairs,
                                       std::uint64_t seed) {
  if (world.image_ids.size() < 2) throw Error(Errc::insufficient_pool, "consistency analysis needs two images");
  Consistency out;
  sim::SimBackend backend(world);
  Rng rng(seed);
  const std::size_t n = world.image_ids.size();
  for (std::size_t k = 0; k < prefixes; ++k) {
    const std::size_t img = k % n;
    EngineConfig ec = regular_config({});
    ec.seed = sampling_seed(seed, k);
    ec.max_len = world.caption_length() + 1;
    const auto g = generate(backend, world.image_ids[img], world.image_ids[(img + 1) % n], {}, ec);
    for (std::size_t t = 0; t < g.tokens.size(); ++t) {
      const std::span<const TokenId> prefix(g.tokens.data(), t);
      const auto kind = world.slot_kind(prefix.size());
      SlotDistance& acc = kind == sim::SlotKind::function ? out.function
                          : kind == sim::SlotKind::object ? out.object
                                                           : out.end;
      for (std::size_t m = 0; m < pairs; ++m) {
        const std::size_t a = static_cast<std::size_t>(rng.below(n));
        std::size_t b = static_cast<std::size_t>(rng.below(n - 1));
        if (b >= a) ++b;
        const LogitVector la = world.next_logits(a, prefix);
        const LogitVector lb = world.next_logits(b, prefix);
        acc.add(distance_suite(la, lb), js_divergence(softmax(la), softmax(lb)).jsd);
      }
    }
  }
  return out;
}

inline nlohmann::json to_json(const Consistency& c) {
  return {{"function", to_json(c.function)}, {"object", to_json(c.object)}, {"end", to_json(c.end)}};
}

struct TrapSetup {
  std::size_t image = 0;
  std::size_t o1 = 0;
  std::size_t o2 = 0;
  std::vector<TokenId> prefix;  // ends right before an object slot
};

// Finds an image holding o1 and at least two scene mates but not the scene
// hub o2 that the prior favours after o1; the mates must stay inside the
// plausibility set where o2 is the regular argmax.
inline std::optional<TrapSetup> find_trap_setup(const sim::SynthWorld& world, double beta = 0.1) {
  const auto& cyc = world.config.template_cycle;
  const std::size_t first_obj = cyc.find('O');
  if (first_obj == std::string::npos) return std::nullopt;
  std::size_t next_obj = first_obj + 1;
  while (next_obj < world.caption_length() && world.slot_kind(next_obj) != sim::SlotKind::object) ++next_obj;
  if (next_obj >= world.caption_length()) return std::nullopt;

  auto top_function_word = [&](std::size_t pos) {
    const auto& s = world.function_scores[pos % cyc.size()];
    return static_cast<TokenId>(std::max_element(s.begin(), s.end()) - s.begin());
  };

  for (std::size_t i = 0; i < world.image_objects.size(); ++i) {
    for (std::size_t o1 : world.image_objects[i]) {
      const std::size_t o2 = world.hub_of(o1);
      if (o2 == o1 || world.image_has(i, o2) || world.top_follower(o1) != o2) continue;
      std::vector<std::size_t> mates;
      for (std::size_t o : world.image_objects[i]) {
        if (o != o1 && world.scene_of[o] == world.scene_of[o1]) mates.push_back(o);
      }
      if (mates.size() < 2) continue;
      std::vector<TokenId> prefix;
      for (std::size_t pos = 0; pos < next_obj; ++pos) {
        prefix.push_back(world.slot_kind(pos) == sim::SlotKind::function ? top_function_word(pos) : world.object_token(o1));
      }
      const Distribution p = softmax(world.next_logits(i, prefix));
      if (p.argmax() != world.object_token(o2)) continue;
      const double cutoff = beta * p[p.argmax()];
      bool inside = true;
      for (std::size_t m : mates) inside = inside && p[world.object_token(m)] >= cutoff;
      if (!inside) continue;
      return TrapSetup{i, o1, o2, std::move(prefix)};
    }
  }
  return std::nullopt;
}

struct TrapRates {
  std::size_t runs = 0;
  std::size_t regular_emits = 0;
  std::size_t cicd_emits = 0;
  std::size_t regular_next = 0;  // o2 at the first continuation slot
  std::size_t cicd_next = 0;
};

inline TrapRates trap_rates(const sim::SynthWorld& world, const TrapSetup& trap, std::size_t seeds,
                            const EngineConfig& base = {}) {
  TrapRates r;
  sim::SimBackend backend(world);
  const TokenId target = world.object_token(trap.o2);
  const ContrastChooser chooser(world, world.image_ids.size(), {});
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const std::size_t c = chooser.choose(trap.image, s);
    EngineConfig ec = base;
    ec.seed = sampling_seed(s, trap.image);
    const auto& a = world.image_ids[trap.image];
    const auto& b = world.image_ids[c];
    const auto reg = generate(backend, a, b, trap.prefix, regular_config(ec));
    const auto cic = generate(backend, a, b, trap.prefix, ec);
    auto emits = [&](const GenerationResult& g) { return std::find(g.tokens.begin(), g.tokens.end(), target) != g.tokens.end(); };
    ++r.runs;
    r.regular_emits += emits(reg);
    r.cicd_emits += emits(cic);
    r.regular_next += !reg.tokens.empty() && reg.tokens[0] == target;
    r.cicd_next += !cic.tokens.empty() && cic.tokens[0] == target;
  }
  return r;
}

}  // namespace cicd::experiment
