#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "cicd/backend.hpp"
#include "cicd/error.hpp"
#include "cicd/logits.hpp"
#include "cicd/selector.hpp"
#include "cicd/util.hpp"

namespace cicd::sim {

enum class SlotKind { function, object, end };

inline const char* slot_name(SlotKind k) {
  switch (k) {
    case SlotKind::function: return "function";
    case SlotKind::object: return "object";
    case SlotKind::end: return "end";
  }
  return "end";
}

inline constexpr double kFloorLogit = -20.0;

struct WorldConfig {
  std::size_t function_words = 64;
  std::size_t objects = 40;
  std::size_t images = 200;
  std::size_t objects_per_image = 4;
  std::size_t scenes = 8;
  std::size_t scene_objects_per_image = 3;
  double prior_sharpness = 1.0;
  double hub_bonus = 0.5;
  double prior_noise = 0.2;
  double w_lang = 3.0;
  double w_vis = 1.5;
  std::string template_cycle = "FFFO";
  std::size_t cycles = 4;
  double function_spread = 0.3;
  std::size_t function_objects = 4;
  double function_object_ratio = 0.2;
  double repetition_penalty = 3.0;
  double prior_jitter = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::config_error, m); };
    if (function_words == 0 || objects == 0) fail("vocabulary partitions must be nonempty");
    if (images == 0) fail("image count must be positive");
    if (objects_per_image == 0 || objects_per_image > objects) fail("objects per image must lie in [1, objects]");
    if (scenes == 0 || scenes > objects) fail("scene count must lie in [1, objects]");
    if (scene_objects_per_image > objects_per_image) fail("scene objects per image exceed objects per image");
    if (scene_objects_per_image > objects / scenes) fail("scene objects per image exceed the smallest scene");
    if (template_cycle.empty() || template_cycle.find_first_not_of("FO") != std::string::npos)
      fail("template cycle must be a nonempty string over {F, O}");
    if (cycles == 0) fail("cycles must be positive");
    if (function_objects > objects) fail("function-slot objects exceed object count");
    if (!(function_object_ratio > 0.0)) fail("function object ratio must be positive");
    if (!(w_vis > 0.0) || !(w_lang >= 0.0)) fail("weights must satisfy w_lang >= 0 and w_vis > 0");
    for (double v : {prior_sharpness, hub_bonus, prior_noise, function_spread, repetition_penalty, prior_jitter}) {
      if (!(v >= 0.0) || !std::isfinite(v)) fail("prior parameters must be finite and nonnegative");
    }
  }
};

inline WorldConfig default_config() { return {}; }

// Default world plus image-specific noise on function slots.
inline WorldConfig corpus_config() {
  WorldConfig c;
  c.prior_jitter = 0.12;
  return c;
}

// Strong prior, weak vision, short captions.
inline WorldConfig trap_config() {
  WorldConfig c;
  c.w_lang = 6.0;
  c.w_vis = 0.95;
  c.hub_bonus = 0.62;
  c.prior_noise = 0.05;
  c.cycles = 3;
  return c;
}

inline WorldConfig preset_config(const std::string& name) {
  if (name == "default") return default_config();
  if (name == "corpus") return corpus_config();
  if (name == "trap") return trap_config();
  throw Error(Errc::config_error, "unknown world preset '" + name + "'");
}

namespace detail {

inline const std::vector<std::string>& function_word_names() {
  static const std::vector<std::string> names = {
      "the",   "a",      "an",      "of",     "in",     "on",     "with",    "and",     "is",     "are",    "there",
      "near",  "next",   "to",      "by",     "at",     "its",    "their",   "this",    "that",   "some",   "two",
      "three", "several", "small",  "large",  "left",   "right",  "top",     "bottom",  "front",  "behind", "under",
      "over",  "beside", "while",   "which",  "it",     "they",   "sitting", "standing", "looks", "appears", "image",
      "picture", "scene", "shows",  "also",   "both",   "other",  "one",     "another", "each",   "few",    "many",
      "very",  "quite",  "from",    "into",   "onto",   "around", "along",   "between", "across"};
  return names;
}

inline const std::vector<std::string>& object_names() {
  static const std::vector<std::string> names = {
      "person",      "bicycle",    "car",        "motorcycle",   "airplane",     "bus",          "train",
      "truck",       "boat",       "traffic_light", "fire_hydrant", "stop_sign", "parking_meter", "bench",
      "bird",        "cat",        "dog",        "horse",        "sheep",        "cow",          "elephant",
      "bear",        "zebra",      "giraffe",    "backpack",     "umbrella",     "handbag",      "tie",
      "suitcase",    "frisbee",    "skis",       "snowboard",    "sports_ball",  "kite",         "baseball_bat",
      "baseball_glove", "skateboard", "surfboard", "tennis_racket", "bottle",     "wine_glass",   "cup",
      "fork",        "knife",      "spoon",      "bowl",         "banana",       "apple",        "sandwich",
      "orange",      "broccoli",   "carrot",     "hot_dog",      "pizza",        "donut",        "cake",
      "chair",       "couch",      "potted_plant", "bed",        "dining_table", "toilet",       "tv",
      "laptop",      "mouse",      "remote",     "keyboard",     "cell_phone",   "microwave",    "oven",
      "toaster",     "sink",       "refrigerator", "book",       "clock",        "vase",         "scissors",
      "teddy_bear",  "hair_drier", "toothbrush"};
  return names;
}

inline std::vector<std::size_t> choose_distinct(Rng& rng, std::vector<std::size_t> pool, std::size_t k) {
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

// Standard normal keyed by its coordinates rather than drawn in sequence.
inline double keyed_normal(std::uint64_t seed, std::size_t image, std::size_t pos, std::size_t object) {
  const std::uint64_t h = mix_seed(seed, 0x6a177e5ULL, image, pos, object);
  const double u1 = (static_cast<double>(splitmix64(h) >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(splitmix64(h ^ 0x5bd1e995ULL) >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace detail

struct TrapPair {
  std::size_t o1 = 0;  // present in the image
  std::size_t o2 = 0;  // most likely follower of o1 under the prior, absent
  std::size_t image = 0;
};

class SynthWorld {
 public:
  WorldConfig config;
  std::vector<std::string> tokens;
  std::vector<std::string> image_ids;
  std::vector<std::vector<std::size_t>> image_objects;  // sorted object indices
  std::vector<std::size_t> scene_of;
  std::vector<std::vector<double>> prior;  // rows: context object, last row = no context
  std::vector<std::vector<double>> function_scores;
  std::vector<std::vector<std::size_t>> function_slot_objects;
  std::vector<double> function_object_level;
  nlohmann::json calibration;  // filled by the calibration routine

  std::size_t vocab_size() const { return tokens.size(); }
  std::size_t n_function() const { return config.function_words; }
  std::size_t n_objects() const { return config.objects; }
  TokenId end_token() const { return static_cast<TokenId>(config.function_words + config.objects); }
  TokenId object_token(std::size_t o) const { return static_cast<TokenId>(config.function_words + o); }
  bool is_function_token(TokenId t) const { return t < config.function_words; }
  bool is_object_token(TokenId t) const { return t >= config.function_words && t < end_token(); }
  std::size_t object_of(TokenId t) const { return t - config.function_words; }
  std::size_t hub_of(std::size_t o) const { return scene_of[o]; }
  std::size_t caption_length() const { return config.template_cycle.size() * config.cycles; }

  SlotKind slot_kind(std::size_t pos) const {
    if (pos >= caption_length()) return SlotKind::end;
    return config.template_cycle[pos % config.template_cycle.size()] == 'F' ? SlotKind::function : SlotKind::object;
  }

  std::size_t image_index(const std::string& id) const {
    auto it = std::find(image_ids.begin(), image_ids.end(), id);
    if (it == image_ids.end()) throw Error(Errc::not_found, "unknown image id '" + id + "'");
    return static_cast<std::size_t>(it - image_ids.begin());
  }

  bool image_has(std::size_t image, std::size_t object) const {
    const auto& objs = image_objects.at(image);
    return std::binary_search(objs.begin(), objs.end(), object);
  }

  std::set<std::string> ground_truth_objects(const std::string& image_id) const {
    std::set<std::string> out;
    for (std::size_t o : image_objects[image_index(image_id)]) out.insert(tokens[object_token(o)]);
    return out;
  }

  bool disjoint(std::size_t a, std::size_t b) const {
    for (std::size_t o : image_objects.at(a)) {
      if (image_has(b, o)) return false;
    }
    return true;
  }

  // Next-token scores after `context` (prompt plus generated tokens).
  LogitVector next_logits(std::size_t image, std::span<const TokenId> context) const {
    const std::size_t pos = context.size();
    std::vector<double> l(vocab_size(), kFloorLogit);
    const SlotKind kind = slot_kind(pos);
    if (kind == SlotKind::end) {
      l[end_token()] = 0.0;
      return LogitVector(std::move(l));
    }
    const std::size_t j = pos % config.template_cycle.size();
    if (kind == SlotKind::function) {
      for (std::size_t f = 0; f < n_function(); ++f) l[f] = function_scores[j][f];
      for (std::size_t o : function_slot_objects[j]) {
        double v = function_object_level[j];
        if (config.prior_jitter > 0.0) v += config.prior_jitter * detail::keyed_normal(config.seed, image, pos, o);
        l[object_token(o)] = v;
      }
      return LogitVector(std::move(l));
    }
    std::size_t ctx = n_objects();
    std::vector<double> lang;
    std::vector<std::size_t> mentioned;
    for (TokenId t : context) {
      if (is_object_token(t)) {
        ctx = object_of(t);
        mentioned.push_back(ctx);
      }
    }
    lang = prior[ctx];
    for (std::size_t o : mentioned) lang[o] -= config.repetition_penalty;
    for (std::size_t o = 0; o < n_objects(); ++o) {
      const double vis = image_has(image, o) ? 1.0 : -1.0;
      l[object_token(o)] = config.w_lang * lang[o] + config.w_vis * vis;
    }
    return LogitVector(std::move(l));
  }

  // Prior's favourite follower of o (ties to the lower index).
  std::size_t top_follower(std::size_t o) const {
    std::size_t best = o == 0 ? 1 : 0;
    for (std::size_t c = 0; c < n_objects(); ++c) {
      if (c != o && prior[o][c] > prior[o][best]) best = c;
    }
    return best;
  }

  std::vector<TrapPair> find_traps() const {
    std::vector<TrapPair> out;
    if (n_objects() < 2) return out;
    for (std::size_t i = 0; i < image_objects.size(); ++i) {
      for (std::size_t o1 : image_objects[i]) {
        const std::size_t o2 = top_follower(o1);
        if (!image_has(i, o2)) out.push_back({o1, o2, i});
      }
    }
    return out;
  }

  // Multi-hot object vectors, usable as a retrieval store.
  EmbeddingStore embeddings() const {
    std::vector<std::pair<std::string, std::vector<double>>> records;
    for (std::size_t i = 0; i < image_ids.size(); ++i) {
      std::vector<double> v(n_objects(), 0.0);
      for (std::size_t o : image_objects[i]) v[o] = 1.0;
      records.emplace_back(image_ids[i], std::move(v));
    }
    return build_store(std::move(records));
  }

  std::string digest() const;
};

inline SynthWorld build_world(const WorldConfig& cfg) {
  cfg.validate();
  SynthWorld w;
  w.config = cfg;
  Rng rng(cfg.seed);
  const std::size_t nF = cfg.function_words, nO = cfg.objects;

  for (std::size_t f = 0; f < nF; ++f) {
    const auto& names = detail::function_word_names();
    w.tokens.push_back(f < names.size() ? names[f] : "fw" + std::to_string(f));
  }
  for (std::size_t o = 0; o < nO; ++o) {
    const auto& names = detail::object_names();
    w.tokens.push_back(o < names.size() ? names[o] : "obj" + std::to_string(o));
  }
  w.tokens.push_back("<end>");

  w.scene_of.resize(nO);
  for (std::size_t o = 0; o < nO; ++o) w.scene_of[o] = o % cfg.scenes;

  w.prior.assign(nO + 1, std::vector<double>(nO, 0.0));
  for (std::size_t c = 0; c < nO; ++c) {
    for (std::size_t o = 0; o < nO; ++o) {
      const bool same = w.scene_of[c] == w.scene_of[o] && c != o;
      const bool hub = same && o == w.hub_of(c);
      w.prior[c][o] = cfg.prior_sharpness * same + cfg.hub_bonus * hub + cfg.prior_noise * rng.uniform();
    }
  }
  for (std::size_t o = 0; o < nO; ++o) {
    const bool hub = o == w.hub_of(o);
    w.prior[nO][o] = cfg.prior_noise * rng.uniform() + 0.5 * cfg.prior_sharpness * hub;
  }

  for (std::size_t i = 0; i < cfg.images; ++i) {
    const std::size_t sc = static_cast<std::size_t>(rng.below(cfg.scenes));
    std::vector<std::size_t> members, rest;
    for (std::size_t o = 0; o < nO; ++o) (w.scene_of[o] == sc ? members : rest).push_back(o);
    auto chosen = detail::choose_distinct(rng, members, cfg.scene_objects_per_image);
    std::vector<std::size_t> others;
    for (std::size_t o = 0; o < nO; ++o) {
      if (std::find(chosen.begin(), chosen.end(), o) == chosen.end()) others.push_back(o);
    }
    auto extra = detail::choose_distinct(rng, others, cfg.objects_per_image - cfg.scene_objects_per_image);
    chosen.insert(chosen.end(), extra.begin(), extra.end());
    std::sort(chosen.begin(), chosen.end());
    w.image_objects.push_back(std::move(chosen));
    w.image_ids.push_back("img_" + std::to_string(i));
  }

  const std::size_t period = cfg.template_cycle.size();
  std::vector<std::size_t> all(nO);
  for (std::size_t o = 0; o < nO; ++o) all[o] = o;
  for (std::size_t j = 0; j < period; ++j) {
    std::vector<double> scores(nF);
    for (double& s : scores) s = cfg.function_spread * rng.uniform();
    w.function_object_level.push_back(*std::max_element(scores.begin(), scores.end()) +
                                      std::log(cfg.function_object_ratio));
    w.function_scores.push_back(std::move(scores));
    w.function_slot_objects.push_back(detail::choose_distinct(rng, all, cfg.function_objects));
  }
  return w;
}

inline nlohmann::json config_to_json(const WorldConfig& c) {
  return {{"function_words", c.function_words},
          {"objects", c.objects},
          {"images", c.images},
          {"objects_per_image", c.objects_per_image},
          {"scenes", c.scenes},
          {"scene_objects_per_image", c.scene_objects_per_image},
          {"prior_sharpness", c.prior_sharpness},
          {"hub_bonus", c.hub_bonus},
          {"prior_noise", c.prior_noise},
          {"w_lang", c.w_lang},
          {"w_vis", c.w_vis},
          {"template_cycle", c.template_cycle},
          {"cycles", c.cycles},
          {"function_spread", c.function_spread},
          {"function_objects", c.function_objects},
          {"function_object_ratio", c.function_object_ratio},
          {"repetition_penalty", c.repetition_penalty},
          {"prior_jitter", c.prior_jitter},
          {"seed", c.seed}};
}

inline WorldConfig config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("function_words", c.function_words);
  get("objects", c.objects);
  get("images", c.images);
  get("objects_per_image", c.objects_per_image);
  get("scenes", c.scenes);
  get("scene_objects_per_image", c.scene_objects_per_image);
  get("prior_sharpness", c.prior_sharpness);
  get("hub_bonus", c.hub_bonus);
  get("prior_noise", c.prior_noise);
  get("w_lang", c.w_lang);
  get("w_vis", c.w_vis);
  get("template_cycle", c.template_cycle);
  get("cycles", c.cycles);
  get("function_spread", c.function_spread);
  get("function_objects", c.function_objects);
  get("function_object_ratio", c.function_object_ratio);
  get("repetition_penalty", c.repetition_penalty);
  get("prior_jitter", c.prior_jitter);
  get("seed", c.seed);
  return c;
}

inline nlohmann::json to_json(const SynthWorld& w) {
  nlohmann::json j;
  j["format"] = "cicd-world/1";
  j["config"] = config_to_json(w.config);
  j["seed"] = w.config.seed;
  j["vocab"] = {{"tokens", w.tokens},
                {"function", {0, w.n_function()}},
                {"object", {w.n_function(), w.n_function() + w.n_objects()}},
                {"end", w.end_token()}};
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < w.image_ids.size(); ++i) {
    images.push_back({{"id", w.image_ids[i]}, {"objects", w.image_objects[i]}});
  }
  j["images"] = images;
  j["scenes"] = w.scene_of;
  j["prior"] = w.prior;
  j["weights"] = {{"object", {{"w_lang", w.config.w_lang}, {"w_vis", w.config.w_vis}}},
                  {"function", {{"w_lang", 1.0}, {"w_vis", 0.0}}}};
  j["function_slots"] = {{"scores", w.function_scores},
                         {"objects", w.function_slot_objects},
                         {"object_level", w.function_object_level},
                         {"jitter", w.config.prior_jitter}};
  j["calibration"] = w.calibration.is_null() ? nlohmann::json::object() : w.calibration;
  return j;
}

inline SynthWorld world_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string{}) != "cicd-world/1") throw Error(Errc::config_error, "not a cicd-world/1 document");
    SynthWorld w;
    w.config = config_from_json(j.at("config"));
    w.config.validate();
    w.tokens = j.at("vocab").at("tokens").get<std::vector<std::string>>();
    const std::size_t nF = w.config.function_words, nO = w.config.objects;
    if (w.tokens.size() != nF + nO + 1) throw Error(Errc::config_error, "token table size disagrees with config");
    for (const auto& img : j.at("images")) {
      w.image_ids.push_back(img.at("id").get<std::string>());
      auto objs = img.at("objects").get<std::vector<std::size_t>>();
      std::sort(objs.begin(), objs.end());
      if (objs.empty() || objs.back() >= nO || std::adjacent_find(objs.begin(), objs.end()) != objs.end())
        throw Error(Errc::config_error, "image '" + w.image_ids.back() + "' has an invalid object set");
      w.image_objects.push_back(std::move(objs));
    }
    if (w.image_ids.empty()) throw Error(Errc::config_error, "world has no images");
    if (std::set<std::string>(w.image_ids.begin(), w.image_ids.end()).size() != w.image_ids.size())
      throw Error(Errc::duplicate_id, "duplicate image id in world");
    w.scene_of = j.at("scenes").get<std::vector<std::size_t>>();
    w.prior = j.at("prior").get<std::vector<std::vector<double>>>();
    if (w.scene_of.size() != nO || w.prior.size() != nO + 1) throw Error(Errc::config_error, "prior table shape mismatch");
    for (const auto& row : w.prior) {
      if (row.size() != nO) throw Error(Errc::config_error, "prior table shape mismatch");
      for (double v : row) {
        if (!std::isfinite(v)) throw Error(Errc::config_error, "prior table has a non-finite entry");
      }
    }
    for (std::size_t s : w.scene_of) {
      if (s >= w.config.scenes) throw Error(Errc::config_error, "scene index out of range");
    }
    const auto& fs = j.at("function_slots");
    w.function_scores = fs.at("scores").get<std::vector<std::vector<double>>>();
    w.function_slot_objects = fs.at("objects").get<std::vector<std::vector<std::size_t>>>();
    w.function_object_level = fs.at("object_level").get<std::vector<double>>();
    const std::size_t period = w.config.template_cycle.size();
    if (w.function_scores.size() != period || w.function_slot_objects.size() != period ||
        w.function_object_level.size() != period)
      throw Error(Errc::config_error, "function-slot tables do not match the template");
    for (std::size_t k = 0; k < period; ++k) {
      if (w.function_scores[k].size() != nF) throw Error(Errc::config_error, "function score row has wrong length");
      for (std::size_t o : w.function_slot_objects[k]) {
        if (o >= nO) throw Error(Errc::config_error, "function-slot object out of range");
      }
    }
    if (j.contains("calibration")) w.calibration = j.at("calibration");
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_error, std::string("malformed world document: ") + e.what());
  }
}

inline std::string SynthWorld::digest() const { return digest_hex(to_json(*this).dump()); }

inline SynthWorld load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config_error, "cannot open world file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::config_error, "world file '" + path + "': " + e.what());
  }
  return world_from_json(j);
}

inline void save_world(const std::string& path, const SynthWorld& w) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::config_error, "cannot write world file '" + path + "'");
  out << to_json(w).dump(1) << '\n';
}

class SimBackend : public ModelBackend {
 public:
  explicit SimBackend(const SynthWorld& world) : world_(world) {}

  BackendInfo hello() override {
    return {world_.vocab_size(), vocab_digest(world_.tokens), world_.end_token(), world_.tokens};
  }

  void init(const std::string& session, const std::string& image_id, std::span<const TokenId> prompt) override {
    if (sessions_.count(session)) throw Error(Errc::session_error, "session '" + session + "' already exists");
    for (TokenId t : prompt) {
      if (t >= world_.vocab_size()) throw Error(Errc::dimension_error, "prompt token out of range");
    }
    sessions_[session] = State{world_.image_index(image_id), {prompt.begin(), prompt.end()}, prompt.size()};
  }

  LogitVector step(const std::string& session, std::uint64_t step) override {
    const State& s = state(session);
    if (step != s.context.size() - s.prompt_len)
      throw Error(Errc::session_error, "step " + std::to_string(step) + " requested after " +
                                           std::to_string(s.context.size() - s.prompt_len) + " fed tokens");
    return world_.next_logits(s.image, s.context);
  }

  void feed(const std::string& session, TokenId token) override {
    if (token >= world_.vocab_size()) throw Error(Errc::dimension_error, "token out of range");
    state(session).context.push_back(token);
  }

  void close(const std::string& session) override { sessions_.erase(session); }

  std::size_t open_sessions() const { return sessions_.size(); }

 private:
  struct State {
    std::size_t image = 0;
    std::vector<TokenId> context;
    std::size_t prompt_len = 0;
  };

  State& state(const std::string& session) {
    auto it = sessions_.find(session);
    if (it == sessions_.end()) throw Error(Errc::session_error, "unknown session '" + session + "'");
    return it->second;
  }

  const SynthWorld& world_;
  std::map<std::string, State> sessions_;
};

}  // namespace cicd::sim
