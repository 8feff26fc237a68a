#include <gtest/gtest.h>

#include <filesystem>

#include "cicd/experiment.hpp"
#include "cicd/sim.hpp"
#include "fixtures.hpp"

using namespace cicd;
using namespace cicd::sim;

namespace {

template <typename F>
void expect_errc(Errc code, F&& f) {
  try {
    f();
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// A context that reaches position pos, filled with slot-appropriate tokens.
std::vector<TokenId> context_to(const SynthWorld& w, std::size_t pos, Rng& rng) {
  std::vector<TokenId> ctx;
  for (std::size_t p = 0; p < pos; ++p) {
    ctx.push_back(w.slot_kind(p) == SlotKind::function ? static_cast<TokenId>(rng.below(w.n_function()))
                                                       : w.object_token(rng.below(w.n_objects())));
  }
  return ctx;
}

}  // namespace

TEST(World, Vocabulary) {
  const auto w = build_world(default_config());
  EXPECT_EQ(w.vocab_size(), 64u + 40u + 1u);
  EXPECT_EQ(w.tokens[w.end_token()], "<end>");
  EXPECT_EQ(w.tokens[w.object_token(0)], "person");
  EXPECT_EQ(std::set<std::string>(w.tokens.begin(), w.tokens.end()).size(), w.tokens.size());
  EXPECT_EQ(sim::detail::object_names().size(), 80u);
  EXPECT_EQ(sim::detail::function_word_names().size(), 64u);
}

TEST(World, ConstructionInvariants) {
  const auto w = build_world(default_config());
  ASSERT_EQ(w.image_ids.size(), 200u);
  for (std::size_t i = 0; i < w.image_ids.size(); ++i) {
    const auto& objs = w.image_objects[i];
    ASSERT_EQ(objs.size(), w.config.objects_per_image);
    ASSERT_TRUE(std::is_sorted(objs.begin(), objs.end()));
    ASSERT_LT(objs.back(), w.n_objects());
    ASSERT_EQ(w.ground_truth_objects(w.image_ids[i]).size(), objs.size());
  }
  for (const auto& row : w.prior) {
    for (double v : row) ASSERT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(w.caption_length(), 16u);
  EXPECT_EQ(w.slot_kind(0), SlotKind::function);
  EXPECT_EQ(w.slot_kind(3), SlotKind::object);
  EXPECT_EQ(w.slot_kind(16), SlotKind::end);
}

TEST(World, DeterministicForSeed) {
  auto cfg = default_config();
  cfg.seed = 9;
  EXPECT_EQ(build_world(cfg).digest(), build_world(cfg).digest());
  auto other = cfg;
  other.seed = 10;
  EXPECT_NE(build_world(cfg).digest(), build_world(other).digest());
}

TEST(World, InvalidConfigs) {
  std::vector<std::function<void(WorldConfig&)>> breaks = {
      [](WorldConfig& c) { c.images = 0; },
      [](WorldConfig& c) { c.objects = 0; },
      [](WorldConfig& c) { c.objects_per_image = 100; },
      [](WorldConfig& c) { c.scene_objects_per_image = 6; },
      [](WorldConfig& c) { c.template_cycle = "FXO"; },
      [](WorldConfig& c) { c.template_cycle = ""; },
      [](WorldConfig& c) { c.cycles = 0; },
      [](WorldConfig& c) { c.w_vis = 0.0; },
      [](WorldConfig& c) { c.w_lang = -1.0; },
      [](WorldConfig& c) { c.prior_jitter = -0.1; },
      [](WorldConfig& c) { c.hub_bonus = NAN; },
  };
  for (auto& b : breaks) {
    auto cfg = default_config();
    b(cfg);
    expect_errc(Errc::config_error, [&] { build_world(cfg); });
  }
  expect_errc(Errc::config_error, [] { preset_config("huge"); });
}

TEST(World, FunctionSlotsAreIdenticalAcrossImages) {
  const auto w = build_world(default_config());
  Rng rng(1);
  for (int k = 0; k < 300; ++k) {
    const std::size_t a = rng.below(w.image_ids.size()), b = rng.below(w.image_ids.size());
    std::size_t pos = rng.below(w.caption_length() + 1);
    while (w.slot_kind(pos) == SlotKind::object) pos = rng.below(w.caption_length() + 1);
    const auto ctx = context_to(w, pos, rng);
    const auto la = w.next_logits(a, ctx), lb = w.next_logits(b, ctx);
    ASSERT_EQ(la, lb);
    ASSERT_EQ(js_divergence(softmax(la), softmax(lb)).jsd, 0.0);
  }
}

TEST(World, ObjectSlotsDifferForDifferentObjectSets) {
  const auto w = build_world(default_config());
  Rng rng(2);
  for (int k = 0; k < 300; ++k) {
    const std::size_t a = rng.below(w.image_ids.size()), b = rng.below(w.image_ids.size());
    if (w.image_objects[a] == w.image_objects[b]) continue;
    std::size_t pos = rng.below(w.caption_length());
    while (w.slot_kind(pos) != SlotKind::object) pos = rng.below(w.caption_length());
    const auto ctx = context_to(w, pos, rng);
    ASSERT_GT(js_divergence(softmax(w.next_logits(a, ctx)), softmax(w.next_logits(b, ctx))).jsd, 0.0);
  }
}

TEST(World, JitterBreaksExactConsistency) {
  auto cfg = default_config();
  cfg.prior_jitter = 0.1;
  const auto w = build_world(cfg);
  Rng rng(3);
  const auto ctx = context_to(w, 0, rng);
  EXPECT_GT(js_divergence(softmax(w.next_logits(0, ctx)), softmax(w.next_logits(1, ctx))).jsd, 0.0);
  EXPECT_EQ(w.next_logits(0, ctx), w.next_logits(0, ctx));
}

TEST(World, TrapsExist) {
  const auto w = build_world(trap_config());
  const auto traps = w.find_traps();
  ASSERT_FALSE(traps.empty());
  for (const auto& t : traps) {
    EXPECT_TRUE(w.image_has(t.image, t.o1));
    EXPECT_FALSE(w.image_has(t.image, t.o2));
    EXPECT_EQ(w.top_follower(t.o1), t.o2);
  }
  const auto setup = experiment::find_trap_setup(w);
  ASSERT_TRUE(setup.has_value());
  const auto p = softmax(w.next_logits(setup->image, setup->prefix));
  EXPECT_EQ(p.argmax(), w.object_token(setup->o2));
  EXPECT_FALSE(w.image_has(setup->image, setup->o2));
}

TEST(World, BimodalityOnDefaultWorld) {
  const auto w = build_world(default_config());
  const auto b = experiment::measure_bimodality(w, 200);
  EXPECT_GT(b.function_steps, 0u);
  EXPECT_GT(b.object_disjoint_steps, 0u);
  EXPECT_GE(b.function_below, 0.95);
  EXPECT_GE(b.object_disjoint_above, 0.95);
}

TEST(World, CalibrationIsRecorded) {
  const auto w = experiment::calibrate(default_config());
  ASSERT_TRUE(w.calibration.contains("w_vis"));
  EXPECT_EQ(w.calibration["w_vis"].get<double>(), w.config.w_vis);
  const auto back = world_from_json(to_json(w));
  EXPECT_EQ(back.calibration, w.calibration);
}

TEST(World, JsonRoundTrip) {
  auto cfg = corpus_config();
  cfg.images = 30;
  cfg.seed = 4;
  const auto w = build_world(cfg);
  const auto back = world_from_json(to_json(w));
  EXPECT_EQ(back.digest(), w.digest());
  Rng rng(6);
  for (std::size_t pos = 0; pos <= w.caption_length(); ++pos) {
    const auto ctx = context_to(w, pos, rng);
    ASSERT_EQ(back.next_logits(3, ctx), w.next_logits(3, ctx));
  }
  const auto path = std::filesystem::temp_directory_path() / ("cicd-world-" + std::to_string(::getpid()) + ".json");
  save_world(path.string(), w);
  EXPECT_EQ(load_world(path.string()).digest(), w.digest());
  std::filesystem::remove(path);
}

TEST(World, MalformedDocuments) {
  const auto good = to_json(fixture::small_world());
  auto broken = [&](auto edit) {
    auto j = good;
    edit(j);
    return j;
  };
  expect_errc(Errc::config_error, [&] { world_from_json(broken([](auto& j) { j["format"] = "other"; })); });
  expect_errc(Errc::config_error, [&] { world_from_json(broken([](auto& j) { j["prior"].erase(0); })); });
  expect_errc(Errc::config_error, [&] { world_from_json(broken([](auto& j) { j["images"][0]["objects"] = {999}; })); });
  expect_errc(Errc::config_error, [&] { world_from_json(broken([](auto& j) { j["images"][0]["objects"] = {1, 1}; })); });
  expect_errc(Errc::config_error, [&] { world_from_json(broken([](auto& j) { j.erase("scenes"); })); });
  expect_errc(Errc::duplicate_id, [&] { world_from_json(broken([](auto& j) { j["images"][1]["id"] = "img_0"; })); });
  expect_errc(Errc::config_error, [] { load_world("/nonexistent/world.json"); });
}

TEST(World, EmbeddingsAreMultiHot) {
  const auto w = fixture::small_world();
  const auto store = w.embeddings();
  ASSERT_EQ(store.size(), w.image_ids.size());
  ASSERT_EQ(store.dim(), w.n_objects());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto v = store.vector(i);
    for (std::size_t o = 0; o < v.size(); ++o) ASSERT_EQ(v[o], w.image_has(i, o) ? 1.0 : 0.0);
  }
}

TEST(SimBackend, SessionRules) {
  const auto w = fixture::small_world();
  SimBackend b(w);
  const auto info = b.hello();
  EXPECT_EQ(info.vocab_size, w.vocab_size());
  EXPECT_EQ(info.vocab_digest, vocab_digest(w.tokens));
  EXPECT_EQ(info.end_token, w.end_token());
  expect_errc(Errc::not_found, [&] { b.init("s", "img_999", {}); });
  expect_errc(Errc::dimension_error, [&] { b.init("s", "img_0", std::vector<TokenId>{9999}); });
  b.init("s", "img_0", std::vector<TokenId>{1, 2});
  expect_errc(Errc::session_error, [&] { b.init("s", "img_0", {}); });
  expect_errc(Errc::session_error, [&] { b.step("s", 1); });
  const auto l0 = b.step("s", 0);
  EXPECT_EQ(l0, w.next_logits(0, std::vector<TokenId>{1, 2}));
  expect_errc(Errc::dimension_error, [&] { b.feed("s", 9999); });
  b.feed("s", 5);
  EXPECT_EQ(b.step("s", 1), w.next_logits(0, std::vector<TokenId>{1, 2, 5}));
  expect_errc(Errc::session_error, [&] { b.step("nobody", 0); });
  b.close("s");
  EXPECT_EQ(b.open_sessions(), 0u);
}
