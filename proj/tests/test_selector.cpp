#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "cicd/selector.hpp"
#include "stores.hpp"

using namespace cicd;
using namespace fixture;

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

}  // namespace

TEST(Store, BuildErrors) {
  expect_errc(Errc::insufficient_pool, [] { build_store({}); });
  expect_errc(Errc::dimension_error, [] { build_store({{"a", {}}}); });
  expect_errc(Errc::dimension_error, [] { build_store({{"a", {1, 2}}, {"b", {1}}}); });
  expect_errc(Errc::duplicate_id, [] { build_store({{"a", {1}}, {"a", {2}}}); });
  const auto s = build_store({{"a", {1, 0}}, {"b", {0, 1}}});
  expect_errc(Errc::not_found, [&] { s.vector("zz"); });
}

TEST(Retrieve, Examples) {
  const auto s = build_store({{"a", {1, 0}}, {"b", {0, 1}}, {"c", {-1, 0}}});
  const auto r = select_retrieved(s, "a");
  EXPECT_EQ(r.chosen_id, "c");
  EXPECT_EQ(*r.similarity, -1.0);
  EXPECT_EQ(r.mode, SelectionMode::retrieved);
  const auto two = build_store({{"x", {1, 2}}, {"y", {3, 1}}});
  EXPECT_EQ(select_retrieved(two, "x").chosen_id, "y");
  EXPECT_EQ(select_retrieved(two, "y").chosen_id, "x");
}

TEST(Retrieve, TiesGoToSmallerId) {
  const auto s = build_store({{"q", {1, 0}}, {"m", {0, 1}}, {"k", {0, 1}}, {"z", {0, 2}}});
  EXPECT_EQ(select_retrieved(s, "q").chosen_id, "k");
}

TEST(Retrieve, ZeroVectorIsRejected) {
  const auto s = build_store({{"q", {1, 0}}, {"o", {0, 0}}});
  expect_errc(Errc::zero_norm, [&] { select_retrieved(s, "q"); });
}

TEST(Retrieve, SingleEntryHasNoCandidate) {
  const auto s = build_store({{"q", {1, 0}}});
  expect_errc(Errc::insufficient_pool, [&] { select_retrieved(s, "q"); });
}

TEST(Retrieve, MatchesBruteForceOnRandomStores) {
  Rng rng(1234);
  for (int k = 0; k < 1000; ++k) {
    const std::size_t n = 2 + rng.below(19);
    const std::size_t dim = 1 + rng.below(8);
    const auto recs = random_records(rng, n, dim);
    const auto store = build_store(recs);
    const auto& q = recs[rng.below(recs.size())];
    const auto got = select_retrieved(store, q.first);
    ASSERT_EQ(got.chosen_id, brute_force(recs, q.first, q.second)) << "store " << k;
    ASSERT_NE(got.chosen_id, q.first);
    ASSERT_NEAR(*got.similarity, static_cast<double>(cos_ld(q.second, store.vector(got.chosen_id))), 1e-15);

    const auto ext = random_vec(rng, dim);
    ASSERT_EQ(select_retrieved(store, "external", ext).chosen_id, brute_force(recs, "external", ext));
  }
}

TEST(Retrieve, ScaleInvariant) {
  Rng rng(77);
  for (int k = 0; k < 300; ++k) {
    auto recs = random_records(rng, 2 + rng.below(15), 1 + rng.below(6));
    const std::string qid = recs[0].first;
    const auto before = select_retrieved(build_store(recs), qid).chosen_id;
    for (auto& [id, v] : recs) {
      const double c = std::ldexp(1.0, static_cast<int>(rng.below(9)) - 4);
      for (auto& x : v) x *= c;
    }
    ASSERT_EQ(select_retrieved(build_store(recs), qid).chosen_id, before);
  }
}

TEST(Random, NeverSelf) {
  const auto s = build_store({{"a", {1}}, {"b", {1}}});
  Rng rng(3);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(select_random(s, "a", rng).chosen_id, "b");
  expect_errc(Errc::insufficient_pool, [&] { select_random(build_store({{"a", {1}}}), "a", rng); });
  expect_errc(Errc::insufficient_pool, [&] { select_random_id({"a"}, "a", rng); });
}

TEST(Random, DeterministicForSeed) {
  const auto s = build_store({{"a", {1}}, {"b", {1}}, {"c", {1}}, {"d", {1}}});
  Rng r1(9), r2(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(select_random(s, "a", r1).chosen_id, select_random(s, "a", r2).chosen_id);
}

TEST(Random, UniformWithinThreeSigma) {
  const auto s = build_store({{"q", {1}}, {"a", {1}}, {"b", {1}}, {"c", {1}}, {"d", {1}}, {"e", {1}}});
  Rng rng(2024);
  std::map<std::string, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[select_random(s, "q", rng).chosen_id];
  ASSERT_EQ(counts.size(), 5u);
  const double sigma = std::sqrt(n * 0.2 * 0.8);
  for (const auto& [id, c] : counts) EXPECT_NEAR(c, 0.2 * n, 3 * sigma) << id;
}

TEST(EmbFile, RoundTrip) {
  Rng rng(5);
  const auto recs = random_records(rng, 12, 7);
  const auto store = build_store(recs);
  std::stringstream ss;
  save_store(ss, store);
  const auto back = load_store(ss);
  ASSERT_EQ(back.ids(), store.ids());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto a = store.vector(i), b = back.vector(i);
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
}

TEST(EmbFile, Errors) {
  auto load = [](const std::string& text) {
    std::istringstream in(text);
    return load_store(in);
  };
  expect_errc(Errc::parse_error, [&] { load(""); });
  expect_errc(Errc::parse_error, [&] { load("CICD-EMB v2 2 1\na 1 2\n"); });
  expect_errc(Errc::parse_error, [&] { load("CICD-EMB v1 2 2\na 1 2\n"); });
  expect_errc(Errc::parse_error, [&] { load("CICD-EMB v1 2 1\na 1 x\n"); });
  expect_errc(Errc::dimension_error, [&] { load("CICD-EMB v1 2 1\na 1 2 3\n"); });
  expect_errc(Errc::duplicate_id, [&] { load("CICD-EMB v1 1 2\na 1\na 2\n"); });
  expect_errc(Errc::not_found, [] { load_store(std::string("/nonexistent/file.emb")); });
  EXPECT_EQ(load("CICD-EMB v1 2 1\n\nimg_1 0.5 -1e-3\n").dim(), 2u);
}
