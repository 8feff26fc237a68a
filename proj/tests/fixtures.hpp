#pragma once

#include <cmath>
#include <optional>

#include "cicd/engine.hpp"
#include "cicd/sim.hpp"

namespace fixture {

struct GatePair {
  cicd::LogitVector orig;
  cicd::LogitVector contrast;
};

// Builds orig = zeros(n) and contrast = zeros(n) with the last entry set to
// x, so that log10 JSD lies within tol of target (tol 0 demands an exact
// hit). The computed divergence moves in coarse steps, so several vocab
// sizes are tried.
inline std::optional<GatePair> gate_pair(double target, double tol = 0.0) {
  for (std::size_t n = 2; n < 400; ++n) {
    const cicd::LogitVector orig(std::vector<double>(n, 0.0));
    const auto p = cicd::softmax(orig);
    auto contrast_for = [&](double x) {
      std::vector<double> z(n, 0.0);
      z.back() = x;
      return cicd::LogitVector(std::move(z));
    };
    auto level = [&](double x) { return cicd::js_divergence(p, cicd::softmax(contrast_for(x))).log10_jsd; };
    double lo = 1e-6, hi = 8.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (level(mid) < target ? lo : hi) = mid;
    }
    double x = lo;
    for (int i = 0; i < 64; ++i) x = std::nextafter(x, 0.0);
    for (int i = 0; i < 128; ++i, x = std::nextafter(x, hi + 1.0)) {
      if (std::abs(level(x) - target) <= tol) return GatePair{orig, contrast_for(x)};
    }
  }
  return std::nullopt;
}

inline cicd::sim::SynthWorld small_world(std::uint64_t seed = 0, std::size_t images = 24) {
  auto cfg = cicd::sim::default_config();
  cfg.images = images;
  cfg.seed = seed;
  return cicd::sim::build_world(cfg);
}

}  // namespace fixture
