#pragma once

#include <cmath>
#include <string>

#include "cicd/protocol.hpp"
#include "cicd/util.hpp"

namespace fixture {

using namespace cicd;
using namespace cicd::proto;

inline std::string random_text(Rng& rng) {
  static const char* pieces[] = {"a", "b", "X", "0", "_", "/", " ", "\"", "\\", "\t", "\xc3\xa9"};
  std::string s;
  for (std::size_t n = rng.below(12); n > 0; --n) s += pieces[rng.below(std::size(pieces))];
  return s;
}

inline WireMessage random_message(Rng& rng, bool f32_values) {
  WireMessage m;
  m.session = random_text(rng);
  switch (rng.below(10)) {
    case 0: m.payload = Hello{}; break;
    case 1: {
      HelloAck a;
      a.vocab_size = rng.below(6);
      a.vocab_digest = random_text(rng);
      a.end_token = static_cast<TokenId>(rng.below(1000));
      if (rng.below(2)) {
        for (std::size_t i = 0; i < a.vocab_size; ++i) a.tokens.push_back(random_text(rng));
      }
      m.payload = a;
      break;
    }
    case 2: {
      Init i;
      i.image_id = random_text(rng);
      for (std::size_t k = rng.below(5); k > 0; --k) i.prompt.push_back(static_cast<TokenId>(rng.below(1u << 20)));
      m.payload = i;
      break;
    }
    case 3: m.payload = InitAck{}; break;
    case 4: m.payload = StepRequest{rng.next_u64() >> rng.below(64)}; break;
    case 5: {
      const std::size_t n = rng.below(40);
      std::vector<double> v(n);
      std::vector<bool> masked(n, false);
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = (rng.uniform() - 0.5) * std::pow(10.0, static_cast<double>(rng.below(12)) - 4.0);
        if (f32_values) v[i] = static_cast<float>(v[i]);
        masked[i] = rng.uniform() < 0.2;
        if (masked[i]) v[i] = 0.0;
      }
      m.payload = Logits{rng.below(1000), LogitVector(v, masked)};
      break;
    }
    case 6: m.payload = Feed{static_cast<TokenId>(rng.next_u64())}; break;
    case 7: m.payload = FeedAck{rng.below(1u << 30)}; break;
    case 8: m.payload = Close{}; break;
    default: m.payload = ErrorFrame{random_text(rng), random_text(rng)}; break;
  }
  return m;
}

}  // namespace fixture
