#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cicd/error.hpp"
#include "cicd/logits.hpp"
#include "cicd/util.hpp"

namespace cicd {

struct BackendInfo {
  std::size_t vocab_size = 0;
  std::string vocab_digest;
  TokenId end_token = 0;
  std::vector<std::string> tokens;  // may be empty when the backend does not share its table
};

inline std::string vocab_digest(std::span<const std::string> tokens) {
  Fnv1a h;
  for (const auto& t : tokens) {
    h.update(t);
    h.update("\n");
  }
  return h.hex();
}

// A model exposing per-step next-token logits for independent sessions.
// Step t of a session is requested after exactly t tokens were fed.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  virtual BackendInfo hello() = 0;
  virtual void init(const std::string& session, const std::string& image_id, std::span<const TokenId> prompt) = 0;
  virtual LogitVector step(const std::string& session, std::uint64_t step) = 0;
  virtual void feed(const std::string& session, TokenId token) = 0;
  virtual void close(const std::string& session) = 0;
};

struct SessionState {
  std::string session;
  std::string image_id;
  std::vector<TokenId> fed_tokens;
  std::int64_t last_step = -1;
};

inline void lockstep_barrier(const SessionState& a, const SessionState& b) {
  const auto& x = a.fed_tokens;
  const auto& y = b.fed_tokens;
  auto [ix, iy] = std::mismatch(x.begin(), x.end(), y.begin(), y.end());
  if (ix != x.end() || iy != y.end()) {
    const auto pos = static_cast<std::size_t>(ix - x.begin());
    throw Error(Errc::session_mismatch,
                "sessions '" + a.session + "' and '" + b.session + "' diverge at token " + std::to_string(pos), pos);
  }
  if (a.last_step != b.last_step) {
    throw Error(Errc::session_mismatch,
                "sessions at different steps: " + std::to_string(a.last_step) + " vs " + std::to_string(b.last_step),
                x.size());
  }
}

}  // namespace cicd
