#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cicd {

enum class Errc {
  empty_support,
  dimension_error,
  zero_norm,
  degenerate_divergence,
  session_mismatch,
  session_error,
  duplicate_id,
  not_found,
  insufficient_pool,
  config_error,
  encoding_error,
  parse_error,
  unknown_type,
  version_error,
  internal,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::empty_support: return "EmptySupport";
    case Errc::dimension_error: return "DimensionError";
    case Errc::zero_norm: return "ZeroNormError";
    case Errc::degenerate_divergence: return "DegenerateDivergence";
    case Errc::session_mismatch: return "SessionMismatch";
    case Errc::session_error: return "SessionError";
    case Errc::duplicate_id: return "DuplicateId";
    case Errc::not_found: return "NotFound";
    case Errc::insufficient_pool: return "InsufficientPool";
    case Errc::config_error: return "ConfigError";
    case Errc::encoding_error: return "EncodingError";
    case Errc::parse_error: return "ParseError";
    case Errc::unknown_type: return "UnknownType";
    case Errc::version_error: return "VersionError";
    case Errc::internal: return "InternalError";
  }
  return "InternalError";
}

// position: byte offset for ParseError, token index for SessionMismatch,
// step index for SessionError.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, std::optional<std::size_t> position = std::nullopt)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), position_(position) {}

  Errc code() const noexcept { return code_; }
  std::optional<std::size_t> position() const noexcept { return position_; }

 private:
  Errc code_;
  std::optional<std::size_t> position_;
};

}  // namespace cicd
