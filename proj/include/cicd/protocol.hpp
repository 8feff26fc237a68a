#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "json.hpp"

#include "cicd/backend.hpp"
#include "cicd/error.hpp"
#include "cicd/logits.hpp"

namespace cicd::proto {

inline constexpr std::string_view kVersion = "cicd/1";

struct Hello {
  friend bool operator==(const Hello&, const Hello&) = default;
};
struct HelloAck {
  std::size_t vocab_size = 0;
  std::string vocab_digest;
  TokenId end_token = 0;
  std::vector<std::string> tokens;
  friend bool operator==(const HelloAck&, const HelloAck&) = default;
};
struct Init {
  std::string image_id;
  std::vector<TokenId> prompt;
  friend bool operator==(const Init&, const Init&) = default;
};
struct InitAck {
  friend bool operator==(const InitAck&, const InitAck&) = default;
};
struct StepRequest {
  std::uint64_t step = 0;
  friend bool operator==(const StepRequest&, const StepRequest&) = default;
};
struct Logits {
  std::uint64_t step = 0;
  LogitVector values;
  friend bool operator==(const Logits&, const Logits&) = default;
};
struct Feed {
  TokenId token = 0;
  friend bool operator==(const Feed&, const Feed&) = default;
};
struct FeedAck {
  std::uint64_t step = 0;
  friend bool operator==(const FeedAck&, const FeedAck&) = default;
};
struct Close {
  friend bool operator==(const Close&, const Close&) = default;
};
struct ErrorFrame {
  std::string code;
  std::string message;
  friend bool operator==(const ErrorFrame&, const ErrorFrame&) = default;
};

using Payload = std::variant<Hello, HelloAck, Init, InitAck, StepRequest, Logits, Feed, FeedAck, Close, ErrorFrame>;

inline constexpr const char* kTypeNames[] = {"hello", "hello_ack", "init",    "init_ack", "step_request",
                                             "logits", "feed",     "feed_ack", "close",   "error"};

struct WireMessage {
  std::string session;
  Payload payload;

  std::string_view type() const { return kTypeNames[payload.index()]; }
  template <typename T>
  bool is() const {
    return std::holds_alternative<T>(payload);
  }
  template <typename T>
  const T& as() const {
    return std::get<T>(payload);
  }
  friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

struct EncodeOptions {
  std::optional<std::size_t> vocab_size;  // checked against logits payloads
  bool binary_logits = false;             // logits_f32_b64 instead of a number array
};

inline std::string base64_encode(std::string_view bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t n = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8) | std::uint8_t(bytes[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t n = std::uint8_t(bytes[i]) << 16;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t n = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::optional<std::string> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) return std::nullopt;
  std::string out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        if (pad) return std::nullopt;
        v[k] = value(c);
        if (v[k] < 0) return std::nullopt;
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += char((n >> 16) & 0xff);
    if (pad < 2) out += char((n >> 8) & 0xff);
    if (pad < 1) out += char(n & 0xff);
  }
  return out;
}

namespace detail {

inline std::string pack_f32(std::span<const double> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int k = 0; k < 4; ++k) bytes[4 * i + k] = static_cast<char>((bits >> (8 * k)) & 0xff);
  }
  return bytes;
}

inline std::vector<double> unpack_f32(std::string_view bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= std::uint32_t(std::uint8_t(bytes[4 * i + k])) << (8 * k);
    float f;
    std::memcpy(&f, &bits, 4);
    out[i] = f;
  }
  return out;
}

template <typename T>
T field(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw Error(Errc::parse_error, std::string("missing field '") + key + "'", 0);
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::parse_error, std::string("field '") + key + "' has the wrong type", 0);
  }
}

}  // namespace detail

inline std::string encode(const WireMessage& msg, const EncodeOptions& opts = {}) {
  nlohmann::json j;
  j["v"] = kVersion;
  j["type"] = msg.type();
  j["session"] = msg.session;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, HelloAck>) {
          j["vocab_size"] = p.vocab_size;
          j["vocab_digest"] = p.vocab_digest;
          j["end_token"] = p.end_token;
          if (!p.tokens.empty()) {
            if (p.tokens.size() != p.vocab_size) throw Error(Errc::encoding_error, "token table length differs from vocab_size");
            j["tokens"] = p.tokens;
          }
        } else if constexpr (std::is_same_v<T, Init>) {
          j["image_id"] = p.image_id;
          j["prompt"] = p.prompt;
        } else if constexpr (std::is_same_v<T, StepRequest> || std::is_same_v<T, FeedAck>) {
          j["step"] = p.step;
        } else if constexpr (std::is_same_v<T, Logits>) {
          const LogitVector& v = p.values;
          if (opts.vocab_size && v.size() != *opts.vocab_size)
            throw Error(Errc::encoding_error, "logits length " + std::to_string(v.size()) + " differs from vocab_size " +
                                                  std::to_string(*opts.vocab_size));
          std::vector<double> dense(v.size(), 0.0);
          std::vector<TokenId> masked;
          for (std::size_t i = 0; i < v.size(); ++i) {
            if (v.masked(i)) {
              masked.push_back(static_cast<TokenId>(i));
              continue;
            }
            if (!std::isfinite(v[i])) throw Error(Errc::encoding_error, "non-finite logit at index " + std::to_string(i));
            dense[i] = v[i];
          }
          j["step"] = p.step;
          if (opts.binary_logits) {
            j["logits_f32_b64"] = base64_encode(detail::pack_f32(dense));
          } else {
            j["logits"] = dense;
          }
          if (!masked.empty()) j["masked"] = masked;
        } else if constexpr (std::is_same_v<T, Feed>) {
          j["token"] = p.token;
        } else if constexpr (std::is_same_v<T, ErrorFrame>) {
          j["code"] = p.code;
          j["message"] = p.message;
        }
      },
      msg.payload);
  std::string line;
  try {
    line = j.dump();
  } catch (const nlohmann::json::type_error& e) {
    throw Error(Errc::encoding_error, e.what());
  }
  line += '\n';
  return line;
}

inline WireMessage decode(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  if (auto nl = line.find('\n'); nl != std::string_view::npos)
    throw Error(Errc::parse_error, "embedded newline in frame", nl);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t offset = e.byte > 0 ? e.byte - 1 : 0;
    throw Error(Errc::parse_error, e.what(), offset);
  }
  if (!j.is_object()) throw Error(Errc::parse_error, "frame is not a JSON object", 0);
  auto v = j.find("v");
  if (v == j.end() || !v->is_string() || v->get<std::string>() != kVersion)
    throw Error(Errc::version_error, "expected protocol version " + std::string(kVersion));
  const auto type = detail::field<std::string>(j, "type");
  WireMessage msg;
  msg.session = detail::field<std::string>(j, "session");

  if (type == "hello") {
    msg.payload = Hello{};
  } else if (type == "hello_ack") {
    HelloAck a;
    a.vocab_size = detail::field<std::size_t>(j, "vocab_size");
    a.vocab_digest = detail::field<std::string>(j, "vocab_digest");
    a.end_token = detail::field<TokenId>(j, "end_token");
    if (j.contains("tokens")) {
      a.tokens = detail::field<std::vector<std::string>>(j, "tokens");
      if (a.tokens.size() != a.vocab_size) throw Error(Errc::parse_error, "token table length differs from vocab_size", 0);
    }
    msg.payload = std::move(a);
  } else if (type == "init") {
    msg.payload = Init{detail::field<std::string>(j, "image_id"), detail::field<std::vector<TokenId>>(j, "prompt")};
  } else if (type == "init_ack") {
    msg.payload = InitAck{};
  } else if (type == "step_request") {
    msg.payload = StepRequest{detail::field<std::uint64_t>(j, "step")};
  } else if (type == "logits") {
    Logits l;
    l.step = detail::field<std::uint64_t>(j, "step");
    std::vector<double> dense;
    if (j.contains("logits")) {
      dense = detail::field<std::vector<double>>(j, "logits");
    } else if (j.contains("logits_f32_b64")) {
      auto bytes = base64_decode(detail::field<std::string>(j, "logits_f32_b64"));
      if (!bytes || bytes->size() % 4 != 0) throw Error(Errc::parse_error, "bad logits_f32_b64 payload", 0);
      dense = detail::unpack_f32(*bytes);
    } else {
      throw Error(Errc::parse_error, "logits frame without values", 0);
    }
    std::vector<bool> masked(dense.size(), false);
    if (j.contains("masked")) {
      for (TokenId i : detail::field<std::vector<TokenId>>(j, "masked")) {
        if (i >= dense.size()) throw Error(Errc::parse_error, "masked index out of range", 0);
        masked[i] = true;
      }
    }
    for (std::size_t i = 0; i < dense.size(); ++i) {
      if (!masked[i] && !std::isfinite(dense[i])) throw Error(Errc::parse_error, "non-finite logit", 0);
    }
    l.values = LogitVector(std::move(dense), std::move(masked));
    msg.payload = std::move(l);
  } else if (type == "feed") {
    msg.payload = Feed{detail::field<TokenId>(j, "token")};
  } else if (type == "feed_ack") {
    msg.payload = FeedAck{detail::field<std::uint64_t>(j, "step")};
  } else if (type == "close") {
    msg.payload = Close{};
  } else if (type == "error") {
    msg.payload = ErrorFrame{detail::field<std::string>(j, "code"), detail::field<std::string>(j, "message")};
  } else {
    throw Error(Errc::unknown_type, "unknown message type '" + type + "'");
  }
  return msg;
}

inline WireMessage error_frame(const std::string& session, std::string code, std::string message) {
  return {session, ErrorFrame{std::move(code), std::move(message)}};
}

// Serves one connection: enforces per-session ordering and forwards valid
// requests to the wrapped backend.
class ProtocolServer {
 public:
  explicit ProtocolServer(ModelBackend& backend, bool binary_logits = false)
      : backend_(backend), binary_logits_(binary_logits) {}

  // Zero or one response lines.
  std::optional<std::string> handle(std::string_view line) {
    WireMessage msg;
    try {
      msg = decode(line);
    } catch (const Error& e) {
      return encode(error_frame("", std::string(errc_name(e.code())), e.what()));
    }
    try {
      auto reply = dispatch(msg);
      if (!reply) return std::nullopt;
      return encode(*reply, {info_ ? std::optional(info_->vocab_size) : std::nullopt, binary_logits_});
    } catch (const Error& e) {
      return encode(error_frame(msg.session, std::string(errc_name(e.code())), e.what()));
    } catch (const std::exception& e) {
      return encode(error_frame(msg.session, "InternalError", e.what()));
    }
  }

 private:
  struct Session {
    std::uint64_t fed = 0;
    bool served = false;
  };

  std::optional<WireMessage> dispatch(const WireMessage& msg) {
    const std::string& sid = msg.session;
    if (msg.is<Hello>()) {
      info_ = backend_.hello();
      return WireMessage{sid, HelloAck{info_->vocab_size, info_->vocab_digest, info_->end_token, info_->tokens}};
    }
    if (!info_) return error_frame(sid, "ProtocolOrder", "hello must precede other requests");
    if (const auto* init = std::get_if<Init>(&msg.payload)) {
      if (sessions_.count(sid)) return error_frame(sid, "SessionExists", "session '" + sid + "' already initialized");
      for (TokenId t : init->prompt) {
        if (t >= info_->vocab_size) return error_frame(sid, "InvalidToken", "prompt token out of range");
      }
      backend_.init(sid, init->image_id, init->prompt);
      sessions_[sid] = Session{};
      return WireMessage{sid, InitAck{}};
    }
    if (msg.is<StepRequest>() || msg.is<Feed>() || msg.is<Close>()) {
      auto it = sessions_.find(sid);
      if (it == sessions_.end()) return error_frame(sid, "UnknownSession", "session '" + sid + "' is not initialized");
      Session& s = it->second;
      if (const auto* req = std::get_if<StepRequest>(&msg.payload)) {
        if (req->step != s.fed || s.served)
          return error_frame(sid, "StepOrder", "expected step " + std::to_string(s.fed) + (s.served ? " to be fed" : ""));
        LogitVector values = backend_.step(sid, req->step);
        s.served = true;
        return WireMessage{sid, Logits{req->step, std::move(values)}};
      }
      if (const auto* feed = std::get_if<Feed>(&msg.payload)) {
        if (!s.served) return error_frame(sid, "FeedOrder", "feed requires a served step_request");
        if (feed->token >= info_->vocab_size) return error_frame(sid, "InvalidToken", "token out of range");
        backend_.feed(sid, feed->token);
        s.served = false;
        return WireMessage{sid, FeedAck{s.fed++}};
      }
      backend_.close(sid);
      sessions_.erase(it);
      return std::nullopt;
    }
    return error_frame(sid, "UnexpectedType", "servers do not accept '" + std::string(msg.type()) + "'");
  }

  ModelBackend& backend_;
  bool binary_logits_;
  std::optional<BackendInfo> info_;
  std::map<std::string, Session> sessions_;
};

class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void write_line(const std::string& line) = 0;
  // nullopt on end of stream.
  virtual std::optional<std::string> read_line() = 0;
};

inline void serve(ProtocolServer& server, LineChannel& channel) {
  while (auto line = channel.read_line()) {
    if (line->empty()) continue;
    if (auto reply = server.handle(*line)) channel.write_line(*reply);
  }
}

// A ModelBackend reached through a line channel.
class ProtocolClient : public ModelBackend {
 public:
  explicit ProtocolClient(LineChannel& channel) : channel_(channel) {}

  BackendInfo hello() override {
    auto reply = roundtrip({"", Hello{}});
    const auto& ack = expect<HelloAck>(reply, "");
    BackendInfo info{ack.vocab_size, ack.vocab_digest, ack.end_token, ack.tokens};
    info_ = info;
    return info;
  }

  void init(const std::string& session, const std::string& image_id, std::span<const TokenId> prompt) override {
    ensure_hello();
    expect<InitAck>(roundtrip({session, Init{image_id, {prompt.begin(), prompt.end()}}}), session);
  }

  LogitVector step(const std::string& session, std::uint64_t step) override {
    ensure_hello();
    auto reply = roundtrip({session, StepRequest{step}});
    const auto& l = expect<Logits>(reply, session);
    if (l.step != step) throw Error(Errc::session_error, "logits for step " + std::to_string(l.step) + ", expected " + std::to_string(step));
    if (l.values.size() != info_->vocab_size) throw Error(Errc::dimension_error, "logits length differs from vocab_size");
    return l.values;
  }

  void feed(const std::string& session, TokenId token) override {
    ensure_hello();
    expect<FeedAck>(roundtrip({session, Feed{token}}), session);
  }

  void close(const std::string& session) override {
    std::lock_guard lock(mu_);
    channel_.write_line(encode({session, Close{}}));
  }

 private:
  void ensure_hello() {
    if (!info_) hello();
  }

  WireMessage roundtrip(const WireMessage& msg) {
    std::lock_guard lock(mu_);
    channel_.write_line(encode(msg));
    auto line = channel_.read_line();
    if (!line) throw Error(Errc::session_error, "backend closed the connection");
    return decode(*line);
  }

  template <typename T>
  static const T& expect(const WireMessage& reply, const std::string& session) {
    if (const auto* err = std::get_if<ErrorFrame>(&reply.payload))
      throw Error(Errc::session_error, "backend error " + err->code + ": " + err->message);
    if (!reply.is<T>()) throw Error(Errc::session_error, "unexpected reply type '" + std::string(reply.type()) + "'");
    if (reply.session != session) throw Error(Errc::session_error, "reply for session '" + reply.session + "'");
    return reply.as<T>();
  }

  LineChannel& channel_;
  std::mutex mu_;
  std::optional<BackendInfo> info_;
};

}  // namespace cicd::proto
