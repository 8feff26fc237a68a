#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cicd/protocol.hpp"

namespace cicd::proto {

struct ConformanceOptions {
  std::string image_a;
  std::string image_b;
  std::vector<TokenId> prompt;
};

struct ConformanceCase {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ConformanceReport {
  std::vector<ConformanceCase> cases;
  bool passed() const {
    for (const auto& c : cases) {
      if (!c.passed) return false;
    }
    return !cases.empty();
  }
};

namespace detail {

class Probe {
 public:
  explicit Probe(LineChannel& ch) : ch_(ch) {}

  std::optional<WireMessage> send(const std::string& line) {
    ch_.write_line(line);
    return receive();
  }
  std::optional<WireMessage> send(const WireMessage& msg) { return send(encode(msg)); }
  void post(const WireMessage& msg) { ch_.write_line(encode(msg)); }

  std::optional<WireMessage> receive() {
    auto line = ch_.read_line();
    if (!line) return std::nullopt;
    try {
      return decode(*line);
    } catch (const Error&) {
      return std::nullopt;
    }
  }

 private:
  LineChannel& ch_;
};

inline bool is_error(const std::optional<WireMessage>& m, const std::string& session) {
  return m && m->is<ErrorFrame>() && m->session == session;
}

}  // namespace detail

// Checks a backend endpoint against the session-ordering rules of the
// protocol. The channel must be freshly connected.
inline ConformanceReport run_conformance(LineChannel& channel, const ConformanceOptions& opts) {
  ConformanceReport report;
  detail::Probe probe(channel);
  auto check = [&](std::string name, bool ok, std::string detail = {}) {
    report.cases.push_back({std::move(name), ok, std::move(detail)});
    return ok;
  };
  using detail::is_error;

  auto before = probe.send(WireMessage{"s0", Init{opts.image_a, opts.prompt}});
  check("init before hello is rejected", is_error(before, "s0"));

  auto ack = probe.send(WireMessage{"", Hello{}});
  if (!check("hello is acknowledged", ack && ack->is<HelloAck>() && ack->as<HelloAck>().vocab_size > 0 &&
                                          !ack->as<HelloAck>().vocab_digest.empty()))
    return report;
  const std::size_t vocab = ack->as<HelloAck>().vocab_size;

  check("step_request before init is rejected", is_error(probe.send(WireMessage{"a", StepRequest{0}}), "a"));

  auto init_a = probe.send(WireMessage{"a", Init{opts.image_a, opts.prompt}});
  check("init is acknowledged", init_a && init_a->is<InitAck>() && init_a->session == "a");
  check("duplicate init is rejected", is_error(probe.send(WireMessage{"a", Init{opts.image_a, opts.prompt}}), "a"));
  check("feed before step_request is rejected", is_error(probe.send(WireMessage{"a", Feed{0}}), "a"));
  check("out-of-order step index is rejected", is_error(probe.send(WireMessage{"a", StepRequest{1}}), "a"));

  auto a0 = probe.send(WireMessage{"a", StepRequest{0}});
  const bool a0_ok = a0 && a0->is<Logits>() && a0->session == "a" && a0->as<Logits>().step == 0 &&
                     a0->as<Logits>().values.size() == vocab;
  check("step 0 returns vocab-sized logits", a0_ok);
  check("repeated step_request is rejected", is_error(probe.send(WireMessage{"a", StepRequest{0}}), "a"));
  check("out-of-range token is rejected", is_error(probe.send(WireMessage{"a", Feed{static_cast<TokenId>(vocab)}}), "a"));

  auto b_init = probe.send(WireMessage{"b", Init{opts.image_b, opts.prompt}});
  auto c_init = probe.send(WireMessage{"c", Init{opts.image_a, opts.prompt}});
  check("second and third sessions initialize", b_init && b_init->is<InitAck>() && c_init && c_init->is<InitAck>());

  // Feed "a" before "c" asks for its own step 0: sessions must not share context.
  auto a_fed = probe.send(WireMessage{"a", Feed{0}});
  check("feed is acknowledged with its step", a_fed && a_fed->is<FeedAck>() && a_fed->as<FeedAck>().step == 0);
  auto c0 = probe.send(WireMessage{"c", StepRequest{0}});
  check("same image and prefix give bit-identical logits",
        a0_ok && c0 && c0->is<Logits>() && c0->as<Logits>().values == a0->as<Logits>().values);
  auto b0 = probe.send(WireMessage{"b", StepRequest{0}});
  check("interleaved session answers under its own id",
        b0 && b0->is<Logits>() && b0->session == "b" && b0->as<Logits>().values.size() == vocab);

  auto a1 = probe.send(WireMessage{"a", StepRequest{1}});
  check("next step follows feed", a1 && a1->is<Logits>() && a1->as<Logits>().step == 1);

  auto junk = probe.send(std::string("{\"v\":\"cicd/1\",\"type\":\n"));
  check("malformed frame yields an error frame", junk && junk->is<ErrorFrame>());
  auto wrong_version = probe.send(std::string(R"({"v":"cicd/0","type":"hello","session":""})") + "\n");
  check("version mismatch yields an error frame",
        wrong_version && wrong_version->is<ErrorFrame>() && wrong_version->as<ErrorFrame>().code == "VersionError");
  auto unknown = probe.send(std::string(R"({"v":"cicd/1","type":"teleport","session":"a"})") + "\n");
  check("unknown type yields an error frame",
        unknown && unknown->is<ErrorFrame>() && unknown->as<ErrorFrame>().code == "UnknownType");
  auto alive = probe.send(WireMessage{"", Hello{}});
  check("connection survives bad frames", alive && alive->is<HelloAck>());

  probe.post(WireMessage{"a", Close{}});
  check("closed session rejects step_request", is_error(probe.send(WireMessage{"a", StepRequest{1}}), "a"));
  probe.post(WireMessage{"b", Close{}});
  probe.post(WireMessage{"c", Close{}});
  return report;
}

}  // namespace cicd::proto
