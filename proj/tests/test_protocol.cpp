#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "cicd/conformance.hpp"
#include "cicd/engine.hpp"
#include "cicd/protocol.hpp"
#include "cicd/sim.hpp"
#include "cicd/transport.hpp"
#include "fixtures.hpp"
#include "messages.hpp"

using namespace cicd;
using namespace cicd::proto;
using fixture::random_message;

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

TEST(Base64, KnownVectors) {
  const std::pair<std::string, std::string> cases[] = {
      {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"}};
  for (const auto& [plain, enc] : cases) {
    EXPECT_EQ(base64_encode(plain), enc);
    EXPECT_EQ(base64_decode(enc), plain);
  }
  EXPECT_FALSE(base64_decode("Zm9").has_value());
  EXPECT_FALSE(base64_decode("Zm9v!A==").has_value());
}

TEST(Base64, RandomBytesRoundTrip) {
  Rng rng(4);
  for (int k = 0; k < 500; ++k) {
    std::string s(rng.below(64), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    ASSERT_EQ(base64_decode(base64_encode(s)), s);
  }
}

TEST(Codec, RandomRoundTrip) {
  Rng rng(31337);
  for (int k = 0; k < 1000; ++k) {
    const bool binary = rng.below(2) == 1;
    const auto m = random_message(rng, binary);
    const std::string line = encode(m, {std::nullopt, binary});
    ASSERT_EQ(line.back(), '\n');
    ASSERT_EQ(line.find('\n'), line.size() - 1);
    const auto back = decode(line);
    ASSERT_EQ(back, m) << line;
    ASSERT_EQ(encode(back, {std::nullopt, binary}), line);
  }
}

TEST(Codec, LogitsWireShape) {
  const WireMessage m{"s1", Logits{3, LogitVector({1.5, 0.0, -2.0}, {false, true, false})}};
  const auto j = nlohmann::json::parse(encode(m));
  EXPECT_EQ(j["v"], "cicd/1");
  EXPECT_EQ(j["type"], "logits");
  EXPECT_EQ(j["step"], 3);
  EXPECT_EQ(j["logits"], nlohmann::json({1.5, 0.0, -2.0}));
  EXPECT_EQ(j["masked"], nlohmann::json({1}));
  const auto b = nlohmann::json::parse(encode(m, {std::nullopt, true}));
  EXPECT_FALSE(b.contains("logits"));
  EXPECT_TRUE(b.contains("logits_f32_b64"));
}

TEST(Codec, EncodeErrors) {
  const WireMessage m{"s", Logits{0, LogitVector({1.0, 2.0})}};
  expect_errc(Errc::encoding_error, [&] { encode(m, {3, false}); });
  HelloAck bad{3, "d", 0, {"a"}};
  expect_errc(Errc::encoding_error, [&] { encode({"s", bad}); });
}

TEST(Codec, DecodeErrors) {
  try {
    decode("{\"v\":\"cicd/1\",");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::parse_error);
    ASSERT_TRUE(e.position().has_value());
    EXPECT_LE(*e.position(), 14u);
  }
  expect_errc(Errc::parse_error, [] { decode("[1,2]"); });
  expect_errc(Errc::version_error, [] { decode(R"({"v":"cicd/2","type":"hello","session":""})"); });
  expect_errc(Errc::version_error, [] { decode(R"({"type":"hello","session":""})"); });
  expect_errc(Errc::unknown_type, [] { decode(R"({"v":"cicd/1","type":"bogus","session":""})"); });
  expect_errc(Errc::parse_error, [] { decode(R"({"v":"cicd/1","type":"feed","session":"s"})"); });
  expect_errc(Errc::parse_error, [] { decode(R"({"v":"cicd/1","type":"feed","session":"s","token":"x"})"); });
  expect_errc(Errc::parse_error, [] { decode(R"({"v":"cicd/1","type":"logits","session":"s","step":0})"); });
  expect_errc(Errc::parse_error,
              [] { decode(R"({"v":"cicd/1","type":"logits","session":"s","step":0,"logits":[1],"masked":[4]})"); });
  expect_errc(Errc::parse_error, [] { decode("{\"v\":\"cicd/1\",\n\"type\":\"hello\",\"session\":\"\"}"); });
}

TEST(Codec, ExtraFieldsAndCrlfTolerated) {
  const auto m = decode("{\"v\":\"cicd/1\",\"type\":\"step_request\",\"session\":\"a\",\"step\":4,\"x\":1}\r\n");
  EXPECT_EQ(m.as<StepRequest>().step, 4u);
}

TEST(Server, ErrorFramesForOrderViolations) {
  const auto w = fixture::small_world();
  sim::SimBackend backend(w);
  ProtocolServer server(backend);
  auto code = [&](const WireMessage& m) {
    const auto reply = server.handle(encode(m));
    if (!reply) return std::string("<none>");
    const auto r = decode(*reply);
    return r.is<ErrorFrame>() ? r.as<ErrorFrame>().code : std::string(r.type());
  };
  EXPECT_EQ(code({"a", Init{"img_0", {}}}), "ProtocolOrder");
  EXPECT_EQ(code({"", Hello{}}), "hello_ack");
  EXPECT_EQ(code({"a", StepRequest{0}}), "UnknownSession");
  EXPECT_EQ(code({"a", Init{"img_0", {}}}), "init_ack");
  EXPECT_EQ(code({"a", Init{"img_0", {}}}), "SessionExists");
  EXPECT_EQ(code({"b", Init{"nope", {}}}), "NotFound");
  EXPECT_EQ(code({"c", Init{"img_0", {9999}}}), "InvalidToken");
  EXPECT_EQ(code({"a", Feed{1}}), "FeedOrder");
  EXPECT_EQ(code({"a", StepRequest{1}}), "StepOrder");
  EXPECT_EQ(code({"a", StepRequest{0}}), "logits");
  EXPECT_EQ(code({"a", StepRequest{0}}), "StepOrder");
  EXPECT_EQ(code({"a", Feed{9999}}), "InvalidToken");
  EXPECT_EQ(code({"a", Feed{1}}), "feed_ack");
  EXPECT_EQ(code({"a", StepRequest{1}}), "logits");
  EXPECT_EQ(code({"a", InitAck{}}), "UnexpectedType");
  EXPECT_EQ(code({"a", Close{}}), "<none>");
  EXPECT_EQ(code({"a", StepRequest{1}}), "UnknownSession");
  EXPECT_EQ(backend.open_sessions(), 0u);
}

TEST(Conformance, SimOverLoopback) {
  const auto w = fixture::small_world();
  sim::SimBackend backend(w);
  ProtocolServer server(backend);
  LoopbackChannel ch(server);
  const auto report = run_conformance(ch, {"img_0", "img_1", {}});
  for (const auto& c : report.cases) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
  EXPECT_TRUE(report.passed());
  EXPECT_GE(report.cases.size(), 20u);
}

TEST(Conformance, SimOverBinaryLogits) {
  const auto w = fixture::small_world();
  sim::SimBackend backend(w);
  ProtocolServer server(backend, true);
  LoopbackChannel ch(server);
  EXPECT_TRUE(run_conformance(ch, {"img_0", "img_1", {3, 4}}).passed());
}

TEST(Conformance, DetectsBrokenServer) {
  // A server that never rejects anything fails the ordering cases.
  class Permissive : public LineChannel {
   public:
    void write_line(const std::string& line) override {
      const auto m = decode(line);
      if (m.is<Close>()) return;
      pending_.push_back(encode({m.session, InitAck{}}));
    }
    std::optional<std::string> read_line() override {
      if (pending_.empty()) return std::nullopt;
      auto l = pending_.front();
      pending_.pop_front();
      return l;
    }

   private:
    std::deque<std::string> pending_;
  } ch;
  EXPECT_FALSE(run_conformance(ch, {"img_0", "img_1", {}}).passed());
}

TEST(Client, MatchesInProcessGeneration) {
  const auto w = fixture::small_world();
  sim::SimBackend direct(w), served(w);
  ProtocolServer server(served);
  LoopbackChannel ch(server);
  ProtocolClient client(ch);
  EngineConfig cfg;
  cfg.seed = 12;
  const auto a = generate(direct, "img_5", "img_6", {}, cfg);
  const auto b = generate(client, "img_5", "img_6", {}, cfg);
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.traces.size(), b.traces.size());
  for (std::size_t i = 0; i < a.traces.size(); ++i) EXPECT_EQ(a.traces[i].orig_digest, b.traces[i].orig_digest);
}

TEST(Client, BinaryLogitsCarryFloat32Values) {
  const auto w = fixture::small_world();
  sim::SimBackend direct(w), served(w);
  ProtocolServer server(served, true);
  LoopbackChannel ch(server);
  ProtocolClient client(ch);
  client.hello();
  client.init("s", "img_2", {});
  direct.init("s", "img_2", {});
  const auto got = client.step("s", 0);
  const auto want = direct.step("s", 0);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], static_cast<double>(static_cast<float>(want[i])));
}

TEST(Client, ErrorFrameBecomesSessionError) {
  const auto w = fixture::small_world();
  sim::SimBackend backend(w);
  ProtocolServer server(backend);
  LoopbackChannel ch(server);
  ProtocolClient client(ch);
  client.hello();
  expect_errc(Errc::session_error, [&] { client.init("s", "missing", {}); });
}

TEST(Transport, SubprocessConformance) {
  auto ch = SubprocessChannel::spawn(std::string(CICD_TOOL_PATH) + " serve-sim --preset default");
  const auto report = run_conformance(*ch, {"img_0", "img_1", {}});
  for (const auto& c : report.cases) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
}

TEST(Transport, SubprocessGenerationMatchesInProcess) {
  const auto w = sim::build_world(sim::default_config());
  sim::SimBackend direct(w);
  auto ch = SubprocessChannel::spawn(std::string(CICD_TOOL_PATH) + " serve-sim --preset default");
  ProtocolClient client(*ch);
  EngineConfig cfg;
  cfg.seed = 3;
  const auto a = generate(direct, "img_7", "img_70", {}, cfg);
  const auto b = generate(client, "img_7", "img_70", {}, cfg);
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.traces.size(), b.traces.size());
  for (std::size_t i = 0; i < a.traces.size(); ++i) EXPECT_EQ(a.traces[i].jsd.jsd, b.traces[i].jsd.jsd);
}

TEST(Transport, DeadSubprocessIsSessionError) {
  auto ch = SubprocessChannel::spawn("exit 0");
  ProtocolClient client(*ch);
  expect_errc(Errc::session_error, [&] { client.hello(); });
}

TEST(Transport, UnixSocket) {
  const auto w = fixture::small_world();
  const auto path = (std::filesystem::temp_directory_path() / ("cicd-test-" + std::to_string(::getpid()) + ".sock")).string();
  UnixListener listener(path);
  std::thread server_thread([&] {
    auto conn = listener.accept();
    sim::SimBackend backend(w);
    ProtocolServer server(backend);
    serve(server, *conn);
  });
  {
    auto ch = connect_unix(path);
    const auto report = run_conformance(*ch, {"img_0", "img_1", {}});
    EXPECT_TRUE(report.passed());
  }
  server_thread.join();
  expect_errc(Errc::session_error, [&] { connect_unix(path + ".missing"); });
}
