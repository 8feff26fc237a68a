#pragma once

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cicd/conformance.hpp"
#include "cicd/engine.hpp"
#include "cicd/experiment.hpp"
#include "cicd/metrics.hpp"
#include "cicd/protocol.hpp"
#include "cicd/selector.hpp"
#include "cicd/sim.hpp"
#include "cicd/transport.hpp"

namespace cicd::cli {

inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kBackend = 2, kInternal = 3 };

inline int exit_code_for(Errc c) {
  switch (c) {
    case Errc::session_error:
    case Errc::session_mismatch:
    case Errc::encoding_error:
    case Errc::version_error:
    case Errc::unknown_type: return kBackend;
    case Errc::internal:
    case Errc::empty_support:
    case Errc::degenerate_divergence: return kInternal;
    default: return kUsage;
  }
}

inline double parse_gamma(const std::string& s) {
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || std::isnan(v)) throw Error(Errc::config_error, "bad gamma '" + s + "'");
  return v;
}

inline std::vector<double> parse_gamma_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_gamma(item));
  }
  if (out.empty()) throw Error(Errc::config_error, "gamma list is empty");
  return out;
}

// "3", "0-9" and "1,4,7-8" forms.
inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  auto num = [&](const std::string& t) {
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
      throw Error(Errc::config_error, "bad seed list '" + s + "'");
    return static_cast<std::uint64_t>(std::stoull(t));
  };
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (auto dash = item.find('-'); dash != std::string::npos) {
      const auto lo = num(item.substr(0, dash)), hi = num(item.substr(dash + 1));
      if (hi < lo) throw Error(Errc::config_error, "bad seed range '" + item + "'");
      for (auto v = lo; v <= hi; ++v) out.push_back(v);
    } else {
      out.push_back(num(item));
    }
  }
  if (out.empty()) throw Error(Errc::config_error, "seed list is empty");
  return out;
}

inline void apply_alpha_mode(EngineConfig& cfg, const std::string& mode) {
  if (mode == "dynamic") {
    cfg.alpha_mode = AlphaMode::dynamic;
  } else if (mode == "off") {
    cfg.alpha_mode = AlphaMode::off;
  } else if (mode.rfind("fixed:", 0) == 0) {
    cfg.alpha_mode = AlphaMode::fixed;
    try {
      std::size_t used = 0;
      cfg.fixed_alpha = std::stod(mode.substr(6), &used);
      if (used != mode.size() - 6) throw std::invalid_argument(mode);
    } catch (const std::exception&) {
      throw Error(Errc::config_error, "bad alpha mode '" + mode + "'");
    }
  } else {
    throw Error(Errc::config_error, "alpha mode must be dynamic, off or fixed:<value>");
  }
}

inline AlphaClip parse_clip(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw Error(Errc::config_error, "alpha clip must be 'low,high'");
  try {
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw Error(Errc::config_error, "bad alpha clip '" + s + "'");
  }
}

inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("CICD_SEED");
  if (!v || !*v) return std::nullopt;
  const std::string s(v);
  if (s.find_first_not_of("0123456789") != std::string::npos) throw Error(Errc::config_error, "CICD_SEED must be an unsigned integer");
  return std::stoull(s);
}

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  std::ostringstream ss;
  ss << in.rdbuf();
  return digest_hex(ss.str());
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::config_error, "cannot write " + path.string());
  out << text;
}

struct RunContext {
  std::vector<std::string> argv;
  std::filesystem::path out_dir;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json env = nlohmann::json::object();

  void prepare_out() {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(Errc::config_error, "cannot create output directory " + out_dir.string());
  }

  void add_input(const std::string& role, const std::string& path) {
    inputs[role] = {{"path", path}, {"digest", file_digest(path)}};
  }

  void write_manifest(const std::string& command, const nlohmann::json& config, const nlohmann::json& seeds) const {
    nlohmann::json m;
    m["tool"] = "cicd";
    m["tool_version"] = kToolVersion;
    m["command"] = command;
    m["argv"] = argv;
    m["config"] = config;
    m["seeds"] = seeds;
    m["inputs"] = inputs;
    m["env"] = env;
    m["timestamp"] = utc_timestamp();
    write_text(out_dir / "manifest.json", m.dump(2) + "\n");
  }
};

struct WorldSource {
  std::string path;
  std::string preset;
  std::uint64_t seed = 0;
  double prior_jitter = -1.0;

  void add_options(CLI::App* sub) {
    sub->add_option("--world", path, "World JSON file");
    sub->add_option("--preset", preset, "Built-in world: default, corpus or trap");
    sub->add_option("--world-seed", seed, "Seed for a preset world");
    sub->add_option("--prior-jitter", prior_jitter, "Image-specific noise on function slots (preset worlds)");
  }

  sim::SynthWorld load(RunContext& ctx) const {
    if (!path.empty() && !preset.empty()) throw Error(Errc::config_error, "give either --world or --preset");
    if (!path.empty()) {
      if (prior_jitter >= 0.0) throw Error(Errc::config_error, "--prior-jitter applies to preset worlds only");
      ctx.add_input("world", path);
      return sim::load_world(path);
    }
    sim::WorldConfig cfg = sim::preset_config(preset.empty() ? "default" : preset);
    cfg.seed = seed;
    if (prior_jitter >= 0.0) cfg.prior_jitter = prior_jitter;
    return sim::build_world(cfg);
  }
};

struct EngineOptions {
  std::string gamma = "-4";
  double beta = 0.1;
  std::string alpha_mode = "dynamic";
  std::string alpha_clip = "1,3";
  double temperature = 1.0;
  bool greedy = false;
  std::size_t max_len = 64;
  bool full_trace = false;

  void add_options(CLI::App* sub, bool with_gamma = true) {
    if (with_gamma) sub->add_option("--gamma", gamma, "Gate threshold on log10 JSD; -inf contrasts every step");
    sub->add_option("--beta", beta, "Plausibility cutoff");
    sub->add_option("--alpha-mode", alpha_mode, "dynamic | fixed:<value> | off");
    sub->add_option("--alpha-clip", alpha_clip, "low,high");
    sub->add_option("--temperature", temperature, "Sampling temperature");
    sub->add_flag("--greedy", greedy, "Take the argmax instead of sampling");
    sub->add_option("--max-len", max_len, "Maximum generated tokens");
    sub->add_flag("--full-trace", full_trace, "Store full logit vectors in the trace");
  }

  EngineConfig build() const {
    EngineConfig c;
    c.gamma = parse_gamma(gamma);
    c.beta = beta;
    apply_alpha_mode(c, alpha_mode);
    c.alpha_clip = parse_clip(alpha_clip);
    c.temperature = temperature;
    c.greedy = greedy;
    c.max_len = max_len;
    c.full_trace = full_trace;
    c.validate();
    return c;
  }
};

// A backend chosen by a "sim:<file>", "preset:<name>", "cmd:<shell>" or
// "unix:<path>" spec.
struct OpenBackend {
  std::unique_ptr<sim::SynthWorld> world;
  std::unique_ptr<proto::LineChannel> channel;
  std::unique_ptr<ModelBackend> backend;
};

inline OpenBackend open_backend(const std::string& spec, RunContext* ctx = nullptr) {
  OpenBackend ob;
  auto colon = spec.find(':');
  if (colon == std::string::npos) throw Error(Errc::config_error, "backend spec needs a scheme: " + spec);
  const std::string scheme = spec.substr(0, colon), rest = spec.substr(colon + 1);
  if (scheme == "sim" || scheme == "preset") {
    if (scheme == "sim") {
      ob.world = std::make_unique<sim::SynthWorld>(sim::load_world(rest));
      if (ctx) ctx->add_input("world", rest);
    } else {
      ob.world = std::make_unique<sim::SynthWorld>(sim::build_world(sim::preset_config(rest)));
    }
    ob.backend = std::make_unique<sim::SimBackend>(*ob.world);
  } else if (scheme == "cmd") {
    ob.channel = proto::SubprocessChannel::spawn(rest);
    ob.backend = std::make_unique<proto::ProtocolClient>(*ob.channel);
  } else if (scheme == "unix") {
    ob.channel = proto::connect_unix(rest);
    ob.backend = std::make_unique<proto::ProtocolClient>(*ob.channel);
  } else {
    throw Error(Errc::config_error, "unknown backend scheme '" + scheme + "'");
  }
  return ob;
}

inline std::vector<TokenId> parse_prompt(const std::string& text, const BackendInfo& info) {
  std::vector<TokenId> out;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) {
    auto it = std::find(info.tokens.begin(), info.tokens.end(), word);
    if (it != info.tokens.end()) {
      out.push_back(static_cast<TokenId>(it - info.tokens.begin()));
      continue;
    }
    if (word.find_first_not_of("0123456789") == std::string::npos) {
      const auto id = std::stoull(word);
      if (id < info.vocab_size) {
        out.push_back(static_cast<TokenId>(id));
        continue;
      }
    }
    throw Error(Errc::config_error, "prompt word '" + word + "' is not in the vocabulary");
  }
  return out;
}

struct DecodeArgs {
  std::string backend;
  std::string contrast_backend;
  std::string image;
  std::string contrast = "random";
  std::string pool;
  std::string prompt;
  std::optional<std::uint64_t> seed;
  EngineOptions engine;
};

inline int cmd_decode(const DecodeArgs& a, RunContext& ctx, std::ostream& out) {
  EngineConfig cfg = a.engine.build();
  std::uint64_t seed = 0;
  if (a.seed) {
    seed = *a.seed;
  } else if (auto env = env_seed()) {
    seed = *env;
    ctx.env["CICD_SEED"] = std::to_string(*env);
  }
  cfg.seed = seed;
  if (a.image.empty()) throw Error(Errc::config_error, "--image is required");

  OpenBackend primary = open_backend(a.backend, &ctx);
  OpenBackend secondary;
  ModelBackend* contrast_backend = primary.backend.get();
  if (!a.contrast_backend.empty()) {
    secondary = open_backend(a.contrast_backend, &ctx);
    contrast_backend = secondary.backend.get();
  }
  if (primary.world) primary.world->image_index(a.image);

  const auto spec = experiment::parse_contrast(a.contrast);
  std::string contrast_id;
  std::optional<double> similarity;
  if (spec.kind == experiment::ContrastKind::fixed) {
    contrast_id = spec.value;
    if (contrast_id == a.image) throw Error(Errc::config_error, "contrast image equals the query image");
  } else if (spec.kind == experiment::ContrastKind::retrieve) {
    EmbeddingStore store = spec.value.empty() && primary.world ? primary.world->embeddings() : load_store(spec.value);
    if (!spec.value.empty()) ctx.add_input("embeddings", spec.value);
    const auto sel = select_retrieved(store, a.image);
    contrast_id = sel.chosen_id;
    similarity = sel.similarity;
  } else {
    std::vector<std::string> ids;
    if (!a.pool.empty()) {
      ids = load_store(a.pool).ids();
      ctx.add_input("pool", a.pool);
    } else if (primary.world) {
      ids = primary.world->image_ids;
    } else {
      throw Error(Errc::config_error, "random contrast against an external backend needs --pool <CICD-EMB file>");
    }
    Rng rng(experiment::contrast_seed(seed, 0));
    contrast_id = select_random_id(ids, a.image, rng);
  }
  if (primary.world) primary.world->image_index(contrast_id);

  const BackendInfo info = primary.backend->hello();
  const auto prompt = parse_prompt(a.prompt, info);
  const GenerationResult g = generate(*primary.backend, a.image, *contrast_backend, contrast_id, prompt, cfg);

  ctx.prepare_out();
  {
    std::ofstream trace(ctx.out_dir / "trace.jsonl", std::ios::binary);
    write_trace_jsonl(trace, g.traces);
  }
  nlohmann::json config = config_to_json(cfg);
  config["backend"] = a.backend;
  config["contrast_backend"] = a.contrast_backend;
  config["image"] = a.image;
  config["contrast"] = a.contrast;
  config["contrast_image"] = contrast_id;
  if (similarity) config["contrast_similarity"] = *similarity;
  config["prompt"] = prompt;
  config["vocab_digest"] = info.vocab_digest;
  ctx.write_manifest("decode", config, nlohmann::json::array({seed}));
  out << g.text << '\n';
  return kOk;
}

struct ExperimentArgs {
  WorldSource world;
  std::size_t images = 200;
  std::string seeds;
  std::string contrast = "random";
  std::string prompt;
  bool no_baseline = false;
  EngineOptions engine;
};

inline experiment::ExperimentConfig build_experiment(const ExperimentArgs& a, const sim::SynthWorld& w, RunContext& ctx) {
  experiment::ExperimentConfig cfg;
  cfg.engine = a.engine.build();
  cfg.images = a.images;
  if (!a.seeds.empty()) {
    cfg.seeds = parse_seed_list(a.seeds);
  } else if (auto env = env_seed()) {
    for (auto& s : cfg.seeds) s += *env;
    ctx.env["CICD_SEED"] = std::to_string(*env);
  }
  cfg.contrast = experiment::parse_contrast(a.contrast);
  if (cfg.contrast.kind == experiment::ContrastKind::retrieve && !cfg.contrast.value.empty())
    ctx.add_input("embeddings", cfg.contrast.value);
  BackendInfo info{w.vocab_size(), "", w.end_token(), w.tokens};
  cfg.prompt = parse_prompt(a.prompt, info);
  cfg.regular_baseline = !a.no_baseline;
  return cfg;
}

inline int cmd_experiment(const ExperimentArgs& a, RunContext& ctx, std::ostream& out) {
  const sim::SynthWorld world = a.world.load(ctx);
  const auto cfg = build_experiment(a, world, ctx);
  ctx.prepare_out();
  std::ofstream trace(ctx.out_dir / "trace.jsonl", std::ios::binary);
  const auto result = experiment::run_experiment(
      world, cfg, [&](std::uint64_t seed, std::size_t image, std::size_t contrast, const GenerationResult& g) {
        for (const auto& t : g.traces) {
          nlohmann::json j = trace_to_json(t);
          j["seed"] = seed;
          j["image"] = world.image_ids[image];
          j["contrast_image"] = world.image_ids[contrast];
          trace << j.dump() << '\n';
        }
      });
  trace.close();
  const nlohmann::json config = experiment::experiment_config_json(cfg, world);
  const nlohmann::json report = experiment::report_json(result, config);
  write_text(ctx.out_dir / "report.json", report.dump(2) + "\n");
  {
    std::ofstream hist(ctx.out_dir / "histogram.csv", std::ios::binary);
    eval::write_histogram_csv(hist, *result.cicd.report.jsd);
  }
  ctx.write_manifest("experiment", config, cfg.seeds);
  const auto& c = result.cicd.report.chair;
  out.precision(4);
  if (result.regular) {
    const auto& r = result.regular->report.chair;
    out << "regular  chair_s " << r.chair_s << "  chair_i " << r.chair_i << "  recall " << r.recall << '\n';
  }
  out << "cicd     chair_s " << c.chair_s << "  chair_i " << c.chair_i << "  recall " << c.recall << '\n';
  return kOk;
}

struct SweepArgs {
  ExperimentArgs base;
  std::string gammas = "-inf,-6,-4,-2";
};

inline int cmd_sweep_gamma(const SweepArgs& a, RunContext& ctx, std::ostream& out) {
  const sim::SynthWorld world = a.base.world.load(ctx);
  const auto gammas = parse_gamma_list(a.gammas);
  const auto cfg = build_experiment(a.base, world, ctx);
  const auto rows = experiment::sweep_gamma(world, cfg, gammas);
  ctx.prepare_out();
  std::ostringstream csv;
  experiment::write_sweep_csv(csv, rows);
  write_text(ctx.out_dir / "sweep.csv", csv.str());
  nlohmann::json config = experiment::experiment_config_json(cfg, world);
  nlohmann::json gj = nlohmann::json::array();
  for (double g : gammas) gj.push_back(eval::gamma_json(g));
  config["gammas"] = gj;
  ctx.write_manifest("sweep-gamma", config, cfg.seeds);
  out << csv.str();
  return kOk;
}

struct AnalyzeArgs {
  WorldSource world;
  bool use_world = false;
  std::string trace;
  std::size_t prefixes = 20;
  std::size_t pairs = 20;
  std::uint64_t seed = 0;
};

inline int cmd_analyze(const AnalyzeArgs& a, RunContext& ctx, std::ostream& out) {
  const bool have_world = !a.world.path.empty() || !a.world.preset.empty();
  if (!have_world && a.trace.empty()) throw Error(Errc::config_error, "analyze needs --trace and/or a world");
  ctx.prepare_out();
  nlohmann::json config = {{"prefixes", a.prefixes}, {"pairs", a.pairs}};
  if (have_world) {
    const sim::SynthWorld world = a.world.load(ctx);
    const auto c = experiment::analyze_consistency(world, a.prefixes, a.pairs, a.seed);
    nlohmann::json j = experiment::to_json(c);
    j["world_digest"] = world.digest();
    write_text(ctx.out_dir / "consistency.json", j.dump(2) + "\n");
    config["world_digest"] = world.digest();
    out << "function-slot mean cosine distance " << c.function.mean_cosine << ", object-slot " << c.object.mean_cosine
        << '\n';
  }
  if (!a.trace.empty()) {
    std::ifstream in(a.trace);
    if (!in) throw Error(Errc::config_error, "cannot open trace " + a.trace);
    ctx.add_input("trace", a.trace);
    const auto traces = read_trace_jsonl(in);
    std::ostringstream csv;
    csv.precision(17);
    csv << "index,step,jsd,log10_jsd,gated,token_text\n";
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& t = traces[i];
      csv << i << ',' << t.step << ',' << t.jsd.jsd << ',';
      if (std::isfinite(t.jsd.log10_jsd)) csv << t.jsd.log10_jsd;
      csv << ',' << (t.gated_contrastive ? 1 : 0) << ',' << t.token_text << '\n';
    }
    write_text(ctx.out_dir / "jsd_series.csv", csv.str());
    out << traces.size() << " trace steps\n";
  }
  ctx.write_manifest("analyze", config, nlohmann::json::array({a.seed}));
  return kOk;
}

struct WorldArgs {
  WorldSource world;
  bool calibrate = false;
};

inline int cmd_world(const WorldArgs& a, RunContext& ctx, std::ostream& out) {
  if (!a.world.path.empty()) throw Error(Errc::config_error, "world builds from --preset");
  sim::WorldConfig cfg = sim::preset_config(a.world.preset.empty() ? "default" : a.world.preset);
  cfg.seed = a.world.seed;
  if (a.world.prior_jitter >= 0.0) cfg.prior_jitter = a.world.prior_jitter;
  const sim::SynthWorld w = a.calibrate ? experiment::calibrate(cfg) : sim::build_world(cfg);
  ctx.prepare_out();
  sim::save_world((ctx.out_dir / "world.json").string(), w);
  {
    std::ofstream emb(ctx.out_dir / "embeddings.emb", std::ios::binary);
    save_store(emb, w.embeddings());
  }
  ctx.write_manifest("world", sim::config_to_json(cfg), nlohmann::json::array({cfg.seed}));
  out << (ctx.out_dir / "world.json").string() << '\n';
  return kOk;
}

inline int cmd_export_embeddings(const WorldSource& src, RunContext& ctx, std::ostream& out) {
  const sim::SynthWorld w = src.load(ctx);
  ctx.prepare_out();
  const auto path = ctx.out_dir / "embeddings.emb";
  {
    std::ofstream emb(path, std::ios::binary);
    save_store(emb, w.embeddings());
  }
  ctx.write_manifest("export-embeddings", {{"world_digest", w.digest()}}, nlohmann::json::array());
  out << path.string() << '\n';
  return kOk;
}

inline int cmd_serve_sim(const WorldSource& src, const std::string& listen, bool binary, bool once) {
  RunContext scratch;
  const sim::SynthWorld world = src.load(scratch);
  sim::SimBackend backend(world);
  if (listen.empty()) {
    proto::ProtocolServer server(backend, binary);
    proto::FdChannel stdio(STDIN_FILENO, STDOUT_FILENO, false);
    proto::serve(server, stdio);
    return kOk;
  }
  if (listen.rfind("unix:", 0) != 0) throw Error(Errc::config_error, "--listen expects unix:<path>");
  proto::UnixListener listener(listen.substr(5));
  do {
    auto conn = listener.accept();
    sim::SimBackend per_connection(world);
    proto::ProtocolServer server(per_connection, binary);
    proto::serve(server, *conn);
  } while (!once);
  return kOk;
}

inline int cmd_conformance(const std::string& backend_spec, const std::string& image_a, const std::string& image_b,
                           std::ostream& out) {
  auto colon = backend_spec.find(':');
  const std::string scheme = colon == std::string::npos ? "" : backend_spec.substr(0, colon);
  std::unique_ptr<sim::SynthWorld> world;
  std::unique_ptr<sim::SimBackend> sim_backend;
  std::unique_ptr<proto::ProtocolServer> server;
  std::unique_ptr<proto::LineChannel> channel;
  if (scheme == "sim" || scheme == "preset") {
    OpenBackend ob = open_backend(backend_spec);
    world = std::move(ob.world);
    sim_backend = std::make_unique<sim::SimBackend>(*world);
    server = std::make_unique<proto::ProtocolServer>(*sim_backend);
    channel = std::make_unique<proto::LoopbackChannel>(*server);
  } else if (scheme == "cmd") {
    channel = proto::SubprocessChannel::spawn(backend_spec.substr(4));
  } else if (scheme == "unix") {
    channel = proto::connect_unix(backend_spec.substr(5));
  } else {
    throw Error(Errc::config_error, "unknown backend scheme in '" + backend_spec + "'");
  }
  const auto report = proto::run_conformance(*channel, {image_a, image_b, {}});
  for (const auto& c : report.cases) out << (c.passed ? "PASS " : "FAIL ") << c.name << '\n';
  return report.passed() ? kOk : kBackend;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

inline int cmd_replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out,
                      std::ostream& err) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(Errc::config_error, "cannot open manifest " + manifest_path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_error, std::string("bad manifest: ") + e.what());
  }
  auto argv = m.at("argv").get<std::vector<std::string>>();
  if (!out_dir.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
      if (argv[i] == "--out") {
        argv[i + 1] = out_dir;
        replaced = true;
      }
    }
    if (!replaced) {
      argv.push_back("--out");
      argv.push_back(out_dir);
    }
  }
  const nlohmann::json env = m.value("env", nlohmann::json::object());
  for (const auto& [key, value] : env.items()) {
    ::setenv(key.c_str(), value.get<std::string>().c_str(), 1);
  }
  return run(argv, out, err);
}

// args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-image contrastive decoding toolkit"};
  app.require_subcommand(1);
  std::string out_dir = "cicd-out";

  DecodeArgs decode;
  auto* sub_decode = app.add_subcommand("decode", "Decode one caption with a contrast image");
  sub_decode->add_option("--backend", decode.backend, "sim:<world.json> | preset:<name> | cmd:<command> | unix:<path>")->required();
  sub_decode->add_option("--contrast-backend", decode.contrast_backend, "Separate backend for the contrast session");
  sub_decode->add_option("--image", decode.image, "Image id")->required();
  sub_decode->add_option("--contrast", decode.contrast, "random | retrieve:<emb-file> | <image id>");
  sub_decode->add_option("--pool", decode.pool, "CICD-EMB file listing candidate ids for random contrast");
  sub_decode->add_option("--prompt", decode.prompt, "Space-separated prompt tokens");
  sub_decode->add_option("--seed", decode.seed, "Sampling seed (default: CICD_SEED or 0)");
  sub_decode->add_option("--out", out_dir, "Output directory");
  decode.engine.add_options(sub_decode);

  ExperimentArgs exp;
  auto* sub_exp = app.add_subcommand("experiment", "Regular vs CICD decoding over a synthetic corpus");
  exp.world.add_options(sub_exp);
  sub_exp->add_option("--images", exp.images, "Number of corpus images");
  sub_exp->add_option("--seeds", exp.seeds, "Seed list, e.g. 0-9 (default: 0-9 offset by CICD_SEED)");
  sub_exp->add_option("--contrast", exp.contrast, "random | retrieve[:<emb-file>] | <image id>");
  sub_exp->add_option("--prompt", exp.prompt, "Space-separated prompt tokens");
  sub_exp->add_flag("--no-baseline", exp.no_baseline, "Skip the regular-decoding run");
  sub_exp->add_option("--out", out_dir, "Output directory");
  exp.engine.add_options(sub_exp);

  SweepArgs sweep;
  auto* sub_sweep = app.add_subcommand("sweep-gamma", "One experiment per gate threshold");
  sweep.base.world.add_options(sub_sweep);
  sub_sweep->add_option("--gammas", sweep.gammas, "Comma-separated thresholds; -inf allowed");
  sub_sweep->add_option("--images", sweep.base.images, "Number of corpus images");
  sub_sweep->add_option("--seeds", sweep.base.seeds, "Seed list");
  sub_sweep->add_option("--contrast", sweep.base.contrast, "random | retrieve[:<emb-file>] | <image id>");
  sub_sweep->add_option("--out", out_dir, "Output directory");
  sweep.base.engine.add_options(sub_sweep, false);

  AnalyzeArgs analyze;
  auto* sub_analyze = app.add_subcommand("analyze", "Cross-image logit consistency and JSD series");
  analyze.world.add_options(sub_analyze);
  sub_analyze->add_option("--trace", analyze.trace, "trace.jsonl to convert into a per-step CSV");
  sub_analyze->add_option("--prefixes", analyze.prefixes, "Caption prefixes to probe");
  sub_analyze->add_option("--pairs", analyze.pairs, "Image pairs per prefix");
  sub_analyze->add_option("--seed", analyze.seed, "Seed");
  sub_analyze->add_option("--out", out_dir, "Output directory");

  WorldArgs world;
  auto* sub_world = app.add_subcommand("world", "Write a synthetic world and its embeddings");
  world.world.add_options(sub_world);
  sub_world->add_flag("--calibrate", world.calibrate, "Raise the visual weight until the JSD regimes separate");
  sub_world->add_option("--out", out_dir, "Output directory");

  WorldSource serve_world;
  std::string listen;
  bool binary = false, once = false;
  auto* sub_serve = app.add_subcommand("serve-sim", "Serve a synthetic world over the wire protocol");
  serve_world.add_options(sub_serve);
  sub_serve->add_option("--listen", listen, "unix:<path>; stdio when omitted");
  sub_serve->add_flag("--binary-logits", binary, "Send logits as base64 float32");
  sub_serve->add_flag("--once", once, "Exit after the first connection");

  std::string conf_backend, conf_a = "img_0", conf_b = "img_1";
  auto* sub_conf = app.add_subcommand("conformance", "Run the protocol conformance suite against a backend");
  sub_conf->add_option("--backend", conf_backend, "Backend spec")->required();
  sub_conf->add_option("--image-a", conf_a, "First image id");
  sub_conf->add_option("--image-b", conf_b, "Second image id");

  WorldSource emb_world;
  auto* sub_emb = app.add_subcommand("export-embeddings", "Write the world's image embeddings as CICD-EMB");
  emb_world.add_options(sub_emb);
  sub_emb->add_option("--out", out_dir, "Output directory");

  std::string manifest;
  auto* sub_replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  sub_replay->add_option("manifest", manifest, "manifest.json")->required();
  std::string replay_out;
  sub_replay->add_option("--out", replay_out, "Output directory override");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  RunContext ctx;
  ctx.argv = args;
  ctx.out_dir = out_dir;
  try {
    if (sub_decode->parsed()) return cmd_decode(decode, ctx, out);
    if (sub_exp->parsed()) return cmd_experiment(exp, ctx, out);
    if (sub_sweep->parsed()) return cmd_sweep_gamma(sweep, ctx, out);
    if (sub_analyze->parsed()) return cmd_analyze(analyze, ctx, out);
    if (sub_world->parsed()) return cmd_world(world, ctx, out);
    if (sub_serve->parsed()) return cmd_serve_sim(serve_world, listen, binary, once);
    if (sub_conf->parsed()) return cmd_conformance(conf_backend, conf_a, conf_b, out);
    if (sub_emb->parsed()) return cmd_export_embeddings(emb_world, ctx, out);
    if (sub_replay->parsed()) return cmd_replay(manifest, replay_out, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}

inline int run_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace cicd::cli
