// saesens: command-line driver for the feature sensitivity pipeline.
//
// Exit codes: 0 success, 1 error, 3 completed with unevaluated features.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <typeinfo>

#include <CLI11.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "saesens/annotation_server.hpp"
#include "saesens/error.hpp"
#include "saesens/fixture.hpp"
#include "saesens/io.hpp"
#include "saesens/pipeline.hpp"

namespace fs = std::filesystem;
using namespace saesens;

namespace {

constexpr int kExitError = 1;
constexpr int kExitPartial = 3;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> features;
  std::optional<double> cutoff_truncation;
  std::optional<std::size_t> cutoff_count;
  std::optional<std::string> backend;
  std::optional<std::string> out;
};

void add_run_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Override the run seed");
  cmd->add_option("--features", o.features, "Number of features to sample per SAE");
  cmd->add_option("--cutoff-truncation", o.cutoff_truncation, "Minimum truncation activation rate");
  cmd->add_option("--cutoff-count", o.cutoff_count, "Minimum number of activating examples");
  cmd->add_option("--backend", o.backend, "\"synthetic\" or an activation server URL");
  cmd->add_option("--out", o.out, "Output directory");
}

RunConfig load_config(const Overrides& o) {
  RunConfig c = RunConfig::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.features) {
    c.feature_count = *o.features;
    c.feature_ids.clear();
  }
  if (o.cutoff_truncation) c.filter.truncation_rate = *o.cutoff_truncation;
  if (o.cutoff_count) c.filter.min_examples = *o.cutoff_count;
  if (o.backend) c.backend = *o.backend;
  if (o.out) c.output_dir = *o.out;
  return c;
}

void setup_logging(const std::optional<fs::path>& out_dir, const std::string& stage, bool verbose) {
  std::vector<spdlog::sink_ptr> sinks;
  auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
  console->set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  sinks.push_back(console);
  if (out_dir) {
    fs::create_directories(*out_dir / "logs");
    auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((*out_dir / "logs" / (stage + ".log")).string(),
                                                                    true);
    file->set_level(spdlog::level::debug);
    sinks.push_back(file);
  }
  auto logger = std::make_shared<spdlog::logger>("saesens", sinks.begin(), sinks.end());
  logger->set_level(spdlog::level::debug);
  logger->set_pattern("%Y-%m-%dT%H:%M:%S.%e %^%l%$ %v");
  spdlog::set_default_logger(logger);
}

int finish(const StageResult& r) {
  for (const auto& n : r.notes) spdlog::warn("{}", n);
  return r.status == StageStatus::partial ? kExitPartial : 0;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ChainError*>(&e)) return "chain";
  if (dynamic_cast<const LoadError*>(&e)) return "load";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const TransportError*>(&e)) return "transport";
  if (dynamic_cast<const AssemblyError*>(&e)) return "assembly";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

AnnotationServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAE feature sensitivity evaluation"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging on the console");

  Overrides o;
  auto* collect = app.add_subcommand("collect", "Sample features, collect activating examples, filter");
  auto* generate = app.add_subcommand("generate", "Generate texts from activating examples");
  auto* score = app.add_subcommand("score", "Score generated texts against the SAE");
  auto* analyze = app.add_subcommand("analyze", "Aggregate reports and summary tables");
  auto* run = app.add_subcommand("run", "collect, generate, score and analyze in sequence");
  for (auto* cmd : {collect, generate, score, analyze, run}) add_run_options(cmd, o);

  auto* session = app.add_subcommand("session", "Annotation sessions");
  session->require_subcommand(1);
  auto* session_build = session->add_subcommand("build", "Assemble a blinded annotation session from run artifacts");
  add_run_options(session_build, o);
  std::string session_id = "session-1";
  std::string data_dir = "annotation";
  std::optional<std::uint64_t> session_seed;
  std::optional<std::string> mix;
  std::optional<std::size_t> n_items;
  session_build->add_option("--id", session_id, "Session id");
  session_build->add_option("--data-dir", data_dir, "Annotation data directory");
  session_build->add_option("--session-seed", session_seed, "Session assembly seed");
  session_build->add_option("--mix", mix, "positive,negative,method fractions, e.g. 0.2,0.2,0.6");
  session_build->add_option("--n-items", n_items, "Number of items");

  auto* serve = app.add_subcommand("serve", "Serve annotation sessions over HTTP");
  int port = 8080;
  std::string host = "127.0.0.1";
  std::optional<std::string> static_dir;
  std::string serve_config;
  serve->add_option("--port", port, "Listen port");
  serve->add_option("--host", host, "Listen address");
  serve->add_option("--data-dir", data_dir, "Annotation data directory");
  serve->add_option("--static", static_dir, "Directory of UI assets to serve at /");
  serve->add_option("--config", serve_config, "Run configuration; with --session-seed, builds a session at startup")
      ->check(CLI::ExistingFile);
  serve->add_option("--session-seed", session_seed, "Build session-<seed> from run artifacts at startup");
  serve->add_option("--mix", mix, "positive,negative,method fractions for the startup session");

  auto* fixture = app.add_subcommand("fixture", "Write a synthetic fixture (corpus, SAEs, scripted replies, config)");
  std::string fixture_dir;
  std::uint64_t fixture_seed = 7;
  fixture->add_option("dir", fixture_dir, "Destination directory")->required();
  fixture->add_option("--seed", fixture_seed, "Fixture seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fixture) {
      setup_logging(std::nullopt, "fixture", verbose);
      FixtureOptions fo;
      fo.seed = fixture_seed;
      const auto info = write_fixture(fixture_dir, fo);
      std::cout << info.config.string() << "\n";
      return 0;
    }
    if (*serve) {
      setup_logging(std::nullopt, "serve", verbose);
      AnnotationService service(data_dir);
      if (session_seed) {
        if (serve_config.empty()) throw ConfigError("--session-seed needs --config");
        RunConfig c = RunConfig::load(serve_config);
        c.session_seed = *session_seed;
        if (mix) c.session_mix = SessionMix::parse(*mix);
        PipelineContext ctx(c);
        const std::string id = "session-" + std::to_string(*session_seed);
        if (!service.has_session(id)) service.add_session(run_session_build(ctx, id));
        spdlog::info("session {} ready", id);
      }
      AnnotationServer server(service, static_dir ? std::optional<fs::path>(*static_dir) : std::nullopt);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.run(host, port);
      g_server = nullptr;
      return 0;
    }

    RunConfig config = load_config(o);
    if (*session_build) {
      setup_logging(std::nullopt, "session", verbose);
      if (session_seed) config.session_seed = *session_seed;
      if (mix) config.session_mix = SessionMix::parse(*mix);
      if (n_items) config.session_items = *n_items;
      PipelineContext ctx(config);
      AnnotationService service(data_dir);
      const Session s = run_session_build(ctx, session_id);
      service.add_session(s);
      std::cout << (fs::path(data_dir) / "sessions" / (session_id + ".json")).string() << "\n";
      return 0;
    }

    std::string stage = *collect ? "collect" : *generate ? "generate" : *score ? "score" : *analyze ? "analyze" : "run";
    setup_logging(config.output_dir, stage, verbose);
    PipelineContext ctx(config);
    if (*collect) return finish(run_collect(ctx));
    if (*generate) return finish(run_generate(ctx));
    if (*score) return finish(run_score(ctx));
    if (*analyze) return finish(run_analyze(ctx));
    StageResult total;
    for (auto fn : {run_collect, run_generate, run_score, run_analyze}) {
      StageResult r = fn(ctx);
      if (r.status == StageStatus::partial) total.status = StageStatus::partial;
      total.notes.insert(total.notes.end(), r.notes.begin(), r.notes.end());
    }
    return finish(total);
  } catch (const std::exception& e) {
    nlohmann::json report = {{"error", error_kind(e)}, {"message", e.what()}};
    if (auto* fe = dynamic_cast<const FormatError*>(&e)) report["offset"] = fe->offset();
    std::cerr << report.dump() << "\n";
    return kExitError;
  }
}
