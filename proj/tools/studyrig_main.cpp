// studyrig: server, participant simulator and bundle utilities.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "studyrig/bundle.hpp"
#include "studyrig/error.hpp"
#include "studyrig/http_api.hpp"
#include "studyrig/service.hpp"
#include "studyrig/sim.hpp"

namespace {

using nlohmann::json;
using namespace studyrig;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot read '" + path + "'", 1);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw Error("io_error", "cannot write '" + path + "'", 1);
}

json read_json(const std::string& path) {
  json j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw Error("malformed_body", "'" + path + "' is not valid JSON", 1);
  return j;
}

std::string token_from_env(const std::string& name) {
  if (name.empty()) return {};
  const char* v = std::getenv(name.c_str());
  return v == nullptr ? std::string() : std::string(v);
}

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

int serve(const std::string& host, int port, const std::string& data_dir, std::string base_url,
          const std::string& token_env, bool virtual_clock, bool offline_models, bool no_fsync) {
  const std::string token = token_from_env(token_env);
  if (token.empty()) {
    std::cerr << "error: environment variable " << token_env
              << " must hold the experimenter token\n";
    return 2;
  }
  SystemClock system_clock;
  VirtualClock vclock(virtual_epoch());
  const Clock& clock = virtual_clock ? static_cast<const Clock&>(vclock) : system_clock;

  ServiceOptions options;
  options.offline_models = offline_models;
  StudyService service(clock, std::make_unique<JournalStore>(data_dir, !no_fsync), options);

  ServerConfig config;
  config.host = host;
  config.port = port;
  config.experimenter_token = token;
  config.virtual_clock = virtual_clock ? &vclock : nullptr;
  HttpServer server(service, config);
  const int bound = server.bind();
  if (base_url.empty()) base_url = "http://" + host + ":" + std::to_string(bound);
  service.set_base_url(base_url);

  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on " << host << ":" << bound << " (links: " << base_url << ")"
            << (virtual_clock ? ", virtual clock" : "") << (offline_models ? ", offline models" : "")
            << "\n";
  server.listen();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Configure, run and log comparative user studies"};
  app.require_subcommand(1);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir = "data";
  std::string base_url;
  std::string token_env = "STUDYRIG_TOKEN";
  bool virtual_clock = false;
  bool offline_models = false;
  bool no_fsync = false;
  serve_cmd->add_option("--host", host, "Listen address")->capture_default_str();
  serve_cmd->add_option("--port", port, "Listen port (0 = any free port)")->capture_default_str();
  serve_cmd->add_option("--data-dir", data_dir, "Journal directory")->capture_default_str();
  serve_cmd->add_option("--base-url", base_url, "Public prefix for study links");
  serve_cmd->add_option("--experimenter-token-env", token_env,
                        "Environment variable holding the experimenter token")
      ->capture_default_str();
  serve_cmd->add_flag("--virtual-clock", virtual_clock,
                      "Start a virtual clock at 2026-01-01Z, driven by POST /api/clock/advance");
  serve_cmd->add_flag("--offline-models", offline_models,
                      "Answer chat-backed conditions with the deterministic offline model");
  serve_cmd->add_flag("--no-fsync", no_fsync, "Skip fsync after journal writes");

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Drive scripted participants over HTTP");
  SimOptions sim;
  sim.base_url = "http://127.0.0.1:8080";
  std::string script_path;
  std::string sim_token_env = "STUDYRIG_TOKEN";
  std::string report_path;
  sim_cmd->add_option("--base-url", sim.base_url, "Server URL")->capture_default_str();
  sim_cmd->add_option("--study", sim.study, "Study slug")->required();
  sim_cmd->add_option("-n,--participants", sim.n, "Participants")->capture_default_str();
  sim_cmd->add_option("--script", script_path, "Behavior script (JSON)");
  sim_cmd->add_option("--seed", sim.seed, "Seed for randomized answers")->capture_default_str();
  sim_cmd->add_option("--concurrency", sim.concurrency, "Parallel sessions")
      ->capture_default_str();
  sim_cmd->add_flag("--virtual-clock", sim.virtual_clock,
                    "Advance the server's virtual clock instead of sleeping");
  sim_cmd->add_option("--experimenter-token-env", sim_token_env,
                      "Environment variable holding the experimenter token")
      ->capture_default_str();
  sim_cmd->add_option("--id-prefix", sim.external_id_prefix, "External id prefix")
      ->capture_default_str();
  sim_cmd->add_option("--report", report_path, "Also write the report to this file");

  // replay-check
  auto* replay_cmd = app.add_subcommand("replay-check", "Check an export against its study");
  std::string replay_base = "http://127.0.0.1:8080";
  std::string replay_study;
  std::string replay_token_env = "STUDYRIG_TOKEN";
  std::string study_file;
  std::string export_file;
  replay_cmd->add_option("--base-url", replay_base, "Server URL")->capture_default_str();
  replay_cmd->add_option("--study", replay_study, "Study id (fetched from the server)");
  replay_cmd->add_option("--experimenter-token-env", replay_token_env,
                         "Environment variable holding the experimenter token")
      ->capture_default_str();
  replay_cmd->add_option("--study-file", study_file, "Study JSON (offline mode)");
  replay_cmd->add_option("--export", export_file, "export.csv (offline mode)");

  // bundle
  auto* bundle_cmd = app.add_subcommand("bundle", "Pack or verify study bundles");
  bundle_cmd->require_subcommand(1);
  auto* pack_cmd = bundle_cmd->add_subcommand("pack", "Build a bundle from a definition file");
  std::string definition_path;
  std::vector<std::string> corpus_specs;
  std::string out_path;
  pack_cmd->add_option("--definition", definition_path, "Study definition JSON")->required();
  pack_cmd->add_option("--corpus", corpus_specs, "corpus_id=path to a document list");
  pack_cmd->add_option("--out", out_path, "Output file (stdout when omitted)");
  auto* verify_cmd = bundle_cmd->add_subcommand("verify", "Check checksum and content");
  std::string verify_path;
  verify_cmd->add_option("file", verify_path, "Bundle file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve_cmd) {
      return serve(host, port, data_dir, base_url, token_env, virtual_clock, offline_models,
                   no_fsync);
    }
    if (*sim_cmd) {
      if (!script_path.empty()) sim.script = script_from_json(read_json(script_path));
      sim.experimenter_token = token_from_env(sim_token_env);
      const SimReport report = simulate(sim);
      const std::string text = to_json(report).dump(2) + "\n";
      std::cout << text;
      if (!report_path.empty()) write_file(report_path, text);
      return report.ok ? 0 : 1;
    }
    if (*replay_cmd) {
      ReplayVerdict verdict;
      if (!export_file.empty()) {
        if (study_file.empty()) throw Error("usage", "--export needs --study-file", 2);
        verdict = replay_check(study_from_json(read_json(study_file)), read_file(export_file));
      } else {
        if (replay_study.empty()) throw Error("usage", "--study or --export is required", 2);
        verdict = replay_check_remote(replay_base, replay_study, token_from_env(replay_token_env));
      }
      std::cout << to_json(verdict).dump(2) << "\n";
      return verdict.ok() ? 0 : 1;
    }
    if (*pack_cmd) {
      const json def = read_json(definition_path);
      Study study = create_study(def.value("name", ""), virtual_epoch());
      apply_definition(study, def);
      std::vector<Corpus> corpora;
      for (const auto& spec : corpus_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw Error("usage", "--corpus expects id=path", 2);
        corpora.push_back(corpus_from_json(read_json(spec.substr(eq + 1)), spec.substr(0, eq)));
      }
      ValidationContext ctx;
      ctx.corpus_ids.emplace();
      for (const auto& c : corpora) ctx.corpus_ids->insert(c.corpus_id);
      const auto violations = validate_study(study, ctx);
      if (!violations.empty()) {
        for (const auto& v : violations) std::cerr << v.code << " " << v.subject << ": " << v.message << "\n";
        return 1;
      }
      const std::string text = serialize_bundle(make_bundle(study, corpora));
      if (out_path.empty()) {
        std::cout << text;
      } else {
        write_file(out_path, text);
      }
      return 0;
    }
    if (*verify_cmd) {
      const StudyBundle b = parse_bundle(read_file(verify_path));
      std::cout << "ok: " << b.study.procedure.size() << " elements, " << b.study.backends.size()
                << " backends, " << b.corpora.size() << " corpora\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.detail() << "\n";
    if (e.extra().is_object() && !e.extra().empty()) std::cerr << e.extra().dump(2) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
