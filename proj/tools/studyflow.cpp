// Command-line entry point: run the service, seed studies and replay
// participant scripts against a running instance.

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "studyflow/domain_json.hpp"
#include "studyflow/harness.hpp"
#include "studyflow/http_api.hpp"

using nlohmann::json;
using namespace studyflow;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

struct AdminFlags {
  std::string endpoint = "http://127.0.0.1:8080";
  std::string username = "admin";
  std::string password;
  std::string token;

  void add(CLI::App* app) {
    app->add_option("--endpoint", endpoint, "Service base URL")->capture_default_str();
    app->add_option("--admin-user", username, "Admin username")->capture_default_str();
    app->add_option("--admin-password", password, "Admin password (runs first-time setup if needed)")
        ->envname("STUDYFLOW_ADMIN_PASSWORD");
    app->add_option("--admin-token", token, "Existing admin bearer token");
  }

  ApiClient connect() const {
    ApiClient client(endpoint);
    if (!token.empty()) {
      client.set_token(token);
    } else if (!password.empty()) {
      client.admin_session(username, password);
    }
    return client;
  }
};

int serve(const ServerConfig& config) {
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  ServiceHost host(config);
  const int port = host.start();
  std::cout << "listening on " << config.bind_address << ":" << port << (config.test_mode ? " (test mode)" : "")
            << std::endl;
  int received = 0;
  sigwait(&signals, &received);
  host.stop();
  return 0;
}

int seed_study(const AdminFlags& admin, const std::string& study_id, const std::string& config_path,
               std::optional<std::int64_t> min_interactions, const std::string& provider) {
  ApiClient client = admin.connect();
  StudyConfig config = config_path.empty() ? make_default_study(study_id) : study_from_json(json::parse(read_file(config_path)));
  if (!study_id.empty()) config.study_id = study_id;
  if (min_interactions) config.settings.min_interactions = *min_interactions;
  if (!provider.empty()) config.provider_config_ref = provider;
  ApiResult res = client.post("/api/admin/studies", study_to_json(config));
  if (res.status == 409) res = client.put("/api/admin/studies/" + config.study_id, study_to_json(config));
  if (!res.ok()) {
    std::cerr << "seeding failed (" << res.status << "): " << res.raw << "\n";
    return 1;
  }
  std::cout << json{{"study_id", config.study_id}, {"invite_code", res.body["invite_code"]}}.dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Study orchestration service"};
  app.require_subcommand(1);

  ServerConfig server = ServerConfig::from_environment();
  CLI::App* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--bind", server.bind_address, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", server.port, "Port (0 picks a free one)")->capture_default_str();
  std::string storage;
  serve_cmd->add_option("--storage", storage, "Storage root directory (omit for in-memory)");
  serve_cmd->add_option("--secret", server.secret, "Credential-encryption secret");
  serve_cmd->add_flag("--test-mode", server.test_mode, "Use a virtual clock driven by /api/test/clock");
  serve_cmd->add_option("--corpus", server.corpus_path, "Corpus for the mock search provider");

  AdminFlags run_admin;
  std::string run_study, script_path, invite, label, transcript_path;
  bool virtual_clock = false;
  bool no_export = false;
  CLI::App* run_cmd = app.add_subcommand("run", "Replay a behavior script as one participant");
  run_admin.add(run_cmd);
  run_cmd->add_option("--study", run_study, "Study id")->required();
  run_cmd->add_option("script", script_path, "Line-delimited action file")->required();
  run_cmd->add_option("--invite", invite, "Invite code (read with the admin token when omitted)");
  run_cmd->add_option("--label", label, "External participant label");
  run_cmd->add_flag("--virtual-clock", virtual_clock, "Drive waits through the service's test clock");
  run_cmd->add_flag("--no-export", no_export, "Skip the export comparison");
  run_cmd->add_option("--transcript", transcript_path, "Write the transcript JSON here instead of stdout");

  AdminFlags seed_admin;
  std::string seed_id, seed_config, seed_provider;
  std::optional<std::int64_t> seed_min;
  CLI::App* seed_cmd = app.add_subcommand("seed-study", "Create or replace a study");
  seed_admin.add(seed_cmd);
  seed_cmd->add_option("--study", seed_id, "Study id");
  seed_cmd->add_option("--config", seed_config, "Study configuration JSON (default: the built-in default flow)");
  seed_cmd->add_option("--min-interactions", seed_min, "Override the minimum-interactions setting");
  seed_cmd->add_option("--provider", seed_provider, "Provider configuration reference");

  AdminFlags cmp_admin;
  std::string cmp_study, cmp_transcript;
  CLI::App* cmp_cmd = app.add_subcommand("compare-export", "Compare a transcript with the study's export");
  cmp_admin.add(cmp_cmd);
  cmp_cmd->add_option("--study", cmp_study, "Study id")->required();
  cmp_cmd->add_option("transcript", cmp_transcript, "Transcript JSON written by 'run'")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve_cmd) {
      if (!storage.empty()) server.storage_root = storage;
      return serve(server);
    }
    if (*seed_cmd) return seed_study(seed_admin, seed_id, seed_config, seed_min, seed_provider);
    if (*run_cmd) {
      HarnessOptions options;
      if (!run_admin.token.empty() || !run_admin.password.empty()) options.admin_token = run_admin.connect().token();
      options.invite_code = invite;
      options.external_label = label;
      options.virtual_clock = virtual_clock;
      options.compare_export = !no_export;
      const SessionTranscript t = run_script(run_admin.endpoint, run_study, load_script(script_path), options);
      const std::string text = t.to_json().dump(2);
      if (transcript_path.empty()) {
        std::cout << text << std::endl;
      } else {
        std::ofstream(transcript_path, std::ios::binary) << text << "\n";
      }
      for (const auto& f : t.failures) std::cerr << "FAIL " << f << "\n";
      for (const auto& m : t.export_diff.mismatches) std::cerr << "EXPORT MISMATCH " << m << "\n";
      return t.ok() ? 0 : 1;
    }
    if (*cmp_cmd) {
      const json doc = json::parse(read_file(cmp_transcript));
      SessionTranscript t;
      t.session_id = doc.at("session_id").get<std::string>();
      t.counts.turns = doc["counts"].value("turns", 0);
      t.counts.queries = doc["counts"].value("queries", 0);
      t.counts.clicks = doc["counts"].value("clicks", 0);
      t.counts.popups_answered = doc["counts"].value("popups_answered", 0);
      ApiClient client = cmp_admin.connect();
      const std::string base = "/api/admin/studies/" + cmp_study + "/export/";
      const ApiResult chat = client.get(base + "chat_history.csv");
      const ApiResult search = client.get(base + "search_log.csv");
      const ApiResult in_situ = client.get(base + "in_situ.csv");
      if (!chat.ok() || !search.ok() || !in_situ.ok()) {
        std::cerr << "export download failed\n";
        return 1;
      }
      const ExportDiff diff = diff_export(t, chat.raw, search.raw, in_situ.raw);
      for (const auto& m : diff.mismatches) std::cout << "MISMATCH " << m << "\n";
      if (diff.mismatches.empty()) std::cout << "export matches transcript\n";
      return diff.mismatches.empty() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
