#pragma once

// Helpers shared by the unit tests and the acceptance binary. CSV and ZIP
// contents are read back with Python's csv and zipfile modules so the
// checks do not depend on this project's own decoders.

#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "studyflow/domain.hpp"
#include "studyflow/domain_json.hpp"
#include "studyflow/harness.hpp"
#include "studyflow/http_api.hpp"

#ifndef STUDYFLOW_FIXTURES
#define STUDYFLOW_FIXTURES "tests/fixtures"
#endif

namespace testsupport {

using nlohmann::json;

inline std::string fixture(const std::string& name) { return std::string(STUDYFLOW_FIXTURES) + "/" + name; }

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("studyflow-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << bytes;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

/// Runs `program` with python3, passing `input_path` as argv[1]; returns
/// stdout. Throws when the interpreter fails.
inline std::string run_python(const std::string& program, const std::filesystem::path& input_path) {
  const auto dir = temp_dir("py");
  write_file(dir / "prog.py", program);
  const std::string command = "python3 " + (dir / "prog.py").string() + " " + input_path.string();
  FILE* pipe = ::popen(command.c_str(), "r");
  if (pipe == nullptr) throw std::runtime_error("cannot start python3");
  std::string out;
  char buffer[4096];
  std::size_t n = 0;
  while ((n = std::fread(buffer, 1, sizeof buffer, pipe)) > 0) out.append(buffer, n);
  const int status = ::pclose(pipe);
  std::filesystem::remove_all(dir);
  if (status != 0) throw std::runtime_error("python3 failed: " + out);
  return out;
}

/// Records of `csv_bytes` as parsed by Python's csv module.
inline std::vector<std::vector<std::string>> python_csv_rows(const std::string& csv_bytes) {
  const auto dir = temp_dir("csv");
  write_file(dir / "data.csv", csv_bytes);
  const std::string program =
      "import csv, json, sys\n"
      "with open(sys.argv[1], newline='', encoding='utf-8') as f:\n"
      "    rows = list(csv.reader(f, strict=True))\n"
      "sys.stdout.write(json.dumps(rows))\n";
  const json rows = json::parse(run_python(program, dir / "data.csv"));
  std::filesystem::remove_all(dir);
  return rows.get<std::vector<std::vector<std::string>>>();
}

/// Entries of a ZIP archive as read by Python's zipfile module, after its
/// CRC check passed.
inline std::map<std::string, std::string> python_zip_entries(const std::string& zip_bytes) {
  const auto dir = temp_dir("zip");
  write_file(dir / "data.zip", zip_bytes);
  const std::string program =
      "import json, sys, zipfile\n"
      "z = zipfile.ZipFile(sys.argv[1])\n"
      "bad = z.testzip()\n"
      "if bad is not None: sys.exit('bad crc in ' + bad)\n"
      "sys.stdout.write(json.dumps({n: z.read(n).decode('utf-8') for n in z.namelist()}))\n";
  const json entries = json::parse(run_python(program, dir / "data.zip"));
  std::filesystem::remove_all(dir);
  return entries.get<std::map<std::string, std::string>>();
}

/// The built-in default flow with min_interactions set.
inline studyflow::StudyConfig chat_study(const std::string& id, std::int64_t min_interactions = 0) {
  auto config = studyflow::make_default_study(id);
  config.settings.min_interactions = min_interactions;
  return config;
}

/// The default flow with its main task turned into a search task.
inline studyflow::StudyConfig search_study(const std::string& id, std::int64_t min_interactions = 0) {
  auto config = chat_study(id, min_interactions);
  const std::string old_id = config.tasks.at(0).task_id;
  config.tasks[0].task_id = "task-search";
  config.tasks[0].modality = studyflow::Modality::search;
  config.settings.task_order = {"task-search"};
  for (auto& step : config.flow) {
    if (step.task_id == old_id) step.task_id = "task-search";
  }
  return config;
}

/// A service on a free loopback port: in-memory storage, virtual clock,
/// fixture corpus, and a logged-in admin client.
struct TestServer {
  explicit TestServer(std::string storage_root = "", bool test_mode = true)
      : host([&] {
          studyflow::ServerConfig config;
          config.bind_address = "127.0.0.1";
          config.port = 0;
          config.storage_root = storage_root;
          config.test_mode = test_mode;
          config.secret = "test-secret";
          config.corpus_path = fixture("corpus.tsv");
          return config;
        }()) {
    host.start();
    admin = std::make_unique<studyflow::ApiClient>(host.base_url());
    admin->admin_session("admin", "correct horse battery");
  }

  std::string url() const { return host.base_url(); }

  /// Creates the study and returns its invite code.
  std::string seed(const studyflow::StudyConfig& config) {
    auto res = admin->post("/api/admin/studies", studyflow::study_to_json(config));
    if (!res.ok()) throw std::runtime_error("seeding failed: " + res.raw);
    return res.body.at("invite_code").get<std::string>();
  }

  /// A participant client registered in `study_id`.
  studyflow::ApiClient participant(const std::string& study_id, const std::string& invite,
                                   json* registration = nullptr) {
    studyflow::ApiClient client(url());
    auto res = client.post("/api/participant/register", {{"study_id", study_id}, {"invite_code", invite}});
    if (!res.ok()) throw std::runtime_error("registration failed: " + res.raw);
    client.set_token(res.body.at("token").get<std::string>());
    if (registration != nullptr) *registration = res.body;
    return client;
  }

  studyflow::HarnessOptions harness_options() const {
    studyflow::HarnessOptions options;
    options.admin_token = admin->token();
    options.virtual_clock = true;
    return options;
  }

  studyflow::ServiceHost host;
  std::unique_ptr<studyflow::ApiClient> admin;
};

/// Completes the consent, background and pre-task steps of the default flow.
inline void walk_to_task(studyflow::ApiClient& p) {
  for (int i = 0; i < 3; ++i) {
    auto state = p.get("/api/participant/state");
    const json& step = state.body.at("step");
    studyflow::ApiResult res;
    if (step.at("kind") == "consent") {
      res = p.post("/api/participant/consent", {{"checked", json::array({true, true})}});
    } else {
      res = p.post("/api/participant/survey",
                   {{"answers", studyflow::auto_answers(studyflow::survey_from_json(step.at("survey")))}});
    }
    if (!res.ok()) throw std::runtime_error("walk_to_task: " + res.raw);
  }
}

}  // namespace testsupport
