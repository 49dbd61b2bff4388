#include "studyflow/harness.hpp"

#include <chrono>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "studyflow/domain_json.hpp"
#include "studyflow/sse.hpp"

namespace studyflow {

using nlohmann::json;

// -- client ---------------------------------------------------------------------

const json* ChatStream::terminal() const {
  if (frames.empty() || !frames.back().value("final", false)) return nullptr;
  return &frames.back();
}

std::string ChatStream::concatenated_text() const {
  std::string out;
  for (const auto& f : frames) {
    if (!f.value("final", false)) out += f.value("text", "");
  }
  return out;
}

ApiClient::ApiClient(const std::string& base_url) : http_(std::make_unique<httplib::Client>(base_url)) {
  if (!http_->is_valid()) throw ServiceError("invalid service URL '" + base_url + "'");
  http_->set_connection_timeout(10, 0);
  http_->set_read_timeout(120, 0);
  http_->set_write_timeout(30, 0);
}

ApiClient::~ApiClient() = default;
ApiClient::ApiClient(ApiClient&&) noexcept = default;
ApiClient& ApiClient::operator=(ApiClient&&) noexcept = default;

namespace {

httplib::Headers auth_headers(const std::string& token) {
  httplib::Headers headers;
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
  return headers;
}

ApiResult to_result(const httplib::Result& res, const std::string& what) {
  if (!res) throw ServiceError(what + ": " + httplib::to_string(res.error()));
  ApiResult out;
  out.status = res->status;
  out.raw = res->body;
  if (res->get_header_value("Content-Type").rfind("application/json", 0) == 0) {
    out.body = json::parse(res->body, nullptr, false);
    if (out.body.is_discarded()) out.body = nullptr;
  }
  return out;
}

}  // namespace

ApiResult ApiClient::get(const std::string& path) const {
  return to_result(http_->Get(path, auth_headers(token_)), "GET " + path);
}

ApiResult ApiClient::post(const std::string& path, const json& body) const {
  return send_raw("POST", path, body.dump(), "application/json");
}

ApiResult ApiClient::put(const std::string& path, const json& body) const {
  return send_raw("PUT", path, body.dump(), "application/json");
}

ApiResult ApiClient::patch(const std::string& path, const json& body) const {
  return send_raw("PATCH", path, body.dump(), "application/json");
}

ApiResult ApiClient::del(const std::string& path) const {
  return to_result(http_->Delete(path, auth_headers(token_)), "DELETE " + path);
}

ApiResult ApiClient::send_raw(const std::string& method, const std::string& path, const std::string& body,
                              const std::string& content_type) const {
  const auto headers = auth_headers(token_);
  const std::string what = method + " " + path;
  if (method == "POST") return to_result(http_->Post(path, headers, body, content_type), what);
  if (method == "PUT") return to_result(http_->Put(path, headers, body, content_type), what);
  if (method == "PATCH") return to_result(http_->Patch(path, headers, body, content_type), what);
  if (method == "DELETE") return to_result(http_->Delete(path, headers, body, content_type), what);
  if (method == "GET") return get(path);
  throw ServiceError("unsupported method " + method);
}

ChatStream ApiClient::chat(const json& body) const {
  ChatStream out;
  SseParser parser;
  std::string error_body;
  httplib::Request req;
  req.method = "POST";
  req.path = "/api/participant/chat";
  req.headers = auth_headers(token_);
  req.headers.emplace("Content-Type", "application/json");
  req.body = body.dump();
  int status = 0;
  req.response_handler = [&](const httplib::Response& response) {
    status = response.status;
    return true;
  };
  req.content_receiver = [&](const char* data, std::size_t size, std::uint64_t, std::uint64_t) {
    if (status != 200) {
      error_body.append(data, size);
      return true;
    }
    for (auto& event : parser.feed(std::string_view(data, size))) {
      json frame = json::parse(event.data, nullptr, false);
      if (!frame.is_discarded()) out.frames.push_back(std::move(frame));
    }
    return true;
  };
  auto res = http_->send(req);
  if (!res) throw ServiceError("POST /api/participant/chat: " + httplib::to_string(res.error()));
  out.status = res->status;
  if (out.status != 200) {
    out.error = json::parse(error_body.empty() ? res->body : error_body, nullptr, false);
    if (out.error.is_discarded()) out.error = nullptr;
  }
  return out;
}

void ApiClient::admin_session(const std::string& username, const std::string& password) {
  const json credentials = {{"username", username}, {"password", password}};
  ApiResult setup = get("/api/setup");
  ApiResult res = setup.ok() && setup.body.value("setup_required", false) ? post("/api/admin/setup", credentials)
                                                                            : post("/api/admin/login", credentials);
  if (!res.ok()) throw ServiceError("admin authentication failed: " + res.raw);
  token_ = res.body.at("token").get<std::string>();
}

std::vector<std::vector<std::string>> csv_decode(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (ch == '\r' || ch == '\n') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      field_started = false;
    } else {
      field += ch;
      field_started = true;
    }
  }
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// -- scripts ----------------------------------------------------------------------

namespace {

const std::set<std::string, std::less<>> kActions = {"advance", "consent", "answer_survey", "chat",
                                                     "search",  "click",   "rate",          "note",
                                                     "wait",    "submit_task", "answer_popup"};

void need(bool condition, const ScriptAction& a, const std::string& message) {
  if (!condition) throw ScriptTypeError(a.action + ": " + message);
}

bool is_int(const json& args, const char* key) { return args.contains(key) && args[key].is_number_integer(); }
bool is_str(const json& args, const char* key) { return args.contains(key) && args[key].is_string(); }
bool absent_or(const json& args, const char* key, bool (*check)(const json&)) {
  return !args.contains(key) || check(args[key]);
}

}  // namespace

void check_action(const ScriptAction& a) {
  const json& x = a.args;
  need(kActions.count(a.action) == 1, a, "unknown action");
  auto is_object = [](const json& v) { return v.is_object(); };
  auto is_number = [](const json& v) { return v.is_number() && v.get<double>() >= 0; };
  auto is_string = [](const json& v) { return v.is_string(); };
  if (a.action == "chat") {
    need(is_str(x, "prompt"), a, "'prompt' must be a string");
    need(absent_or(x, "typing_ms", is_number), a, "'typing_ms' must be a non-negative number");
  } else if (a.action == "search") {
    need(is_str(x, "query"), a, "'query' must be a string");
    need(absent_or(x, "typing_ms", is_number), a, "'typing_ms' must be a non-negative number");
  } else if (a.action == "click") {
    need(is_int(x, "rank"), a, "'rank' must be an integer");
    need(absent_or(x, "query", [](const json& v) { return v.is_number_integer(); }), a,
         "'query' must be an integer index");
    need(absent_or(x, "url", is_string), a, "'url' must be a string");
  } else if (a.action == "rate") {
    need(is_str(x, "target") && (x["target"] == "turn" || x["target"] == "trajectory"), a,
         "'target' must be \"turn\" or \"trajectory\"");
    need(is_int(x, "value"), a, "'value' must be an integer");
    need(absent_or(x, "turn", [](const json& v) { return v.is_number_integer() || v.is_string(); }), a,
         "'turn' must be an index or a turn id");
  } else if (a.action == "note") {
    need(is_str(x, "text"), a, "'text' must be a string");
  } else if (a.action == "wait") {
    need(x.contains("seconds") && is_number(x["seconds"]), a, "'seconds' must be a non-negative number");
  } else if (a.action == "answer_survey" || a.action == "answer_popup" || a.action == "advance") {
    need(absent_or(x, "answers", is_object), a, "'answers' must be an object");
    need(absent_or(x, "instance_id", is_string), a, "'instance_id' must be a string");
  } else if (a.action == "consent") {
    need(absent_or(x, "checked", [](const json& v) { return v.is_array(); }), a, "'checked' must be an array");
  } else if (a.action == "submit_task") {
    need(absent_or(x, "final_note", is_string), a, "'final_note' must be a string");
  }
  if (a.expect) {
    const json& e = *a.expect;
    need(e.is_object(), a, "'expect' must be an object");
    need(absent_or(e, "status", [](const json& v) { return v.is_number_integer(); }), a, "expect.status");
    need(absent_or(e, "error", is_string), a, "expect.error must be a string");
    need(absent_or(e, "reason", is_string), a, "expect.reason must be a string");
    need(absent_or(e, "popups", [](const json& v) { return v.is_number_integer(); }), a, "expect.popups");
    need(absent_or(e, "completed", [](const json& v) { return v.is_boolean(); }), a, "expect.completed");
  }
}

std::vector<ScriptAction> parse_script(std::string_view text) {
  std::vector<ScriptAction> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string trimmed = trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;
    json doc = json::parse(trimmed, nullptr, false);
    const std::string where = "line " + std::to_string(number);
    if (doc.is_discarded() || !doc.is_object()) throw ScriptTypeError(where + ": not a JSON object");
    if (!doc.contains("action") || !doc["action"].is_string()) {
      throw ScriptTypeError(where + ": missing string member 'action'");
    }
    ScriptAction action;
    action.action = doc["action"].get<std::string>();
    if (doc.contains("expect")) action.expect = doc["expect"];
    doc.erase("action");
    doc.erase("expect");
    action.args = std::move(doc);
    try {
      check_action(action);
    } catch (const ScriptTypeError& e) {
      throw ScriptTypeError(where + ": " + e.what());
    }
    out.push_back(std::move(action));
  }
  return out;
}

std::vector<ScriptAction> load_script(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScriptTypeError("cannot read script '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_script(text.str());
}

json auto_answers(const SurveyInstrument& survey, const json& overrides) {
  json out = json::object();
  for (const Question& q : survey.questions) {
    if (overrides.contains(q.question_id)) {
      out[q.question_id] = overrides[q.question_id];
      continue;
    }
    if (q.attention_check) {
      out[q.question_id] = answer_to_json(q.attention_check->expected_answer);
    } else if (const auto* likert = std::get_if<Likert>(&q.answer_type)) {
      out[q.question_id] = (likert->points + 1) / 2;
    } else if (const auto* choice = std::get_if<MultipleChoice>(&q.answer_type)) {
      if (choice->allow_multiple) {
        out[q.question_id] = json::array({choice->options.front()});
      } else {
        out[q.question_id] = choice->options.front();
      }
    } else {
      out[q.question_id] = "ok";
    }
  }
  return out;
}

json SessionTranscript::to_json() const {
  json actions_json = json::array();
  for (const auto& a : actions) {
    actions_json.push_back({{"index", a.index},
                            {"action", a.action},
                            {"request", a.request},
                            {"status", a.status},
                            {"response", a.response},
                            {"popups", a.popups},
                            {"ok", a.ok},
                            {"problem", a.problem}});
  }
  auto counts_json = [](const TranscriptCounts& c) {
    return json{{"turns", c.turns}, {"queries", c.queries}, {"clicks", c.clicks}, {"popups_answered", c.popups_answered}};
  };
  return {{"study_id", study_id},
          {"participant_id", participant_id},
          {"session_id", session_id},
          {"actions", actions_json},
          {"counts", counts_json(counts)},
          {"completed", completed},
          {"completed_at", completed_at ? json(*completed_at) : json(nullptr)},
          {"export_diff",
           {{"checked", export_diff.checked},
            {"exported", counts_json(export_diff.exported)},
            {"mismatches", export_diff.mismatches}}},
          {"failures", failures},
          {"ok", ok()}};
}

ExportDiff diff_export(const SessionTranscript& t, const std::string& chat_history_csv,
                       const std::string& search_log_csv, const std::string& in_situ_csv) {
  ExportDiff diff;
  diff.checked = true;
  // Rows of `csv` for this session, as column-name → value maps.
  auto session_rows = [&](const std::string& csv) {
    std::vector<std::map<std::string, std::string>> out;
    const auto rows = csv_decode(csv);
    if (rows.empty()) return out;
    const auto& header = rows.front();
    for (std::size_t r = 1; r < rows.size(); ++r) {
      std::map<std::string, std::string> row;
      for (std::size_t c = 0; c < header.size() && c < rows[r].size(); ++c) row[header[c]] = rows[r][c];
      if (row["session_id"] == t.session_id) out.push_back(std::move(row));
    }
    return out;
  };
  diff.exported.turns = static_cast<std::int64_t>(session_rows(chat_history_csv).size());
  std::set<std::string> queries;
  for (const auto& row : session_rows(search_log_csv)) {
    queries.insert(row.at("query_id"));
    if (!row.at("clicked_url").empty()) ++diff.exported.clicks;
  }
  diff.exported.queries = static_cast<std::int64_t>(queries.size());
  std::set<std::string> instances;
  for (const auto& row : session_rows(in_situ_csv)) instances.insert(row.at("instance_id"));
  diff.exported.popups_answered = static_cast<std::int64_t>(instances.size());

  auto compare = [&](const char* what, std::int64_t transcript, std::int64_t exported) {
    if (transcript != exported) {
      diff.mismatches.push_back(std::string(what) + ": transcript " + std::to_string(transcript) + ", export " +
                                std::to_string(exported));
    }
  };
  compare("turns", t.counts.turns, diff.exported.turns);
  compare("queries", t.counts.queries, diff.exported.queries);
  compare("clicks", t.counts.clicks, diff.exported.clicks);
  compare("popups answered", t.counts.popups_answered, diff.exported.popups_answered);
  return diff;
}

// -- runner ---------------------------------------------------------------------------

namespace {

class Runner {
 public:
  Runner(const std::string& endpoint, const HarnessOptions& options)
      : options_(options), participant_(endpoint), admin_(endpoint), probe_(endpoint) {
    admin_.set_token(options.admin_token);
  }

  SessionTranscript run(const std::string& study_id, const std::vector<ScriptAction>& script) {
    for (const auto& action : script) check_action(action);
    t_.study_id = study_id;
    register_participant();
    for (std::size_t i = 0; i < script.size(); ++i) execute(i, script[i]);

    const ApiResult state = participant_.get("/api/participant/state");
    if (state.ok()) {
      t_.completed = state.body.value("completed", false);
      if (state.body["completed_at"].is_number_integer()) t_.completed_at = state.body["completed_at"].get<TimestampMs>();
    }
    if (options_.compare_export && !options_.admin_token.empty()) {
      const std::string base = "/api/admin/studies/" + study_id + "/export/";
      const ApiResult chat = admin_.get(base + "chat_history.csv");
      const ApiResult search = admin_.get(base + "search_log.csv");
      const ApiResult in_situ = admin_.get(base + "in_situ.csv");
      if (!chat.ok() || !search.ok() || !in_situ.ok()) {
        t_.failures.push_back("export download failed");
      } else {
        t_.export_diff = diff_export(t_, chat.raw, search.raw, in_situ.raw);
      }
    }
    return std::move(t_);
  }

 private:
  void register_participant() {
    std::string invite = options_.invite_code;
    if (invite.empty()) {
      if (options_.admin_token.empty()) throw ServiceError("either an invite code or an admin token is required");
      const ApiResult res = admin_.get("/api/admin/studies/" + t_.study_id + "/invite");
      if (!res.ok()) throw ServiceError("cannot read the invite code: " + res.raw);
      invite = res.body.at("invite_code").get<std::string>();
    }
    json body = {{"study_id", t_.study_id}, {"invite_code", invite}};
    if (!options_.external_label.empty()) body["external_label"] = options_.external_label;
    const ApiResult res = participant_.post("/api/participant/register", body);
    if (!res.ok()) throw ServiceError("registration failed: " + res.raw);
    t_.participant_id = res.body.at("participant_id").get<std::string>();
    t_.session_id = res.body.at("session_id").get<std::string>();
    participant_.set_token(res.body.at("token").get<std::string>());
  }

  TimestampMs now() const {
    if (options_.virtual_clock) {
      const ApiResult res = probe_.get("/api/test/clock");
      if (res.ok()) return res.body.at("now_ms").get<TimestampMs>();
    }
    return SystemClock().now_ms();
  }

  json state() {
    const ApiResult res = participant_.get("/api/participant/state");
    if (!res.ok()) throw ServiceError("state request failed: " + res.raw);
    note_popups(res.body);
    return res.body;
  }

  // Collects descriptors not delivered before.
  json note_popups(const json& body) {
    json fresh = json::array();
    if (!body.is_object() || !body.contains("popups") || !body["popups"].is_array()) return fresh;
    for (const auto& p : body["popups"]) {
      const std::string id = p.value("instance_id", "");
      if (seen_popups_.insert(id).second) fresh.push_back(p);
      pending_[id] = p;
    }
    return fresh;
  }

  void finish(ActionRecord& record, const std::optional<json>& expect, const json& error_body) {
    if (!expect) {
      if (record.status < 200 || record.status >= 300 || !error_body.is_null()) {
        record.ok = false;
        record.problem = "unexpected error: " + error_body.dump();
      }
      return;
    }
    const json& e = *expect;
    std::vector<std::string> problems;
    if (e.contains("status") && e["status"].get<int>() != record.status) {
      problems.push_back("status " + std::to_string(record.status) + " != " + e["status"].dump());
    }
    if (!e.contains("status") && !e.contains("error") && (record.status < 200 || record.status >= 300)) {
      problems.push_back("unexpected error: " + error_body.dump());
    }
    const std::string code = error_body.is_object() ? error_body.value("error", "") : "";
    if (e.contains("error") && e["error"].get<std::string>() != code) {
      problems.push_back("error '" + code + "' != " + e["error"].dump());
    }
    const std::string reason = error_body.is_object() ? error_body.value("reason", "") : "";
    if (e.contains("reason") && e["reason"].get<std::string>() != reason) {
      problems.push_back("reason '" + reason + "' != " + e["reason"].dump());
    }
    if (e.contains("popups") && e["popups"].get<std::size_t>() != record.popups.size()) {
      problems.push_back("popups " + std::to_string(record.popups.size()) + " != " + e["popups"].dump());
    }
    if (e.contains("completed")) {
      const bool completed = state().value("completed", false);
      if (completed != e["completed"].get<bool>()) problems.push_back("completed " + std::string(completed ? "true" : "false"));
    }
    if (!problems.empty()) {
      record.ok = false;
      for (const auto& p : problems) record.problem += (record.problem.empty() ? "" : "; ") + p;
    }
  }

  void take(ActionRecord& record, const ApiResult& res) {
    record.status = res.status;
    record.response = res.body.is_null() ? json(res.raw) : res.body;
    record.popups = note_popups(res.body);
  }

  void submit_survey_step(ActionRecord& record, const json& step, const json& overrides, bool exact) {
    const SurveyInstrument survey = survey_from_json(step.at("survey"));
    const json answers = exact ? overrides : auto_answers(survey, overrides);
    record.request = {{"answers", answers}, {"client_ts", now()}};
    take(record, participant_.post("/api/participant/survey", record.request));
  }

  void submit_consent(ActionRecord& record, const json& step, const json& args) {
    json checked = args.value("checked", json());
    if (checked.is_null()) {
      checked = json::array();
      for (std::size_t i = 0; i < step["consent"]["checkboxes"].size(); ++i) checked.push_back(true);
    }
    record.request = {{"checked", checked}, {"client_ts", now()}};
    take(record, participant_.post("/api/participant/consent", record.request));
  }

  void submit_task(ActionRecord& record, const json& args) {
    record.request = {{"client_ts", now()}};
    if (args.contains("final_note")) record.request["final_note"] = args["final_note"];
    take(record, participant_.post("/api/participant/submit-task", record.request));
  }

  void execute(std::size_t index, const ScriptAction& a) {
    ActionRecord record;
    record.index = index;
    record.action = a.action;
    json error_body = nullptr;
    const json& x = a.args;
    const json overrides = x.value("answers", json::object());

    if (a.action == "advance") {
      const json s = state();
      const json& step = s["step"];
      if (step.is_null()) {
        record.status = 409;
        record.response = {{"error", "session_closed"}, {"message", "the flow is finished"}};
      } else if (step["kind"] == "consent") {
        submit_consent(record, step, x);
      } else if (step["kind"] == "main_task") {
        submit_task(record, x);
      } else {
        submit_survey_step(record, step, overrides, false);
      }
    } else if (a.action == "answer_survey") {
      const json s = state();
      if (s["step"].is_null() || !s["step"].contains("survey")) {
        record.status = 409;
        record.response = {{"error", "wrong_step"}, {"message", "current step has no survey"}};
      } else {
        submit_survey_step(record, s["step"], overrides, x.value("exact", false));
      }
    } else if (a.action == "consent") {
      const json s = state();
      submit_consent(record, s["step"].is_null() ? json::object() : s["step"], x);
    } else if (a.action == "chat") {
      const TimestampMs t = now();
      const auto typing = static_cast<TimestampMs>(x.value("typing_ms", 0.0));
      record.request = {{"prompt", x["prompt"]}, {"typing_start_ms", t - typing}, {"typing_end_ms", t}, {"client_ts", t}};
      const ChatStream stream = participant_.chat(record.request);
      record.status = stream.status;
      if (!stream.ok()) {
        record.response = stream.error;
        record.popups = note_popups(stream.error);
      } else {
        ++t_.counts.turns;
        record.response = {{"frames", stream.frames}, {"text", stream.concatenated_text()}};
        const json* last = stream.terminal();
        if (last == nullptr) {
          error_body = {{"error", "truncated_stream"}};
        } else {
          turns_.push_back(last->value("turn_id", ""));
          record.popups = note_popups(*last);
          if (last->contains("error")) error_body = {{"error", (*last)["error"].value("code", "")}};
        }
      }
    } else if (a.action == "search") {
      const TimestampMs t = now();
      const auto typing = static_cast<TimestampMs>(x.value("typing_ms", 0.0));
      record.request = {{"query", x["query"]}, {"typing_start_ms", t - typing}, {"typing_end_ms", t}, {"client_ts", t}};
      take(record, participant_.post("/api/participant/search", record.request));
      if (record.status == 200) {
        ++t_.counts.queries;
        queries_.push_back(record.response);
      }
    } else if (a.action == "click") {
      if (queries_.empty()) {
        record.status = 409;
        record.response = {{"error", "script_error"}, {"message", "no query issued yet"}};
      } else {
        const auto qi = x.value("query", static_cast<std::int64_t>(queries_.size()) - 1);
        const json& query = queries_.at(static_cast<std::size_t>(qi));
        const std::int64_t rank = x["rank"].get<std::int64_t>();
        std::string url = x.value("url", "");
        if (!x.contains("url")) {
          for (const auto& r : query["results"]) {
            if (r.value("rank", 0) == rank) url = r.value("url", "");
          }
        }
        const TimestampMs t = now();
        record.request = {{"query_id", query["query_id"]}, {"rank", rank}, {"url", url}, {"clicked_ms", t}, {"client_ts", t}};
        take(record, participant_.post("/api/participant/click", record.request));
        if (record.status == 200) ++t_.counts.clicks;
      }
    } else if (a.action == "rate") {
      const std::int64_t value = x["value"].get<std::int64_t>();
      if (x["target"] == "turn") {
        std::string turn_id;
        if (x.contains("turn") && x["turn"].is_string()) {
          turn_id = x["turn"].get<std::string>();
        } else if (!turns_.empty()) {
          const auto ti = x.value("turn", static_cast<std::int64_t>(turns_.size()) - 1);
          turn_id = turns_.at(static_cast<std::size_t>(ti));
        }
        record.request = {{"turn_id", turn_id}, {"rating", value}, {"client_ts", now()}};
        take(record, participant_.post("/api/participant/rate-turn", record.request));
      } else {
        record.request = {{"rating", value}, {"client_ts", now()}};
        take(record, participant_.post("/api/participant/rate-trajectory", record.request));
      }
    } else if (a.action == "note") {
      record.request = {{"text", x["text"]}, {"client_ts", now()}};
      take(record, participant_.put("/api/participant/note", record.request));
    } else if (a.action == "wait") {
      const auto ms = static_cast<TimestampMs>(x["seconds"].get<double>() * 1000.0);
      record.request = {{"advance_ms", ms}};
      if (options_.virtual_clock) {
        const ApiResult res = probe_.post("/api/test/clock", record.request);
        if (!res.ok()) throw ServiceError("virtual clock unavailable: " + res.raw);
      } else {
        std::this_thread::sleep_for(std::chrono::milliseconds(ms));
      }
      take(record, participant_.get("/api/participant/popups"));
    } else if (a.action == "submit_task") {
      submit_task(record, x);
    } else if (a.action == "answer_popup") {
      state();
      std::string id = x.value("instance_id", "");
      if (id.empty()) {
        const ApiResult res = participant_.get("/api/participant/popups");
        note_popups(res.body);
        if (res.ok() && !res.body["popups"].empty()) id = res.body["popups"][0].value("instance_id", "");
      }
      if (id.empty()) {
        record.status = 409;
        record.response = {{"error", "no_pending_popup"}, {"message", "no popup is pending"}};
      } else {
        json answers = overrides;
        auto it = pending_.find(id);
        if (it != pending_.end() && it->second.contains("survey")) {
          answers = auto_answers(survey_from_json(it->second["survey"]), overrides);
        }
        record.request = {{"instance_id", id}, {"answers", answers}, {"client_ts", now()}};
        take(record, participant_.post("/api/participant/popups/" + id, {{"answers", answers}, {"client_ts", record.request["client_ts"]}}));
        if (record.status == 200) ++t_.counts.popups_answered;
      }
    }

    if (record.status < 200 || record.status >= 300) error_body = record.response;
    finish(record, a.expect, error_body);
    if (!record.ok) t_.failures.push_back("action " + std::to_string(index) + " (" + a.action + "): " + record.problem);
    t_.actions.push_back(std::move(record));
  }

  HarnessOptions options_;
  ApiClient participant_;
  ApiClient admin_;
  ApiClient probe_;
  SessionTranscript t_;
  std::set<std::string> seen_popups_;
  std::map<std::string, json> pending_;
  std::vector<std::string> turns_;
  std::vector<json> queries_;
};

}  // namespace

SessionTranscript run_script(const std::string& endpoint, const std::string& study_id,
                             const std::vector<ScriptAction>& script, const HarnessOptions& options) {
  for (const auto& action : script) check_action(action);
  Runner runner(endpoint, options);
  return runner.run(study_id, script);
}

}  // namespace studyflow
