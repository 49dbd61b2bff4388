#include "studyflow/service.hpp"

#include <sodium.h>

#include <algorithm>
#include <cstring>
#include <set>

#include "studyflow/domain_json.hpp"

namespace studyflow {

using nlohmann::json;

std::string_view to_string(PrincipalKind kind) {
  return kind == PrincipalKind::admin ? "admin" : "participant";
}

namespace {

void ensure_sodium() {
  static const int rc = sodium_init();
  if (rc < 0) throw StorageFailure("libsodium failed to initialise");
}

std::string fast_hash(const std::string& text) {
  unsigned char digest[32];
  crypto_generichash(digest, sizeof digest, reinterpret_cast<const unsigned char*>(text.data()), text.size(), nullptr,
                     0);
  std::string hex(sizeof digest * 2 + 1, '\0');
  sodium_bin2hex(hex.data(), hex.size(), digest, sizeof digest);
  hex.pop_back();
  return hex;
}

bool constant_time_equal(const std::string& a, const std::string& b) {
  return a.size() == b.size() && sodium_memcmp(a.data(), b.data(), a.size()) == 0;
}

void check_segment(const std::string& id, const char* what) {
  if (id.empty() || id.find('/') != std::string::npos) {
    throw BadRequest(std::string(what) + " must be a single non-empty key segment");
  }
  try {
    check_key(id);
  } catch (const StorageFailure&) {
    throw BadRequest(std::string(what) + " may only contain letters, digits, '.', '_' and '-'");
  }
}

std::string session_key(const std::string& study_id, const std::string& session_id) {
  return study_id + "/" + session_id;
}

json questions_json(const SurveyInstrument& instrument) {
  json out = json::array();
  for (const auto& q : instrument.questions) out.push_back({{"question_id", q.question_id}, {"prompt", q.prompt}});
  return out;
}

json answers_json(const std::map<std::string, AnswerValue>& answers) {
  json out = json::object();
  for (const auto& [id, value] : answers) out[id] = answer_to_json(value);
  return out;
}

json task_json(const TaskDef& task) {
  return {{"task_id", task.task_id},
          {"modality", to_string(task.modality)},
          {"title", task.title},
          {"description_markdown", task.description_markdown}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Event fold

std::vector<FiredTrigger> apply_event(SessionRuntime& rt, const InteractionEvent& event) {
  const json& p = event.payload;
  const std::string task_id = p.is_object() ? p.value("task_id", "") : "";
  auto observe_event = [&]() {
    auto result = observe(std::move(rt.triggers), event);
    rt.triggers = std::move(result.state);
    return std::move(result.fired);
  };

  switch (event.kind) {
    case EventKind::prompt:
      record_interaction(rt.flow, task_id, true, false, false);
      return observe_event();
    case EventKind::response_complete:
      record_interaction(rt.flow, task_id, false, true, false);
      return observe_event();
    case EventKind::query:
      record_interaction(rt.flow, task_id, false, false, true);
      return observe_event();
    case EventKind::task_started:
    case EventKind::task_submitted:
      return observe_event();
    case EventKind::popup_fired: {
      const std::string instance = p.value("instance_id", "");
      if (find_instance(rt.triggers, instance) != nullptr) return {};
      const std::string cause = p.value("cause", "");
      const TimestampMs at = p.value("fired_at", event.server_ts);
      if (cause == "tick") {
        rt.triggers = observe(std::move(rt.triggers), ClockTick{at}).state;
      } else if (cause == "before_submission") {
        rt.triggers = pending_before_submission(std::move(rt.triggers), task_id, at).state;
      }
      return {};
    }
    case EventKind::popup_answered: {
      const std::string instance = p.value("instance_id", "");
      const FiredTrigger* fired = find_instance(rt.triggers, instance);
      if (fired != nullptr && fired->state == FiredState::pending) {
        rt.triggers = acknowledge(std::move(rt.triggers), instance, p.value("response_id", ""), event.server_ts);
      }
      return {};
    }
    case EventKind::step_completed: {
      const auto index = p.value("step_index", std::size_t{0});
      ParticipantSession& flow = rt.flow;
      if (index != flow.cursor || flow.finished()) return {};
      flow.step_states[index] = {StepStatus::completed, event.server_ts};
      ++flow.cursor;
      if (flow.finished()) {
        flow.completed_at = event.server_ts;
      } else {
        flow.step_states[flow.cursor].status = StepStatus::in_progress;
      }
      if (p.contains("selected_intentions") && !task_id.empty()) {
        flow.selected_intentions[task_id] = p["selected_intentions"].get<std::vector<std::string>>();
      }
      return {};
    }
    default:
      return {};
  }
}

json popup_descriptor(const StudyConfig& config, const FiredTrigger& fired) {
  json out = fired_to_json(fired);
  if (const SurveyInstrument* survey = config.find_survey(fired.survey_id)) out["survey"] = survey_to_json(*survey);
  return out;
}

// ---------------------------------------------------------------------------

struct StudyService::SessionSlot {
  std::mutex mutex;
  std::string study_id;
  std::unique_ptr<SessionRuntime> runtime;
};

struct StudyService::TokenInfo {
  Principal principal;
  TimestampMs expires_at = 0;
  std::uint64_t requests = 0;
};

StudyService::StudyService(Store& store, const Clock& clock, CredentialStore& credentials,
                           const ProviderGateway& gateway, ServiceOptions options)
    : store_(store), clock_(clock), credentials_(credentials), gateway_(gateway), options_(options), log_(store, clock) {
  ensure_sodium();
  for (const auto& id : list_studies()) log_.load_study(id);
}

StudyService::~StudyService() = default;

// -- authentication ---------------------------------------------------------

bool StudyService::setup_required() const { return store_.list(Collection::admin_accounts, "").empty(); }

std::string StudyService::setup_admin(const std::string& username, const std::string& password) {
  check_segment(username, "username");
  if (password.size() < 8) throw BadRequest("password must be at least 8 characters");
  std::lock_guard lock(setup_mutex_);
  if (!setup_required()) throw Conflict("an administrator account already exists");
  std::string hash(crypto_pwhash_STRBYTES, '\0');
  if (crypto_pwhash_str(hash.data(), password.data(), password.size(), crypto_pwhash_OPSLIMIT_INTERACTIVE,
                        crypto_pwhash_MEMLIMIT_INTERACTIVE) != 0) {
    throw StorageFailure("password hashing ran out of memory");
  }
  hash.resize(std::strlen(hash.c_str()));
  store_.put({Collection::admin_accounts, username}, json{{"username", username}, {"password_hash", hash}}.dump(), 0);
  return issue_token({PrincipalKind::admin, username, "", ""});
}

std::string StudyService::admin_login(const std::string& username, const std::string& password) {
  std::optional<Document> doc;
  try {
    check_segment(username, "username");
    doc = store_.get({Collection::admin_accounts, username});
  } catch (const BadRequest&) {
  }
  if (!doc) throw Unauthorized("unknown username or wrong password");
  const std::string hash = json::parse(doc->value).at("password_hash").get<std::string>();
  if (crypto_pwhash_str_verify(hash.c_str(), password.data(), password.size()) != 0) {
    throw Unauthorized("unknown username or wrong password");
  }
  return issue_token({PrincipalKind::admin, username, "", ""});
}

std::string StudyService::issue_token(Principal principal) {
  const std::string token = random_id(24);
  auto info = std::make_unique<TokenInfo>();
  info->principal = std::move(principal);
  info->expires_at = clock_.now_ms() + options_.token_ttl.count();
  std::lock_guard lock(tokens_mutex_);
  tokens_[token] = std::move(info);
  return token;
}

Principal StudyService::authenticate(const std::string& token) {
  std::lock_guard lock(tokens_mutex_);
  auto it = tokens_.find(token);
  if (it == tokens_.end()) throw Unauthorized("missing or unknown bearer token");
  TokenInfo& info = *it->second;
  if (clock_.now_ms() >= info.expires_at) {
    tokens_.erase(it);
    throw Unauthorized("bearer token expired");
  }
  if (++info.requests > options_.token_request_cap) throw RateLimited("token request cap reached; log in again");
  return info.principal;
}

// -- studies ------------------------------------------------------------------

std::optional<StudyService::StudyRecord> StudyService::load_study_record(const std::string& study_id) const {
  if (study_id.empty() || study_id.find('/') != std::string::npos) return std::nullopt;
  try {
    check_key(study_id);
  } catch (const StorageFailure&) {
    return std::nullopt;
  }
  auto doc = store_.get({Collection::studies, study_key(study_id)});
  if (!doc) return std::nullopt;
  const json body = json::parse(doc->value);
  return StudyRecord{study_from_json(body.at("config")), body.value("invite_code", ""), doc->version};
}

void StudyService::save_study_record(const StudyRecord& record, std::uint64_t expected_version) {
  const json body = {{"config", study_to_json(record.config)}, {"invite_code", record.invite_code}};
  store_.put({Collection::studies, study_key(record.config.study_id)}, body.dump(), expected_version);
}

std::vector<std::string> StudyService::list_studies() const {
  std::vector<std::string> out;
  constexpr std::string_view suffix = "/config";
  for (const auto& key : store_.list(Collection::studies, "")) {
    if (key.size() > suffix.size() && key.compare(key.size() - suffix.size(), suffix.size(), suffix) == 0) {
      out.push_back(key.substr(0, key.size() - suffix.size()));
    }
  }
  return out;
}

namespace {

void require_valid(const StudyConfig& config) {
  auto report = validate_study_config(config);
  const bool has_error =
      std::any_of(report.begin(), report.end(), [](const auto& issue) { return issue.severity == Severity::error; });
  if (has_error) throw ValidationFailed(std::move(report));
}

}  // namespace

StudyConfig StudyService::create_study(const StudyConfig& config) {
  check_segment(config.study_id, "study_id");
  require_valid(config);
  std::lock_guard lock(studies_mutex_);
  if (load_study_record(config.study_id)) throw Conflict("study '" + config.study_id + "' already exists");
  save_study_record({config, random_id(6), 0}, 0);
  log_.load_study(config.study_id);
  return config;
}

StudyConfig StudyService::get_study(const std::string& study_id) const {
  auto record = load_study_record(study_id);
  if (!record) throw UnknownStudy("no study '" + study_id + "'");
  return record->config;
}

StudyConfig StudyService::update_study(const StudyConfig& config) {
  return modify_study(config.study_id, [&](StudyConfig& target) { target = config; });
}

StudyConfig StudyService::modify_study(const std::string& study_id, const std::function<void(StudyConfig&)>& edit) {
  for (;;) {
    auto record = load_study_record(study_id);
    if (!record) throw UnknownStudy("no study '" + study_id + "'");
    StudyRecord next = *record;
    edit(next.config);
    if (next.config.study_id != study_id) throw BadRequest("study_id cannot be changed");
    require_valid(next.config);
    try {
      save_study_record(next, record->version);
      return next.config;
    } catch (const VersionConflict&) {
      // Another admin wrote in between; re-apply the edit on the fresh copy.
    }
  }
}

void StudyService::delete_study(const std::string& study_id) {
  std::lock_guard lock(studies_mutex_);
  auto record = load_study_record(study_id);
  if (!record) throw UnknownStudy("no study '" + study_id + "'");
  if (!store_.list(Collection::sessions, study_id + "/").empty()) {
    throw Conflict("study '" + study_id + "' has participants and cannot be deleted");
  }
  store_.erase({Collection::studies, study_key(study_id)}, record->version);
}

std::string StudyService::invite_code(const std::string& study_id) const {
  auto record = load_study_record(study_id);
  if (!record) throw UnknownStudy("no study '" + study_id + "'");
  return record->invite_code;
}

std::string StudyService::rotate_invite_code(const std::string& study_id) {
  for (;;) {
    auto record = load_study_record(study_id);
    if (!record) throw UnknownStudy("no study '" + study_id + "'");
    StudyRecord next = *record;
    next.invite_code = random_id(6);
    try {
      save_study_record(next, record->version);
      return next.invite_code;
    } catch (const VersionConflict&) {
    }
  }
}

std::vector<json> StudyService::list_responses(const std::string& study_id) const {
  if (!load_study_record(study_id)) throw UnknownStudy("no study '" + study_id + "'");
  std::vector<json> out;
  for (const auto& key : store_.list(Collection::responses, study_id + "/")) {
    if (auto doc = store_.get({Collection::responses, key})) out.push_back(json::parse(doc->value));
  }
  std::stable_sort(out.begin(), out.end(), [](const json& a, const json& b) {
    return std::make_pair(a.value("submitted_ms", TimestampMs{0}), a.value("response_id", "")) <
           std::make_pair(b.value("submitted_ms", TimestampMs{0}), b.value("response_id", ""));
  });
  return out;
}

ExportBundle StudyService::export_bundle(const std::string& study_id) const {
  if (!load_study_record(study_id)) throw UnknownStudy("no study '" + study_id + "'");
  return export_study(store_, study_id);
}

// -- session runtime ----------------------------------------------------------

StudyService::SessionSlot& StudyService::slot(const std::string& session_id) {
  std::lock_guard lock(sessions_mutex_);
  auto& entry = sessions_[session_id];
  if (!entry) entry = std::make_unique<SessionSlot>();
  return *entry;
}

namespace {

std::unique_ptr<SessionRuntime> load_runtime(const Store& store, InteractionLog& log, const std::string& study_id,
                                             const std::string& session_id) {
  auto doc = store.get({Collection::sessions, session_key(study_id, session_id)});
  if (!doc) throw UnknownSession("no session '" + session_id + "'");
  const json body = json::parse(doc->value);
  auto rt = std::make_unique<SessionRuntime>();
  rt->config = study_from_json(body.at("config"));
  rt->flow = session_from_json(body.at("session"));
  rt->triggers = make_trigger_state(rt->config.trigger_rules);
  log.load_study(study_id);
  for (const auto& event : log.session_timeline(session_id)) apply_event(*rt, event);
  return rt;
}

}  // namespace

std::pair<std::unique_lock<std::mutex>, SessionRuntime*> StudyService::open_session(const Principal& who) {
  if (who.kind != PrincipalKind::participant) throw Forbidden("participant principal required");
  SessionSlot& s = slot(who.session_id);
  std::unique_lock lock(s.mutex);
  if (!s.runtime) {
    s.runtime = load_runtime(store_, log_, who.study_id, who.session_id);
    s.study_id = who.study_id;
  }
  tick(*s.runtime);
  return {std::move(lock), s.runtime.get()};
}

InteractionEvent StudyService::append(SessionRuntime& rt, EventKind kind, json payload, TimestampMs client_ts,
                                      std::vector<FiredTrigger>* fired) {
  InteractionEvent event = log_.append_event(rt.flow.session_id, kind, std::move(payload), client_ts);
  auto created = apply_event(rt, event);
  log_fired(rt, created);
  if (fired != nullptr) fired->insert(fired->end(), created.begin(), created.end());
  return event;
}

std::vector<FiredTrigger> StudyService::tick(SessionRuntime& rt) {
  if (!log_.is_open(rt.flow.session_id)) return {};
  auto result = observe(std::move(rt.triggers), ClockTick{clock_.now_ms()});
  rt.triggers = std::move(result.state);
  log_fired(rt, result.fired);
  return result.fired;
}

void StudyService::log_fired(SessionRuntime& rt, const std::vector<FiredTrigger>& fired) {
  for (const auto& f : fired) {
    json payload = {{"instance_id", f.instance_id}, {"rule_id", f.rule_id}, {"survey_id", f.survey_id},
                    {"cause", f.cause},             {"fired_at", f.fired_at}};
    if (f.task_id) payload["task_id"] = *f.task_id;
    append(rt, EventKind::popup_fired, std::move(payload), clock_.now_ms());
  }
}

json StudyService::popups_json(const SessionRuntime& rt, const std::vector<FiredTrigger>& fired) const {
  json out = json::array();
  for (const auto& f : fired) out.push_back(popup_descriptor(rt.config, f));
  return out;
}

const TaskDef& StudyService::current_task(const SessionRuntime& rt, Modality modality) const {
  const FlowStep* step = rt.flow.current_step();
  if (step == nullptr) throw SessionClosed("the session is complete");
  if (step->kind != StepKind::main_task || !step->task_id) {
    throw WrongStep("current step is " + std::string(to_string(step->kind)) + ", not a main task");
  }
  const TaskDef* task = rt.config.find_task(*step->task_id);
  if (task == nullptr) throw InvalidConfig("main task references unknown task '" + *step->task_id + "'");
  if (task->modality != modality) {
    throw WrongStep("current task is a " + std::string(to_string(task->modality)) + " task");
  }
  return *task;
}

/// Logs what entering the step at the cursor implies.
void StudyService::after_step_completed(SessionRuntime& rt) {
  const FlowStep* step = rt.flow.current_step();
  if (step == nullptr) {
    append(rt, EventKind::session_completed, json::object(), clock_.now_ms());
  } else if (step->kind == StepKind::main_task && step->task_id) {
    append(rt, EventKind::task_started, json{{"task_id", *step->task_id}}, clock_.now_ms());
  }
}

std::string StudyService::store_response(const SessionRuntime& rt, const json& body) {
  const std::string response_id = "r-" + random_id(8);
  json doc = body;
  doc["response_id"] = response_id;
  doc["session_id"] = rt.flow.session_id;
  doc["participant_id"] = rt.flow.participant_id;
  doc["submitted_ms"] = clock_.now_ms();
  store_.put({Collection::responses, rt.flow.study_id + "/" + response_id}, doc.dump(), 0);
  return response_id;
}

json StudyService::state_locked(const SessionRuntime& rt) const {
  const ParticipantSession& flow = rt.flow;
  json steps = json::array();
  for (std::size_t i = 0; i < flow.steps.size(); ++i) {
    json s = {{"index", i}, {"kind", to_string(flow.steps[i].kind)}, {"status", to_string(flow.step_states[i].status)}};
    if (flow.steps[i].reminder_text) s["reminder_text"] = *flow.steps[i].reminder_text;
    steps.push_back(std::move(s));
  }
  json out = {{"session_id", flow.session_id},
              {"participant_id", flow.participant_id},
              {"study_id", flow.study_id},
              {"study_title", rt.config.title},
              {"cursor", flow.cursor},
              {"total_steps", flow.steps.size()},
              {"completed", flow.finished()},
              {"started_at", flow.started_at},
              {"completed_at", flow.completed_at ? json(*flow.completed_at) : json(nullptr)},
              {"steps", steps},
              {"notes_enabled", rt.config.settings.notes_enabled},
              {"min_interactions", rt.config.settings.min_interactions},
              {"counts",
               {{"prompts", flow.interaction_counts.prompts},
                {"responses", flow.interaction_counts.responses},
                {"queries", flow.interaction_counts.queries}}},
              {"popups", popups_json(rt, pending_instances(rt.triggers))},
              {"now_ms", clock_.now_ms()}};
  if (const FlowStep* step = flow.current_step()) {
    json current = {{"index", flow.cursor}, {"kind", to_string(step->kind)}};
    current["reminder_text"] = step->reminder_text ? json(*step->reminder_text) : json(nullptr);
    if (step->kind == StepKind::consent) {
      current["consent"] = {{"text", rt.config.consent_text}, {"checkboxes", rt.config.consent_checkboxes}};
    } else if (step->kind == StepKind::main_task) {
      if (const TaskDef* task = step->task_id ? rt.config.find_task(*step->task_id) : nullptr) {
        current["task"] = task_json(*task);
        auto it = flow.task_counts.find(task->task_id);
        const TaskCounts c = it == flow.task_counts.end() ? TaskCounts{} : it->second;
        current["task_counts"] = {{"prompts", c.prompts}, {"responses", c.responses}, {"queries", c.queries}};
      }
    } else if (auto instrument = effective_instrument(rt.config, flow, flow.cursor)) {
      current["survey"] = survey_to_json(*instrument);
      if (auto task = associated_task(flow, flow.cursor)) current["task_id"] = *task;
    }
    out["step"] = current;
  } else {
    out["step"] = nullptr;
  }
  return out;
}

// -- participants -------------------------------------------------------------

StudyService::Registration StudyService::register_participant(const std::string& study_id,
                                                               const std::string& invite_code,
                                                               const std::string& external_label,
                                                               TimestampMs client_ts) {
  auto record = load_study_record(study_id);
  if (!record) throw UnknownStudy("no study '" + study_id + "'");
  if (record->invite_code.empty() || !constant_time_equal(record->invite_code, invite_code)) {
    throw Unauthorized("invalid invite code");
  }
  require_valid(record->config);

  std::unique_lock registration_lock(studies_mutex_);
  std::vector<ParticipantSession> existing;
  if (!external_label.empty()) {
    for (const auto& key : store_.list(Collection::sessions, study_id + "/participant.")) {
      if (auto doc = store_.get({Collection::sessions, key})) {
        const auto reg = registration_from_json(json::parse(doc->value));
        if (reg.external_label == external_label) {
          ParticipantSession prior;
          prior.participant_id = "label:" + external_label;
          prior.study_id = study_id;
          existing.push_back(prior);
        }
      }
    }
  }

  Registration out;
  out.participant_id = "p-" + random_id(8);
  out.session_id = "s-" + random_id(8);
  out.access_key = random_id(16);
  const TimestampMs now = clock_.now_ms();
  // Labelled re-registrations collide with the earlier session.
  const std::string identity = external_label.empty() ? out.participant_id : "label:" + external_label;
  ParticipantSession session = init_session(record->config, identity, out.session_id, now, existing);
  session.participant_id = out.participant_id;

  store_.put({Collection::sessions, session_key(study_id, out.session_id)},
             json{{"participant_id", out.participant_id},
                  {"config", study_to_json(record->config)},
                  {"session", session_to_json(session)}}
                 .dump(),
             0);

  SessionSlot& s = slot(out.session_id);
  {
    std::lock_guard lock(s.mutex);
    auto rt = std::make_unique<SessionRuntime>();
    rt->config = record->config;
    rt->flow = session;
    rt->triggers = make_trigger_state(rt->config.trigger_rules);
    apply_event(*rt, log_.begin_session(study_id, out.session_id, out.participant_id, client_ts));
    after_step_completed(*rt);
    s.study_id = study_id;
    s.runtime = std::move(rt);
  }

  json reg = registration_to_json({out.participant_id, out.session_id, study_id, external_label, now});
  reg["access_key_hash"] = fast_hash(out.access_key);
  store_.put({Collection::sessions, registration_key(study_id, out.participant_id)}, reg.dump(), 0);
  registration_lock.unlock();

  out.token = issue_token({PrincipalKind::participant, out.participant_id, study_id, out.session_id});
  return out;
}

StudyService::Registration StudyService::participant_login(const std::string& study_id,
                                                            const std::string& participant_id,
                                                            const std::string& access_key) {
  std::optional<Document> doc;
  try {
    check_segment(study_id, "study_id");
    check_segment(participant_id, "participant_id");
    doc = store_.get({Collection::sessions, registration_key(study_id, participant_id)});
  } catch (const BadRequest&) {
  }
  if (!doc) throw Unauthorized("unknown participant or wrong access key");
  const json body = json::parse(doc->value);
  if (!constant_time_equal(body.value("access_key_hash", ""), fast_hash(access_key))) {
    throw Unauthorized("unknown participant or wrong access key");
  }
  Registration out;
  out.participant_id = participant_id;
  out.session_id = body.at("session_id").get<std::string>();
  out.token = issue_token({PrincipalKind::participant, participant_id, study_id, out.session_id});
  return out;
}

json StudyService::state(const Principal& who) {
  auto [lock, rt] = open_session(who);
  return state_locked(*rt);
}

namespace {

const FlowStep& require_step(const SessionRuntime& rt) {
  const FlowStep* step = rt.flow.current_step();
  if (step == nullptr) throw SessionClosed("the session is complete");
  return *step;
}

}  // namespace

json StudyService::submit_consent(const Principal& who, const std::vector<bool>& checked, TimestampMs client_ts) {
  auto [lock, rt] = open_session(who);
  const FlowStep& step = require_step(*rt);
  if (step.kind != StepKind::consent) throw WrongStep("current step is " + std::string(to_string(step.kind)));
  const std::size_t index = rt->flow.cursor;
  try {
    advance(rt->flow, {StepKind::consent, ConsentAck{checked}}, rt->config, {clock_.now_ms(), {}});
  } catch (const GateError& gate) {
    append(*rt, EventKind::gate_refused,
           {{"step_index", index}, {"kind", "consent"}, {"reason", to_string(gate.reason())}, {"message", gate.what()}},
           client_ts);
    throw;
  }
  append(*rt, EventKind::consent_submitted, {{"step_index", index}, {"checked", checked}}, client_ts);
  append(*rt, EventKind::step_completed, {{"step_index", index}, {"kind", "consent"}}, client_ts);
  after_step_completed(*rt);
  return state_locked(*rt);
}

json StudyService::submit_survey(const Principal& who, const std::map<std::string, AnswerValue>& answers,
                                 TimestampMs client_ts) {
  auto [lock, rt] = open_session(who);
  const FlowStep& step = require_step(*rt);
  if (step.kind == StepKind::consent || step.kind == StepKind::main_task) {
    throw WrongStep("current step is " + std::string(to_string(step.kind)) + ", not a survey");
  }
  const std::size_t index = rt->flow.cursor;
  const auto instrument = effective_instrument(rt->config, rt->flow, index);
  if (!instrument) throw InvalidConfig("survey step has no instrument");
  for (const auto& [id, value] : answers) {
    const bool known = std::any_of(instrument->questions.begin(), instrument->questions.end(),
                                   [&](const Question& q) { return q.question_id == id; });
    if (!known) throw BadRequest("answer for unknown question '" + id + "'");
  }
  const auto task = associated_task(rt->flow, index);
  const std::string kind(to_string(step.kind));
  const SurveyAnswers submitted{answers};

  for (const auto& q : instrument->questions) {
    if (!q.attention_check) continue;
    auto it = answers.find(q.question_id);
    const bool passed = it != answers.end() && attention_check_passes(*q.attention_check, it->second);
    append(*rt, EventKind::attention_check,
           {{"step_index", index},
            {"question_id", q.question_id},
            {"expected", answer_to_json(q.attention_check->expected_answer)},
            {"given", it == answers.end() ? json(nullptr) : answer_to_json(it->second)},
            {"passed", passed}},
           client_ts);
  }

  AdvanceResult result;
  try {
    result = advance(rt->flow, {step.kind, submitted}, rt->config, {clock_.now_ms(), {}});
  } catch (const GateError& gate) {
    append(*rt, EventKind::gate_refused,
           {{"step_index", index}, {"kind", kind}, {"reason", to_string(gate.reason())}, {"message", gate.what()}},
           client_ts);
    throw;
  }

  json body = {{"kind", "step"},         {"step_index", index},          {"survey_kind", kind},
               {"survey_id", instrument->survey_id}, {"answers", answers_json(answers)}};
  if (task) body["task_id"] = *task;
  const std::string response_id = store_response(*rt, body);

  json submitted_payload = {{"step_index", index},
                            {"survey_kind", kind},
                            {"survey_id", instrument->survey_id},
                            {"response_id", response_id},
                            {"questions", questions_json(*instrument)},
                            {"answers", answers_json(answers)}};
  if (task) submitted_payload["task_id"] = *task;
  append(*rt, EventKind::survey_submitted, std::move(submitted_payload), client_ts);

  json completed = {{"step_index", index}, {"kind", kind}};
  if (task) {
    completed["task_id"] = *task;
    if (step.kind == StepKind::pre_task) {
      auto it = result.session.selected_intentions.find(*task);
      if (it != result.session.selected_intentions.end()) completed["selected_intentions"] = it->second;
    }
  }
  append(*rt, EventKind::step_completed, std::move(completed), client_ts);
  after_step_completed(*rt);
  json out = state_locked(*rt);
  out["response_id"] = response_id;
  return out;
}

json StudyService::submit_task(const Principal& who, const std::optional<std::string>& final_note,
                               TimestampMs client_ts) {
  auto [lock, rt] = open_session(who);
  const FlowStep& step = require_step(*rt);
  if (step.kind != StepKind::main_task || !step.task_id) {
    throw WrongStep("current step is " + std::string(to_string(step.kind)) + ", not a main task");
  }
  if (final_note && !rt->config.settings.notes_enabled) throw Forbidden("notes are disabled for this study");
  const std::size_t index = rt->flow.cursor;
  const std::string task_id = *step.task_id;

  AdvanceContext context;
  context.now_ms = clock_.now_ms();
  context.pending_popups = [&, runtime = rt]() {
    std::set<std::string> before;
    for (const auto& f : runtime->triggers.instances) before.insert(f.instance_id);
    auto result = pending_before_submission(std::move(runtime->triggers), task_id, clock_.now_ms());
    runtime->triggers = std::move(result.state);
    std::vector<FiredTrigger> created;
    for (const auto& f : runtime->triggers.instances) {
      if (!before.contains(f.instance_id)) created.push_back(f);
    }
    log_fired(*runtime, created);
    return result.fired.size();
  };
  try {
    advance(rt->flow, {StepKind::main_task, TaskSubmit{final_note}}, rt->config, context);
  } catch (const GateError& gate) {
    append(*rt, EventKind::gate_refused,
           {{"step_index", index},
            {"kind", "main_task"},
            {"task_id", task_id},
            {"reason", to_string(gate.reason())},
            {"message", gate.what()}},
           client_ts);
    throw;
  }
  if (final_note) append(*rt, EventKind::note, {{"task_id", task_id}, {"text", *final_note}}, client_ts);
  json submitted = {{"task_id", task_id}};
  if (final_note) submitted["final_note"] = *final_note;
  append(*rt, EventKind::task_submitted, std::move(submitted), client_ts);
  append(*rt, EventKind::step_completed, {{"step_index", index}, {"kind", "main_task"}, {"task_id", task_id}},
         client_ts);
  after_step_completed(*rt);
  return state_locked(*rt);
}

// -- chat -----------------------------------------------------------------------

std::unique_ptr<ChatExchange> StudyService::begin_chat(const Principal& who, const ChatRequest& request) {
  auto [lock, rt] = open_session(who);
  const TaskDef& task = current_task(*rt, Modality::chat);
  if (trim(request.prompt).empty()) throw BadRequest("prompt is empty");

  std::unique_ptr<ChatExchange> exchange(new ChatExchange());
  exchange->service_ = this;
  exchange->runtime_ = rt;
  for (const auto& turn : fold_chat_turns(log_.session_timeline(rt->flow.session_id))) {
    if (turn.task_id != task.task_id || turn.status != TurnStatus::complete) continue;
    exchange->history_.push_back({"user", turn.prompt_text});
    exchange->history_.push_back({"assistant", turn.response_text});
  }
  exchange->history_.push_back({"user", request.prompt});
  exchange->turn_id_ = "turn-" + std::to_string(rt->flow.interaction_counts.prompts + 1);

  const InteractionEvent event = append(*rt, EventKind::prompt,
                                        {{"task_id", task.task_id},
                                         {"turn_id", exchange->turn_id_},
                                         {"text", request.prompt},
                                         {"typing_start_ms", request.typing_start_ms},
                                         {"typing_end_ms", request.typing_end_ms},
                                         {"submitted_ms", request.client_ts}},
                                        request.client_ts, &exchange->fired_on_prompt_);
  exchange->prompt_event_ = event_to_json(event);
  exchange->lock_ = std::move(lock);
  return exchange;
}

ChatExchange::~ChatExchange() {
  if (done_ || service_ == nullptr || runtime_ == nullptr) return;
  try {
    service_->append(*runtime_, EventKind::response_cancelled, {{"turn_id", turn_id_}},
                     service_->clock_.now_ms());
  } catch (...) {
    // Nothing sensible to report from a destructor.
  }
}

void ChatExchange::stream(const FrameSink& sink) {
  if (done_) throw PreconditionViolation("chat exchange already streamed");
  StudyService& svc = *service_;
  SessionRuntime& rt = *runtime_;
  const auto now = [&] { return svc.clock_.now_ms(); };
  std::string partial;
  std::size_t chunks = 0;
  try {
    auto config = svc.credentials_.provider_config(rt.config.provider_config_ref);
    if (!config) throw PreconditionViolation("provider configuration '" + rt.config.provider_config_ref + "' is not set");
    const ChatOutcome outcome =
        svc.gateway_.chat_complete(*config, history_, turn_id_, [&](const ResponseChunk& chunk) {
          if (chunk.is_final) return true;
          svc.append(rt, EventKind::response_chunk,
                     {{"turn_id", turn_id_}, {"chunk_index", chunk.chunk_index}, {"text", chunk.text}}, now());
          partial += chunk.text;
          ++chunks;
          return sink({{"turn_id", turn_id_}, {"chunk_index", chunk.chunk_index}, {"text", chunk.text}});
        });
    if (outcome.status == StreamStatus::cancelled) {
      svc.append(rt, EventKind::response_cancelled, {{"turn_id", turn_id_}}, now());
      done_ = true;
      return;
    }
    std::vector<FiredTrigger> fired = fired_on_prompt_;
    svc.append(rt, EventKind::response_complete, {{"turn_id", turn_id_}}, now(), &fired);
    done_ = true;
    sink({{"final", true},
          {"turn_id", turn_id_},
          {"chunk_index", chunks},
          {"chunk_count", chunks},
          {"response_text", partial},
          {"popups", svc.popups_json(rt, fired)}});
  } catch (const Error& e) {
    if (done_) return;
    try {
      svc.append(rt, EventKind::response_error,
                 {{"turn_id", turn_id_}, {"error", e.code()}, {"message", e.what()}}, now());
    } catch (...) {
    }
    done_ = true;
    sink({{"final", true},
          {"turn_id", turn_id_},
          {"error", {{"code", e.code()}, {"message", e.what()}}},
          {"partial_text", partial},
          {"chunk_count", chunks},
          {"popups", svc.popups_json(rt, fired_on_prompt_)}});
  }
}

// -- search ---------------------------------------------------------------------

json StudyService::search(const Principal& who, const SearchRequest& request) {
  auto [lock, rt] = open_session(who);
  const TaskDef& task = current_task(*rt, Modality::search);
  if (trim(request.query).empty()) throw BadRequest("query is empty");
  auto config = credentials_.provider_config(rt->config.provider_config_ref);
  if (!config) throw PreconditionViolation("provider configuration '" + rt->config.provider_config_ref + "' is not set");
  const ResultPage page = gateway_.search(*config, request.query);

  std::vector<SerpEntry> serp;
  for (const auto& r : page.results) serp.push_back({r.rank, r.title, r.url, r.snippet});
  const std::string query_id = "query-" + std::to_string(rt->flow.interaction_counts.queries + 1);
  std::vector<FiredTrigger> fired;
  const InteractionEvent event = append(*rt, EventKind::query,
                                        {{"task_id", task.task_id},
                                         {"query_id", query_id},
                                         {"text", request.query},
                                         {"typing_start_ms", request.typing_start_ms},
                                         {"typing_end_ms", request.typing_end_ms},
                                         {"issued_ms", request.client_ts},
                                         {"result_count", serp.size()},
                                         {"serp", serp_to_json(serp)}},
                                        request.client_ts, &fired);
  return {{"query_id", query_id},
          {"event_id", event.event_id},
          {"query_text", request.query},
          {"results", serp_to_json(serp)},
          {"empty_results", page.empty_results()},
          {"popups", popups_json(*rt, fired)}};
}

json StudyService::click(const Principal& who, const std::string& query_id, std::int64_t rank, const std::string& url,
                         TimestampMs clicked_ms, TimestampMs client_ts) {
  auto [lock, rt] = open_session(who);
  current_task(*rt, Modality::search);
  try {
    const auto event = append(*rt, EventKind::click,
                              {{"query_id", query_id}, {"rank", rank}, {"url", url}, {"clicked_ms", clicked_ms}},
                              client_ts);
    return {{"event_id", event.event_id}, {"accepted", true}};
  } catch (const PayloadInvalid& invalid) {
    append(*rt, EventKind::click_rejected,
           {{"query_id", query_id}, {"rank", rank}, {"url", url}, {"reason", invalid.what()}}, client_ts);
    throw;
  }
}

// -- ratings, notes, popups -------------------------------------------------------

namespace {

void check_rating(std::int64_t rating) {
  if (rating < 1 || rating > 5) throw BadRequest("rating must be within 1..5");
}

}  // namespace

json StudyService::rate_turn(const Principal& who, const std::string& turn_id, std::int64_t rating,
                             TimestampMs client_ts) {
  check_rating(rating);
  auto [lock, rt] = open_session(who);
  const ChatTurn turn = log_.rate_turn(rt->flow.session_id, turn_id, rating, client_ts);
  return {{"turn_id", turn.turn_id}, {"turn_rating", rating}, {"task_id", turn.task_id}};
}

json StudyService::rate_trajectory(const Principal& who, const std::optional<std::string>& task_id,
                                   std::int64_t rating, TimestampMs client_ts) {
  check_rating(rating);
  auto [lock, rt] = open_session(who);
  std::string task;
  if (task_id) {
    task = *task_id;
  } else if (const FlowStep* step = rt->flow.current_step(); step && step->kind == StepKind::main_task && step->task_id) {
    task = *step->task_id;
  } else if (auto associated = rt->flow.finished() ? std::nullopt : associated_task(rt->flow, rt->flow.cursor)) {
    task = *associated;
  } else {
    throw UnknownTask("no task to rate; pass task_id");
  }
  append(*rt, EventKind::trajectory_rating, {{"task_id", task}, {"rating", rating}}, client_ts);
  return {{"task_id", task}, {"trajectory_rating", rating}};
}

json StudyService::save_note(const Principal& who, const std::string& text, TimestampMs client_ts) {
  auto [lock, rt] = open_session(who);
  if (!rt->config.settings.notes_enabled) throw Forbidden("notes are disabled for this study");
  const FlowStep& step = require_step(*rt);
  if (step.kind != StepKind::main_task || !step.task_id) throw WrongStep("notes belong to a main task");
  const auto event = append(*rt, EventKind::note, {{"task_id", *step.task_id}, {"text", text}}, client_ts);
  return {{"event", event_to_json(event)}};
}

json StudyService::answer_popup(const Principal& who, const std::string& instance_id,
                                const std::map<std::string, AnswerValue>& answers, TimestampMs client_ts) {
  auto [lock, rt] = open_session(who);
  const FiredTrigger* fired = find_instance(rt->triggers, instance_id);
  if (fired == nullptr) throw UnknownInstance("unknown popup instance '" + instance_id + "'");
  if (fired->state == FiredState::answered) throw AlreadyAnswered("popup '" + instance_id + "' already answered");
  const SurveyInstrument* survey = rt->config.find_survey(fired->survey_id);
  if (survey == nullptr) throw InvalidConfig("popup survey '" + fired->survey_id + "' is missing");
  for (const auto& [id, value] : answers) {
    auto q = std::find_if(survey->questions.begin(), survey->questions.end(),
                          [&](const Question& question) { return question.question_id == id; });
    if (q == survey->questions.end()) throw BadRequest("answer for unknown question '" + id + "'");
    if (!answer_fits(q->answer_type, value)) throw GateError(GateReason::missing_required, "answer to '" + id + "' does not fit its type");
  }
  for (const auto& q : survey->questions) {
    if (q.required && !answers.contains(q.question_id)) {
      throw GateError(GateReason::missing_required, "required question '" + q.question_id + "' unanswered");
    }
  }
  const FiredTrigger instance = *fired;
  json body = {{"kind", "popup"},
               {"instance_id", instance.instance_id},
               {"rule_id", instance.rule_id},
               {"survey_id", instance.survey_id},
               {"answers", answers_json(answers)}};
  if (instance.task_id) body["task_id"] = *instance.task_id;
  const std::string response_id = store_response(*rt, body);
  append(*rt, EventKind::popup_answered,
         {{"instance_id", instance.instance_id},
          {"rule_id", instance.rule_id},
          {"survey_id", instance.survey_id},
          {"response_id", response_id},
          {"questions", questions_json(*survey)},
          {"answers", answers_json(answers)}},
         client_ts);
  return {{"response_id", response_id}, {"popups", popups_json(*rt, pending_instances(rt->triggers))}};
}

json StudyService::pending_popups(const Principal& who) {
  auto [lock, rt] = open_session(who);
  return {{"popups", popups_json(*rt, pending_instances(rt->triggers))}};
}

void StudyService::tick_all() {
  std::vector<SessionSlot*> slots;
  {
    std::lock_guard lock(sessions_mutex_);
    for (auto& [id, s] : sessions_) slots.push_back(s.get());
  }
  for (SessionSlot* s : slots) {
    std::lock_guard lock(s->mutex);
    if (s->runtime) tick(*s->runtime);
  }
}

// -- admin views ----------------------------------------------------------------

std::vector<json> StudyService::list_sessions(const std::string& study_id) {
  if (!load_study_record(study_id)) throw UnknownStudy("no study '" + study_id + "'");
  log_.load_study(study_id);
  std::vector<json> out;
  for (const auto& session_id : log_.sessions_of(study_id)) {
    SessionSlot& s = slot(session_id);
    std::lock_guard lock(s.mutex);
    if (!s.runtime) {
      try {
        s.runtime = load_runtime(store_, log_, study_id, session_id);
        s.study_id = study_id;
      } catch (const UnknownSession&) {
        continue;
      }
    }
    const ParticipantSession& flow = s.runtime->flow;
    out.push_back({{"session_id", flow.session_id},
                   {"participant_id", flow.participant_id},
                   {"cursor", flow.cursor},
                   {"total_steps", flow.steps.size()},
                   {"started_at", flow.started_at},
                   {"completed_at", flow.completed_at ? json(*flow.completed_at) : json(nullptr)},
                   {"pending_popups", pending_instances(s.runtime->triggers).size()}});
  }
  return out;
}

std::vector<InteractionEvent> StudyService::timeline(const std::string& study_id, const std::string& session_id) {
  if (!load_study_record(study_id)) throw UnknownStudy("no study '" + study_id + "'");
  log_.load_study(study_id);
  const auto sessions = log_.sessions_of(study_id);
  if (std::find(sessions.begin(), sessions.end(), session_id) == sessions.end()) {
    throw UnknownSession("no session '" + session_id + "' in study '" + study_id + "'");
  }
  return log_.session_timeline(session_id);
}

}  // namespace studyflow
