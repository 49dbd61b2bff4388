#include "studyflow/interaction_log.hpp"

#include <algorithm>

#include "studyflow/error.hpp"

namespace studyflow {

using nlohmann::json;

namespace {

std::string stream_key(const std::string& study_id) { return study_id + "/events"; }

const json& field(const json& payload, const char* key) {
  auto it = payload.find(key);
  if (it == payload.end()) throw PayloadInvalid(std::string("missing field '") + key + "'");
  return *it;
}

std::string string_field(const json& payload, const char* key) {
  const json& v = field(payload, key);
  if (!v.is_string()) throw PayloadInvalid(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

std::string nonempty_string_field(const json& payload, const char* key) {
  std::string v = string_field(payload, key);
  if (v.empty()) throw PayloadInvalid(std::string("field '") + key + "' must not be empty");
  return v;
}

std::int64_t int_field(const json& payload, const char* key) {
  const json& v = field(payload, key);
  if (!v.is_number_integer()) throw PayloadInvalid(std::string("field '") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

void optional_int_field(const json& payload, const char* key) {
  auto it = payload.find(key);
  if (it != payload.end() && !it->is_number_integer()) {
    throw PayloadInvalid(std::string("field '") + key + "' must be an integer");
  }
}

}  // namespace

struct InteractionLog::SessionLog {
  struct TurnState {
    std::string task_id;
    std::uint64_t next_chunk = 0;
    bool finished = false;
    bool complete = false;
  };
  struct QueryState {
    std::string task_id;
    std::vector<SerpEntry> serp;
  };

  std::string study_id;
  std::string session_id;
  std::vector<InteractionEvent> events;
  bool closed = false;
  std::map<std::string, TurnState> turns;
  std::map<std::string, std::int64_t> turns_per_task;
  std::map<std::string, QueryState> queries;
  std::set<std::string> started_tasks;
  std::map<std::string, InteractionCounts> counts;

  /// Checks `payload` against the session state and normalizes derived
  /// fields. Does not mutate the session.
  void validate(EventKind kind, json& payload) const {
    if (!payload.is_object()) throw PayloadInvalid("payload must be an object");
    switch (kind) {
      case EventKind::session_started:
        throw PayloadInvalid("session_started is written by begin_session only");
      case EventKind::task_started:
        nonempty_string_field(payload, "task_id");
        break;
      case EventKind::prompt: {
        const auto task_id = nonempty_string_field(payload, "task_id");
        if (!started_tasks.contains(task_id)) throw UnknownTask("task '" + task_id + "' not started");
        const auto turn_id = nonempty_string_field(payload, "turn_id");
        if (turns.contains(turn_id)) throw PayloadInvalid("duplicate turn id '" + turn_id + "'");
        const auto it = turns_per_task.find(task_id);
        const std::int64_t expected = (it == turns_per_task.end() ? 0 : it->second) + 1;
        if (!payload.contains("turn_index")) payload["turn_index"] = expected;
        if (int_field(payload, "turn_index") != expected) throw PayloadInvalid("turn index is not dense");
        string_field(payload, "text");
        int_field(payload, "typing_start_ms");
        int_field(payload, "typing_end_ms");
        int_field(payload, "submitted_ms");
        break;
      }
      case EventKind::response_chunk:
      case EventKind::response_complete:
      case EventKind::response_error:
      case EventKind::response_cancelled: {
        const auto turn_id = nonempty_string_field(payload, "turn_id");
        auto it = turns.find(turn_id);
        if (it == turns.end()) throw OutOfOrderTurn("turn '" + turn_id + "' was never opened");
        if (it->second.finished) throw OutOfOrderTurn("turn '" + turn_id + "' already finished");
        if (kind == EventKind::response_chunk) {
          if (int_field(payload, "chunk_index") != static_cast<std::int64_t>(it->second.next_chunk)) {
            throw OutOfOrderTurn("chunk index out of order for turn '" + turn_id + "'");
          }
          string_field(payload, "text");
        }
        payload["task_id"] = it->second.task_id;
        break;
      }
      case EventKind::turn_rating: {
        const auto turn_id = nonempty_string_field(payload, "turn_id");
        auto it = turns.find(turn_id);
        if (it == turns.end()) throw UnknownTurn("unknown turn '" + turn_id + "'");
        if (!it->second.complete) throw ResponseNotComplete("turn '" + turn_id + "' has no completed response");
        int_field(payload, "rating");
        payload["task_id"] = it->second.task_id;
        break;
      }
      case EventKind::trajectory_rating: {
        const auto task_id = nonempty_string_field(payload, "task_id");
        if (!started_tasks.contains(task_id)) throw UnknownTask("task '" + task_id + "' not started");
        int_field(payload, "rating");
        break;
      }
      case EventKind::query: {
        const auto task_id = nonempty_string_field(payload, "task_id");
        if (!started_tasks.contains(task_id)) throw UnknownTask("task '" + task_id + "' not started");
        const auto query_id = nonempty_string_field(payload, "query_id");
        if (queries.contains(query_id)) throw PayloadInvalid("duplicate query id '" + query_id + "'");
        nonempty_string_field(payload, "text");
        int_field(payload, "typing_start_ms");
        int_field(payload, "typing_end_ms");
        int_field(payload, "issued_ms");
        const json& serp = field(payload, "serp");
        if (!serp.is_array()) throw PayloadInvalid("serp must be an array");
        std::int64_t rank = 0;
        for (const auto& entry : serp) {
          if (!entry.is_object()) throw PayloadInvalid("serp entries must be objects");
          if (int_field(entry, "rank") != ++rank) throw PayloadInvalid("serp ranks must be dense from 1");
          string_field(entry, "url");
        }
        if (!payload.contains("result_count")) payload["result_count"] = serp.size();
        if (int_field(payload, "result_count") != static_cast<std::int64_t>(serp.size())) {
          throw PayloadInvalid("result_count does not match the serp size");
        }
        break;
      }
      case EventKind::click: {
        const auto query_id = nonempty_string_field(payload, "query_id");
        auto it = queries.find(query_id);
        if (it == queries.end()) throw PayloadInvalid("unknown query '" + query_id + "'");
        const std::int64_t rank = int_field(payload, "rank");
        const auto url = string_field(payload, "url");
        const auto& serp = it->second.serp;
        if (rank < 1 || rank > static_cast<std::int64_t>(serp.size()) ||
            serp[static_cast<std::size_t>(rank - 1)].url != url) {
          throw PayloadInvalid("click (" + std::to_string(rank) + ", " + url +
                               ") is not in the stored result page");
        }
        optional_int_field(payload, "clicked_ms");
        payload["task_id"] = it->second.task_id;
        break;
      }
      case EventKind::note:
        nonempty_string_field(payload, "task_id");
        string_field(payload, "text");
        break;
      default:
        break;
    }
  }

  void apply(const InteractionEvent& event) {
    const json& p = event.payload;
    switch (event.kind) {
      case EventKind::task_started:
        started_tasks.insert(p.at("task_id").get<std::string>());
        break;
      case EventKind::prompt: {
        const auto task_id = p.at("task_id").get<std::string>();
        turns[p.at("turn_id").get<std::string>()] = TurnState{task_id};
        ++turns_per_task[task_id];
        ++counts[task_id].prompts;
        break;
      }
      case EventKind::response_chunk:
        ++turns[p.at("turn_id").get<std::string>()].next_chunk;
        break;
      case EventKind::response_complete: {
        auto& turn = turns[p.at("turn_id").get<std::string>()];
        turn.finished = true;
        turn.complete = true;
        ++counts[turn.task_id].responses;
        break;
      }
      case EventKind::response_error:
      case EventKind::response_cancelled:
        turns[p.at("turn_id").get<std::string>()].finished = true;
        break;
      case EventKind::query: {
        const auto task_id = p.at("task_id").get<std::string>();
        queries[p.at("query_id").get<std::string>()] = QueryState{task_id, serp_from_json(p.at("serp"))};
        ++counts[task_id].queries;
        break;
      }
      case EventKind::session_completed:
        closed = true;
        break;
      default:
        break;
    }
    events.push_back(event);
  }
};

struct InteractionLog::StudyLog {
  std::string study_id;
  std::mutex mutex;
  std::map<std::string, SessionLog> sessions;
  bool loaded = false;
};

InteractionLog::InteractionLog(Store& store, const Clock& clock) : store_(store), clock_(clock) {}

InteractionLog::~InteractionLog() = default;

InteractionLog::StudyLog& InteractionLog::study(const std::string& study_id) {
  std::lock_guard lock(registry_mutex_);
  auto& slot = studies_[study_id];
  if (!slot) {
    slot = std::make_unique<StudyLog>();
    slot->study_id = study_id;
  }
  return *slot;
}

InteractionLog::StudyLog* InteractionLog::study_of_session(const std::string& session_id) const {
  std::lock_guard lock(registry_mutex_);
  auto it = session_index_.find(session_id);
  return it == session_index_.end() ? nullptr : it->second;
}

void InteractionLog::load_study(const std::string& study_id) {
  StudyLog& log = study(study_id);
  std::lock_guard lock(log.mutex);
  if (log.loaded) return;
  for (const auto& record : store_.scan(stream_key(study_id), 0)) {
    InteractionEvent event = event_from_json(json::parse(record));
    if (event.kind == EventKind::session_started) {
      SessionLog& session = log.sessions[event.session_id];
      session.study_id = study_id;
      session.session_id = event.session_id;
      std::lock_guard registry(registry_mutex_);
      session_index_[event.session_id] = &log;
    }
    auto it = log.sessions.find(event.session_id);
    if (it != log.sessions.end()) it->second.apply(event);
  }
  log.loaded = true;
}

InteractionEvent InteractionLog::append_locked(StudyLog& study, SessionLog& session, EventKind kind,
                                               json payload, TimestampMs client_ts) {
  if (session.closed) throw SessionClosed("session '" + session.session_id + "' is closed");
  session.validate(kind, payload);
  InteractionEvent event;
  event.session_id = session.session_id;
  event.seq = session.events.size() + 1;
  event.event_id = session.session_id + ":" + std::to_string(event.seq);
  event.kind = kind;
  event.payload = std::move(payload);
  event.client_ts = client_ts;
  event.server_ts = clock_.now_ms();
  if (!session.events.empty()) event.server_ts = std::max(event.server_ts, session.events.back().server_ts);
  store_.append(stream_key(study.study_id), event_to_json(event).dump());
  session.apply(event);
  return event;
}

InteractionEvent InteractionLog::begin_session(const std::string& study_id, const std::string& session_id,
                                               const std::string& participant_id, TimestampMs client_ts) {
  load_study(study_id);
  StudyLog& log = study(study_id);
  std::lock_guard lock(log.mutex);
  {
    std::lock_guard registry(registry_mutex_);
    if (session_index_.contains(session_id)) {
      throw PayloadInvalid("session '" + session_id + "' already exists");
    }
  }
  SessionLog fresh;
  fresh.study_id = study_id;
  fresh.session_id = session_id;
  InteractionEvent event;
  event.session_id = session_id;
  event.seq = 1;
  event.event_id = session_id + ":1";
  event.kind = EventKind::session_started;
  event.payload = json{{"participant_id", participant_id}, {"study_id", study_id}};
  event.client_ts = client_ts;
  event.server_ts = clock_.now_ms();
  store_.append(stream_key(study_id), event_to_json(event).dump());
  fresh.apply(event);
  log.sessions.emplace(session_id, std::move(fresh));
  std::lock_guard registry(registry_mutex_);
  session_index_[session_id] = &log;
  return event;
}

InteractionEvent InteractionLog::append_event(const std::string& session_id, EventKind kind, json payload,
                                              TimestampMs client_ts) {
  StudyLog* log = study_of_session(session_id);
  if (log == nullptr) throw UnknownSession("unknown session '" + session_id + "'");
  std::lock_guard lock(log->mutex);
  return append_locked(*log, log->sessions.at(session_id), kind, std::move(payload), client_ts);
}

ChatTurn InteractionLog::rate_turn(const std::string& session_id, const std::string& turn_id,
                                   std::int64_t rating, TimestampMs client_ts) {
  StudyLog* log = study_of_session(session_id);
  if (log == nullptr) throw UnknownSession("unknown session '" + session_id + "'");
  std::lock_guard lock(log->mutex);
  SessionLog& session = log->sessions.at(session_id);
  append_locked(*log, session, EventKind::turn_rating, json{{"turn_id", turn_id}, {"rating", rating}}, client_ts);
  for (auto& turn : fold_chat_turns(session.events)) {
    if (turn.turn_id == turn_id) return turn;
  }
  throw UnknownTurn("unknown turn '" + turn_id + "'");
}

std::int64_t InteractionLog::rate_trajectory(const std::string& session_id, const std::string& task_id,
                                             std::int64_t rating, TimestampMs client_ts) {
  append_event(session_id, EventKind::trajectory_rating, json{{"task_id", task_id}, {"rating", rating}},
               client_ts);
  return rating;
}

std::vector<InteractionEvent> InteractionLog::session_timeline(const std::string& session_id) const {
  StudyLog* log = study_of_session(session_id);
  if (log == nullptr) throw UnknownSession("unknown session '" + session_id + "'");
  std::lock_guard lock(log->mutex);
  return log->sessions.at(session_id).events;
}

bool InteractionLog::has_session(const std::string& session_id) const {
  return study_of_session(session_id) != nullptr;
}

bool InteractionLog::is_open(const std::string& session_id) const {
  StudyLog* log = study_of_session(session_id);
  if (log == nullptr) return false;
  std::lock_guard lock(log->mutex);
  return !log->sessions.at(session_id).closed;
}

std::vector<std::string> InteractionLog::sessions_of(const std::string& study_id) const {
  StudyLog* log = nullptr;
  {
    std::lock_guard registry(registry_mutex_);
    auto it = studies_.find(study_id);
    if (it == studies_.end()) return {};
    log = it->second.get();
  }
  std::lock_guard lock(log->mutex);
  std::vector<std::string> out;
  for (const auto& [id, session] : log->sessions) out.push_back(id);
  return out;
}

InteractionCounts InteractionLog::counts(const std::string& session_id, const std::string& task_id) const {
  StudyLog* log = study_of_session(session_id);
  if (log == nullptr) throw UnknownSession("unknown session '" + session_id + "'");
  std::lock_guard lock(log->mutex);
  const auto& counts = log->sessions.at(session_id).counts;
  auto it = counts.find(task_id);
  return it == counts.end() ? InteractionCounts{} : it->second;
}

InteractionCounts InteractionLog::total_counts(const std::string& session_id) const {
  StudyLog* log = study_of_session(session_id);
  if (log == nullptr) throw UnknownSession("unknown session '" + session_id + "'");
  std::lock_guard lock(log->mutex);
  InteractionCounts total;
  for (const auto& [task, c] : log->sessions.at(session_id).counts) {
    total.prompts += c.prompts;
    total.responses += c.responses;
    total.queries += c.queries;
  }
  return total;
}

std::optional<SearchQueryRecord> InteractionLog::find_query(const std::string& session_id,
                                                            const std::string& query_id) const {
  for (auto& query : fold_search_queries(session_timeline(session_id))) {
    if (query.query_id == query_id) return query;
  }
  return std::nullopt;
}

std::optional<ChatTurn> InteractionLog::find_turn(const std::string& session_id,
                                                  const std::string& turn_id) const {
  for (auto& turn : fold_chat_turns(session_timeline(session_id))) {
    if (turn.turn_id == turn_id) return turn;
  }
  return std::nullopt;
}

}  // namespace studyflow
