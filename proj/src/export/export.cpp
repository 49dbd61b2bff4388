#include "studyflow/export.hpp"

#include <zlib.h>

#include <algorithm>

#include "studyflow/domain_json.hpp"
#include "studyflow/error.hpp"
#include "studyflow/interaction_log.hpp"

namespace studyflow {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CSV

namespace {

void append_field(std::string& out, const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) {
    out += field;
    return;
  }
  out.push_back('"');
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
}

void append_record(std::string& out, const CsvRow& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i > 0) out.push_back(',');
    append_field(out, row[i]);
  }
  out += "\r\n";
}

}  // namespace

std::string csv_encode(const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::string out;
  append_record(out, header);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != header.size()) {
      throw WidthMismatch("row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                          " fields, header has " + std::to_string(header.size()));
    }
    append_record(out, rows[r]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ZIP (stored entries only)

namespace {

void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

constexpr std::uint16_t kDosTime = 0;                     // 00:00:00
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

}  // namespace

std::string zip_store(const std::map<std::string, std::string>& files) {
  std::string out;
  std::string central;
  for (const auto& [name, data] : files) {
    if (data.size() > 0xffffffffu || out.size() > 0xffffffffu) throw StorageFailure("archive too large");
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
    const auto offset = static_cast<std::uint32_t>(out.size());
    const auto size = static_cast<std::uint32_t>(data.size());

    put32(out, 0x04034b50);
    put16(out, 20);      // version needed
    put16(out, 0x0800);  // UTF-8 names
    put16(out, 0);       // stored
    put16(out, kDosTime);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, size);
    put32(out, size);
    put16(out, static_cast<std::uint16_t>(name.size()));
    put16(out, 0);
    out += name;
    out += data;

    put32(central, 0x02014b50);
    put16(central, 20);  // made by
    put16(central, 20);
    put16(central, 0x0800);
    put16(central, 0);
    put16(central, kDosTime);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, size);
    put32(central, size);
    put16(central, static_cast<std::uint16_t>(name.size()));
    put16(central, 0);  // extra
    put16(central, 0);  // comment
    put16(central, 0);  // disk
    put16(central, 0);  // internal attrs
    put32(central, 0);  // external attrs
    put32(central, offset);
    central += name;
  }
  const auto central_offset = static_cast<std::uint32_t>(out.size());
  out += central;
  put32(out, 0x06054b50);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(files.size()));
  put16(out, static_cast<std::uint16_t>(files.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, central_offset);
  put16(out, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Registration records

json registration_to_json(const RegistrationRecord& r) {
  return {{"participant_id", r.participant_id}, {"session_id", r.session_id},         {"study_id", r.study_id},
          {"external_label", r.external_label}, {"registered_ms", r.registered_ms}};
}

RegistrationRecord registration_from_json(const json& doc) {
  RegistrationRecord r;
  r.participant_id = doc.at("participant_id").get<std::string>();
  r.session_id = doc.at("session_id").get<std::string>();
  r.study_id = doc.value("study_id", "");
  r.external_label = doc.value("external_label", "");
  r.registered_ms = doc.value("registered_ms", TimestampMs{0});
  return r;
}

std::string registration_key(const std::string& study_id, const std::string& participant_id) {
  return study_id + "/participant." + participant_id;
}

std::string study_key(const std::string& study_id) { return study_id + "/config"; }
std::string events_stream(const std::string& study_id) { return study_id + "/events"; }

// ---------------------------------------------------------------------------
// Datasets

namespace {

std::string ms_cell(std::optional<TimestampMs> ms) { return ms ? std::to_string(*ms) : std::string(); }
std::string iso_cell(std::optional<TimestampMs> ms) { return ms ? to_iso8601(*ms) : std::string(); }

std::string answer_cell(const json& answers, const std::string& question_id) {
  if (!answers.is_object() || !answers.contains(question_id) || answers[question_id].is_null()) return "";
  return answer_to_cell(answer_from_json(answers[question_id]));
}

std::string text_of(const json& payload, const char* key) {
  if (!payload.contains(key) || payload[key].is_null()) return "";
  return payload[key].is_string() ? payload[key].get<std::string>() : payload[key].dump();
}

enum class SurveyFile { demographics, pre_task, post_task };

SurveyFile survey_file(const std::string& survey_kind) {
  if (survey_kind == to_string(StepKind::background_survey)) return SurveyFile::demographics;
  if (survey_kind == to_string(StepKind::pre_task)) return SurveyFile::pre_task;
  return SurveyFile::post_task;
}

const CsvRow kRegistrationHeader = {"participant_id", "session_id", "study_id",     "external_label",
                                    "registered_ms",  "registered_iso", "consent_ms", "consent_iso",
                                    "completed_ms",   "completed_iso"};

const CsvRow kSurveyHeader = {"participant_id", "session_id",      "survey_kind", "survey_id",
                              "task_id",        "step_index",      "question_id", "question_prompt",
                              "answer",         "submitted_ms",    "submitted_iso"};

const CsvRow kChatHeader = {"participant_id",  "session_id",        "task_id",
                            "turn_id",         "turn_index",        "prompt_text",
                            "typing_start_ms", "typing_end_ms",     "submitted_ms",
                            "response_text",   "response_completed_ms", "turn_rating",
                            "trajectory_rating", "typing_start_iso", "typing_end_iso",
                            "submitted_iso",   "response_completed_iso", "response_status",
                            "chunk_count"};

const CsvRow kSearchHeader = {"participant_id", "session_id",       "task_id",        "query_id",
                              "query_text",     "typing_start_ms",  "typing_end_ms",  "issued_ms",
                              "result_count",   "clicked_url",      "clicked_rank",   "clicked_ms",
                              "typing_start_iso", "typing_end_iso", "issued_iso",     "clicked_iso"};

const CsvRow kInSituHeader = {"participant_id", "session_id",  "instance_id",     "rule_id",  "survey_id",
                              "task_id",        "cause",       "fired_ms",        "fired_iso", "response_id",
                              "question_id",    "question_prompt", "answer",      "answered_ms", "answered_iso"};

const CsvRow kNotesHeader = {"participant_id", "session_id", "task_id", "note_text", "updated_ms", "updated_iso"};

}  // namespace

ExportBundle build_export(const ExportSnapshot& snapshot) {
  std::map<std::string, std::vector<InteractionEvent>> by_session;
  for (const auto& event : snapshot.events) by_session[event.session_id].push_back(event);
  for (auto& [id, events] : by_session) {
    std::sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.seq < b.seq; });
  }
  std::map<std::string, const RegistrationRecord*> registration_of;
  for (const auto& r : snapshot.registrations) registration_of[r.session_id] = &r;

  auto participant_of = [&](const std::string& session_id) -> std::string {
    if (auto it = registration_of.find(session_id); it != registration_of.end()) return it->second->participant_id;
    const auto& events = by_session[session_id];
    for (const auto& e : events) {
      if (e.kind == EventKind::session_started) return e.payload.value("participant_id", "");
    }
    return "";
  };

  std::vector<CsvRow> registration;
  std::vector<CsvRow> demographics;
  std::vector<CsvRow> pre_task;
  std::vector<CsvRow> post_task;
  std::vector<CsvRow> chat;
  std::vector<CsvRow> search;
  std::vector<CsvRow> in_situ;
  std::vector<CsvRow> notes;

  // Sessions known from either source, in id order.
  std::map<std::string, bool> session_ids;
  for (const auto& r : snapshot.registrations) session_ids[r.session_id] = true;
  for (const auto& [id, events] : by_session) session_ids[id] = true;

  for (const auto& [session_id, unused] : session_ids) {
    const std::vector<InteractionEvent>& events = by_session[session_id];
    const std::string participant = participant_of(session_id);

    std::optional<TimestampMs> consent_ms;
    std::optional<TimestampMs> completed_ms;
    std::map<std::string, const InteractionEvent*> fired;
    for (const auto& e : events) {
      if (e.kind == EventKind::consent_submitted && !consent_ms) consent_ms = e.server_ts;
      if (e.kind == EventKind::session_completed) completed_ms = e.server_ts;
      if (e.kind == EventKind::popup_fired) fired[e.payload.value("instance_id", "")] = &e;
    }
    {
      const RegistrationRecord* reg = registration_of.count(session_id) ? registration_of[session_id] : nullptr;
      std::optional<TimestampMs> registered;
      if (reg != nullptr) {
        registered = reg->registered_ms;
      } else if (!events.empty()) {
        registered = events.front().server_ts;
      }
      registration.push_back({participant, session_id, reg ? reg->study_id : snapshot.study_id,
                              reg ? reg->external_label : "", ms_cell(registered), iso_cell(registered),
                              ms_cell(consent_ms), iso_cell(consent_ms), ms_cell(completed_ms),
                              iso_cell(completed_ms)});
    }

    for (const auto& e : events) {
      const json& p = e.payload;
      if (e.kind == EventKind::survey_submitted) {
        const std::string kind = p.value("survey_kind", "");
        auto& rows = survey_file(kind) == SurveyFile::demographics ? demographics
                     : survey_file(kind) == SurveyFile::pre_task   ? pre_task
                                                                   : post_task;
        for (const auto& q : p.value("questions", json::array())) {
          const std::string qid = q.value("question_id", "");
          rows.push_back({participant, session_id, kind, text_of(p, "survey_id"), text_of(p, "task_id"),
                          text_of(p, "step_index"), qid, q.value("prompt", ""), answer_cell(p.value("answers", json()), qid),
                          std::to_string(e.server_ts), to_iso8601(e.server_ts)});
        }
      } else if (e.kind == EventKind::popup_answered) {
        const std::string instance = p.value("instance_id", "");
        const InteractionEvent* origin = fired.count(instance) ? fired[instance] : nullptr;
        std::optional<TimestampMs> fired_ms;
        std::string task_id;
        std::string cause;
        if (origin != nullptr) {
          fired_ms = origin->server_ts;
          task_id = text_of(origin->payload, "task_id");
          cause = text_of(origin->payload, "cause");
        }
        for (const auto& q : p.value("questions", json::array())) {
          const std::string qid = q.value("question_id", "");
          in_situ.push_back({participant, session_id, instance, text_of(p, "rule_id"), text_of(p, "survey_id"),
                             task_id, cause, ms_cell(fired_ms), iso_cell(fired_ms), text_of(p, "response_id"), qid,
                             q.value("prompt", ""), answer_cell(p.value("answers", json()), qid),
                             std::to_string(e.server_ts), to_iso8601(e.server_ts)});
        }
      }
    }

    const auto trajectory = fold_trajectory_ratings(events);
    for (const auto& turn : fold_chat_turns(events)) {
      std::string trajectory_cell;
      if (auto it = trajectory.find(turn.task_id); it != trajectory.end()) trajectory_cell = std::to_string(it->second);
      chat.push_back({participant,
                      session_id,
                      turn.task_id,
                      turn.turn_id,
                      std::to_string(turn.turn_index),
                      turn.prompt_text,
                      std::to_string(turn.typing_start_ms),
                      std::to_string(turn.typing_end_ms),
                      std::to_string(turn.submitted_ms),
                      turn.response_text,
                      ms_cell(turn.response_completed_ms),
                      turn.turn_rating ? std::to_string(*turn.turn_rating) : "",
                      trajectory_cell,
                      to_iso8601(turn.typing_start_ms),
                      to_iso8601(turn.typing_end_ms),
                      to_iso8601(turn.submitted_ms),
                      iso_cell(turn.response_completed_ms),
                      std::string(to_string(turn.status)),
                      std::to_string(turn.chunk_count)});
    }

    for (const auto& q : fold_search_queries(events)) {
      CsvRow base = {participant,
                     session_id,
                     q.task_id,
                     q.query_id,
                     q.query_text,
                     std::to_string(q.typing_start_ms),
                     std::to_string(q.typing_end_ms),
                     std::to_string(q.issued_ms),
                     std::to_string(q.result_count)};
      auto finish = [&](CsvRow row, const ClickRecord* click) {
        if (click != nullptr) {
          row.insert(row.end(), {click->url, std::to_string(click->rank), std::to_string(click->clicked_ms)});
        } else {
          row.insert(row.end(), {"", "", ""});
        }
        row.insert(row.end(), {to_iso8601(q.typing_start_ms), to_iso8601(q.typing_end_ms), to_iso8601(q.issued_ms),
                               click != nullptr ? to_iso8601(click->clicked_ms) : ""});
        search.push_back(std::move(row));
      };
      if (q.clicks.empty()) {
        finish(base, nullptr);
      } else {
        for (const auto& click : q.clicks) finish(base, &click);
      }
    }

    for (const auto& note : fold_notes(events)) {
      notes.push_back({participant, session_id, note.task_id, note.text, std::to_string(note.updated_ms),
                       to_iso8601(note.updated_ms)});
    }
  }

  ExportBundle bundle;
  bundle.files["registration.csv"] = csv_encode(kRegistrationHeader, registration);
  bundle.files["demographics.csv"] = csv_encode(kSurveyHeader, demographics);
  bundle.files["pre_task.csv"] = csv_encode(kSurveyHeader, pre_task);
  bundle.files["post_task.csv"] = csv_encode(kSurveyHeader, post_task);
  bundle.files["chat_history.csv"] = csv_encode(kChatHeader, chat);
  bundle.files["search_log.csv"] = csv_encode(kSearchHeader, search);
  bundle.files["in_situ.csv"] = csv_encode(kInSituHeader, in_situ);
  bundle.files["notes.csv"] = csv_encode(kNotesHeader, notes);
  return bundle;
}

ExportSnapshot load_export_snapshot(const Store& store, const std::string& study_id) {
  check_key(study_id);
  if (!store.get({Collection::studies, study_key(study_id)})) throw UnknownStudy("no study '" + study_id + "'");
  ExportSnapshot snapshot;
  snapshot.study_id = study_id;
  // Events first: a registration written after this scan has no events yet
  // and still appears as a header-only session.
  for (const auto& record : store.scan(events_stream(study_id), 0)) {
    snapshot.events.push_back(event_from_json(json::parse(record)));
  }
  const std::string prefix = study_id + "/participant.";
  for (const auto& key : store.list(Collection::sessions, prefix)) {
    if (auto doc = store.get({Collection::sessions, key})) {
      snapshot.registrations.push_back(registration_from_json(json::parse(doc->value)));
    }
  }
  return snapshot;
}

ExportBundle export_study(const Store& store, const std::string& study_id) {
  return build_export(load_export_snapshot(store, study_id));
}

}  // namespace studyflow
