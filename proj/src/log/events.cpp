#include "studyflow/events.hpp"

#include <array>
#include <utility>

#include "studyflow/error.hpp"

namespace studyflow {

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 22> kKindNames{{
    {EventKind::session_started, "session_started"},
    {EventKind::task_started, "task_started"},
    {EventKind::consent_submitted, "consent_submitted"},
    {EventKind::survey_submitted, "survey_submitted"},
    {EventKind::attention_check, "attention_check"},
    {EventKind::step_completed, "step_completed"},
    {EventKind::gate_refused, "gate_refused"},
    {EventKind::prompt, "prompt"},
    {EventKind::response_chunk, "response_chunk"},
    {EventKind::response_complete, "response_complete"},
    {EventKind::response_error, "response_error"},
    {EventKind::response_cancelled, "response_cancelled"},
    {EventKind::turn_rating, "turn_rating"},
    {EventKind::trajectory_rating, "trajectory_rating"},
    {EventKind::query, "query"},
    {EventKind::click, "click"},
    {EventKind::click_rejected, "click_rejected"},
    {EventKind::note, "note"},
    {EventKind::popup_fired, "popup_fired"},
    {EventKind::popup_answered, "popup_answered"},
    {EventKind::task_submitted, "task_submitted"},
    {EventKind::session_completed, "session_completed"},
}};

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::optional<EventKind> event_kind_from_string(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (name == text) return k;
  }
  return std::nullopt;
}

bool InteractionEvent::operator==(const InteractionEvent& other) const {
  return event_id == other.event_id && session_id == other.session_id && seq == other.seq &&
         kind == other.kind && payload == other.payload && client_ts == other.client_ts &&
         server_ts == other.server_ts;
}

nlohmann::json event_to_json(const InteractionEvent& event) {
  return nlohmann::json{{"event_id", event.event_id},     {"session_id", event.session_id},
                        {"seq", event.seq},               {"kind", to_string(event.kind)},
                        {"payload", event.payload},       {"client_ts", event.client_ts},
                        {"server_ts", event.server_ts}};
}

InteractionEvent event_from_json(const nlohmann::json& doc) {
  try {
    InteractionEvent event;
    event.event_id = doc.at("event_id").get<std::string>();
    event.session_id = doc.at("session_id").get<std::string>();
    event.seq = doc.at("seq").get<std::uint64_t>();
    const auto kind = event_kind_from_string(doc.at("kind").get<std::string>());
    if (!kind) throw PayloadInvalid("unknown event kind");
    event.kind = *kind;
    event.payload = doc.at("payload");
    event.client_ts = doc.at("client_ts").get<TimestampMs>();
    event.server_ts = doc.at("server_ts").get<TimestampMs>();
    return event;
  } catch (const nlohmann::json::exception& e) {
    throw PayloadInvalid(std::string("malformed event record: ") + e.what());
  }
}

}  // namespace studyflow
