#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "studyflow/clock.hpp"

namespace studyflow {

enum class EventKind {
  session_started,
  task_started,
  consent_submitted,
  survey_submitted,
  attention_check,
  step_completed,
  gate_refused,
  prompt,
  response_chunk,
  response_complete,
  response_error,
  response_cancelled,
  turn_rating,
  trajectory_rating,
  query,
  click,
  click_rejected,
  note,
  popup_fired,
  popup_answered,
  task_submitted,
  session_completed,
};

std::string_view to_string(EventKind kind);
std::optional<EventKind> event_kind_from_string(std::string_view text);

/// One immutable entry of a session's interaction log.
///
/// Payload fields by kind (all timestamps are epoch ms):
///   prompt            task_id turn_id turn_index text typing_start_ms typing_end_ms submitted_ms
///   response_chunk    task_id turn_id chunk_index text
///   response_complete task_id turn_id
///   response_error    task_id turn_id error
///   response_cancelled task_id turn_id
///   turn_rating       turn_id rating
///   trajectory_rating task_id rating
///   query             task_id query_id text typing_start_ms typing_end_ms issued_ms result_count
///                     serp[{rank title url snippet}]
///   click             task_id query_id rank url clicked_ms
///   click_rejected    query_id rank url reason
///   note              task_id text
///   survey_submitted  step_index survey_kind survey_id task_id? questions[{question_id prompt}] answers{}
///   popup_fired       instance_id rule_id survey_id task_id? cause
///   popup_answered    instance_id rule_id survey_id response_id questions[] answers{}
struct InteractionEvent {
  std::string event_id;
  std::string session_id;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::session_started;
  nlohmann::json payload = nlohmann::json::object();
  TimestampMs client_ts = 0;
  TimestampMs server_ts = 0;

  bool operator==(const InteractionEvent& other) const;
};

nlohmann::json event_to_json(const InteractionEvent& event);
/// Throws PayloadInvalid when the record is not a well-formed event.
InteractionEvent event_from_json(const nlohmann::json& doc);

}  // namespace studyflow
