#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "studyflow/clock.hpp"
#include "studyflow/domain.hpp"

namespace studyflow {

enum class StepStatus { not_started, in_progress, completed };

struct StepState {
  StepStatus status = StepStatus::not_started;
  std::optional<TimestampMs> completed_at;
  bool operator==(const StepState&) const = default;
};

struct TaskCounts {
  std::uint64_t prompts = 0;
  std::uint64_t responses = 0;
  std::uint64_t queries = 0;
  bool operator==(const TaskCounts&) const = default;
};

/// One participant's position in a study. `steps` is the enabled sequence
/// materialized when the session was created, so later edits to the study's
/// flow do not move participants already underway.
struct ParticipantSession {
  std::string session_id;
  std::string participant_id;
  std::string study_id;
  std::size_t cursor = 0;
  std::vector<FlowStep> steps;
  std::vector<StepState> step_states;
  TaskCounts interaction_counts;
  std::map<std::string, TaskCounts> task_counts;
  /// Typology category ids chosen in each task's pre-task questionnaire.
  std::map<std::string, std::vector<std::string>> selected_intentions;
  TimestampMs started_at = 0;
  std::optional<TimestampMs> completed_at;
  bool operator==(const ParticipantSession&) const = default;

  bool finished() const { return cursor >= steps.size(); }
  const FlowStep* current_step() const { return finished() ? nullptr : &steps[cursor]; }
};

struct ConsentAck {
  std::vector<bool> checked;
  bool operator==(const ConsentAck&) const = default;
};

struct SurveyAnswers {
  std::map<std::string, AnswerValue> answers;
  bool operator==(const SurveyAnswers&) const = default;
};

struct TaskSubmit {
  std::optional<std::string> final_note;
  bool operator==(const TaskSubmit&) const = default;
};

struct StepCompletion {
  StepKind kind = StepKind::consent;
  std::variant<ConsentAck, SurveyAnswers, TaskSubmit> payload;
  bool operator==(const StepCompletion&) const = default;
};

struct AttentionFailure {
  std::string question_id;
  AnswerValue expected;
  std::optional<AnswerValue> given;
  bool operator==(const AttentionFailure&) const = default;
};

struct AdvanceContext {
  TimestampMs now_ms = 0;
  /// Called only for a main task whose interaction gate already passed;
  /// returns how many popups (including freshly materialized
  /// before-submission ones) are still unanswered.
  std::function<std::size_t()> pending_popups;
};

struct AdvanceResult {
  ParticipantSession session;
  /// Failed attention checks of the submitted survey. Under block_advance a
  /// failure throws instead, so callers that must record it run
  /// check_attention first.
  std::vector<AttentionFailure> attention_failures;
};

/// Enabled steps sorted by their order index.
std::vector<FlowStep> enabled_sequence(const StudyConfig& config);

/// Throws DuplicateSession if `existing` already holds a session for the same
/// participant and study.
ParticipantSession init_session(const StudyConfig& config, const std::string& participant_id,
                                const std::string& session_id, TimestampMs now_ms,
                                std::span<const ParticipantSession> existing = {});

/// Completes the step at the cursor. Gates, in order: consent checkboxes all
/// ticked; required questions answered with values that fit their type;
/// attention checks (blocking only under block_advance); for main tasks the
/// prompt or query count against min_interactions, then unanswered popups.
/// Throws GateError, StepMismatch, SessionClosed.
AdvanceResult advance(const ParticipantSession& session, const StepCompletion& completion,
                      const StudyConfig& config, const AdvanceContext& context);

/// Increments the per-task and total counters for a logged interaction.
void record_interaction(ParticipantSession& session, const std::string& task_id, bool prompt, bool response,
                        bool query);

/// Task a step belongs to: its own task_id, otherwise the next main task
/// (pre_task) or the previous main task (post_task) in the sequence.
std::optional<std::string> associated_task(const ParticipantSession& session, std::size_t step_index);

/// Question id of the generated intention selection item.
inline constexpr std::string_view kIntentionQuestionId = "typology.intentions";
/// Prefix of the generated per-category fulfillment items.
inline constexpr std::string_view kFulfillmentQuestionPrefix = "typology.fulfillment.";

/// Instrument a participant actually sees at `step_index`: the configured
/// survey, plus for pre_task a multi-select over typology categories and for
/// post_task one 5-point fulfillment item per selected category.
std::optional<SurveyInstrument> effective_instrument(const StudyConfig& config,
                                                     const ParticipantSession& session,
                                                     std::size_t step_index);

/// Attention checks in `instrument` that `answers` fail (an unanswered check
/// fails).
std::vector<AttentionFailure> check_attention(const SurveyInstrument& instrument, const SurveyAnswers& answers);

nlohmann::json session_to_json(const ParticipantSession& session);
ParticipantSession session_from_json(const nlohmann::json& doc);

std::string_view to_string(StepStatus status);

}  // namespace studyflow
