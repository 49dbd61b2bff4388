#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace studyflow {

// ---------------------------------------------------------------------------
// Survey instruments

struct Likert {
  int points = 5;
  std::string low_anchor;
  std::string high_anchor;
  bool operator==(const Likert&) const = default;
};

struct MultipleChoice {
  std::vector<std::string> options;
  bool allow_multiple = false;
  bool operator==(const MultipleChoice&) const = default;
};

struct OpenEnded {
  std::optional<std::size_t> max_length;
  bool operator==(const OpenEnded&) const = default;
};

using AnswerType = std::variant<Likert, MultipleChoice, OpenEnded>;

/// A participant's answer: a Likert point, one chosen option or free text, or
/// a set of chosen options.
using AnswerValue = std::variant<std::int64_t, std::string, std::vector<std::string>>;

struct AttentionCheck {
  AnswerValue expected_answer;
  bool operator==(const AttentionCheck&) const = default;
};

struct Question {
  std::string question_id;
  std::string prompt;
  AnswerType answer_type;
  bool required = false;
  std::optional<AttentionCheck> attention_check;
  bool operator==(const Question&) const = default;
};

struct SurveyInstrument {
  std::string survey_id;
  std::string title;
  std::vector<Question> questions;
  bool operator==(const SurveyInstrument&) const = default;
};

// ---------------------------------------------------------------------------
// Tasks, typology, settings

enum class Modality { chat, search };

struct TaskDef {
  std::string task_id;
  Modality modality = Modality::chat;
  std::string title;
  std::string description_markdown;
  bool operator==(const TaskDef&) const = default;
};

struct TypologyCategory {
  std::string category_id;
  std::string label;
  std::string description;
  bool operator==(const TypologyCategory&) const = default;
};

struct IntentionTypology {
  std::vector<TypologyCategory> categories;
  bool operator==(const IntentionTypology&) const = default;
};

enum class AttentionFailPolicy { record_only, block_advance };

struct StudySettings {
  std::vector<std::string> task_order;
  bool notes_enabled = true;
  std::int64_t min_interactions = 0;
  AttentionFailPolicy attention_fail_policy = AttentionFailPolicy::record_only;
  bool operator==(const StudySettings&) const = default;
};

// ---------------------------------------------------------------------------
// Flow

enum class StepKind {
  consent,
  background_survey,
  pre_task,
  main_task,
  post_task,
  experience_survey,
  end_survey,
  custom_survey,
};

/// True for every step kind that presents a survey instrument.
bool binds_survey(StepKind kind);

struct FlowStep {
  StepKind kind = StepKind::consent;
  bool enabled = true;
  int order = 0;
  std::optional<std::string> reminder_text;
  std::optional<std::string> survey_id;
  std::optional<std::string> task_id;
  bool operator==(const FlowStep&) const = default;
};

// ---------------------------------------------------------------------------
// In-situ trigger rules

struct AfterNPrompts {
  int n = 1;
  bool operator==(const AfterNPrompts&) const = default;
};
struct AfterNResponses {
  int n = 1;
  bool operator==(const AfterNResponses&) const = default;
};
struct AfterNQueries {
  int n = 1;
  bool operator==(const AfterNQueries&) const = default;
};
struct Periodic {
  int interval_s = 60;
  bool operator==(const Periodic&) const = default;
};
struct BeforeSubmission {
  bool operator==(const BeforeSubmission&) const = default;
};

using TriggerCondition =
    std::variant<AfterNPrompts, AfterNResponses, AfterNQueries, Periodic, BeforeSubmission>;

enum class TriggerRepeat { once, every_multiple };

struct TriggerRule {
  std::string rule_id;
  std::string survey_id;
  TriggerCondition condition;
  TriggerRepeat repeat = TriggerRepeat::once;
  /// Empty means the rule applies to every task.
  std::optional<std::string> scope_task_id;
  bool operator==(const TriggerRule&) const = default;
};

// ---------------------------------------------------------------------------
// Whole study

struct StudyConfig {
  std::string study_id;
  std::string title;
  StudySettings settings;
  std::vector<FlowStep> flow;
  std::vector<TaskDef> tasks;
  /// Keyed by slot name ("background", "pre_task", ... or any custom key).
  std::map<std::string, SurveyInstrument> surveys;
  IntentionTypology typology;
  std::vector<TriggerRule> trigger_rules;
  std::string provider_config_ref;
  std::string consent_text;
  std::vector<std::string> consent_checkboxes;
  bool operator==(const StudyConfig&) const = default;

  const TaskDef* find_task(std::string_view task_id) const;
  const SurveyInstrument* find_survey(std::string_view survey_id) const;
};

std::string_view to_string(StepKind kind);
std::string_view to_string(Modality modality);
std::string_view to_string(AttentionFailPolicy policy);
std::string_view to_string(TriggerRepeat repeat);
std::optional<StepKind> step_kind_from_string(std::string_view text);
std::optional<Modality> modality_from_string(std::string_view text);

/// Study with consent plus the six default steps (background, pre-task, main
/// chat task, post-task, experience, end) and one survey per survey step.
StudyConfig make_default_study(std::string study_id);

// ---------------------------------------------------------------------------
// Validation

enum class Severity { error, warning };

struct ValidationIssue {
  std::string path;
  Severity severity = Severity::error;
  std::string message;
  bool operator==(const ValidationIssue&) const = default;
};

using ValidationReport = std::vector<ValidationIssue>;

ValidationReport validate_study_config(const StudyConfig& config);
ValidationReport validate_instrument(const SurveyInstrument& instrument,
                                     const std::string& path_prefix = "");

/// Returns a copy with `questions[i] = original[permutation[i]]`.
/// Throws BadPermutation unless `permutation` is a permutation of 0..n-1.
SurveyInstrument reorder_questions(const SurveyInstrument& instrument,
                                   std::span<const std::size_t> permutation);

// ---------------------------------------------------------------------------
// Answers

/// True when `value` has the shape `type` accepts (range, option membership,
/// length).
bool answer_fits(const AnswerType& type, const AnswerValue& value);

/// Exact match after trimming surrounding whitespace from text values.
bool attention_check_passes(const AttentionCheck& check, const AnswerValue& given);

std::string trim(std::string_view text);

}  // namespace studyflow
