#pragma once

#include <string>
#include <string_view>

#include "json.hpp"
#include "studyflow/domain.hpp"

namespace studyflow {

/// Parses a survey document in the JSON editing format:
///
///   {survey_id, title, questions: [{question_id, prompt,
///     answer_type: {kind, points?, low_anchor?, high_anchor?, options?,
///                   allow_multiple?, max_length?},
///     required, attention_check?: {expected_answer}}]}
///
/// `kind` is one of "likert", "multiple_choice", "open_ended". Unknown keys
/// are ignored. Throws ParseError for malformed JSON and SchemaError for
/// documents that are well-formed but do not describe a valid instrument.
SurveyInstrument import_survey_json(std::string_view text);

/// Canonical document: fixed key order, optional keys emitted only when they
/// apply, two-space indentation.
std::string export_survey_json(const SurveyInstrument& instrument);

nlohmann::ordered_json survey_to_json(const SurveyInstrument& instrument);
SurveyInstrument survey_from_json(const nlohmann::json& doc);

nlohmann::json answer_to_json(const AnswerValue& value);
/// Throws SchemaError when `doc` is not an integer, string, or string array.
AnswerValue answer_from_json(const nlohmann::json& doc);
/// Display form used in exports: integers and text verbatim, option sets as a
/// JSON array.
std::string answer_to_cell(const AnswerValue& value);

nlohmann::json study_to_json(const StudyConfig& config);
/// Throws SchemaError on structural problems. Does not run
/// validate_study_config.
StudyConfig study_from_json(const nlohmann::json& doc);

nlohmann::json flow_step_to_json(const FlowStep& step);
FlowStep flow_step_from_json(const nlohmann::json& doc);
nlohmann::json task_to_json(const TaskDef& task);
TaskDef task_from_json(const nlohmann::json& doc);
nlohmann::json trigger_rule_to_json(const TriggerRule& rule);
TriggerRule trigger_rule_from_json(const nlohmann::json& doc);
nlohmann::json typology_to_json(const IntentionTypology& typology);
IntentionTypology typology_from_json(const nlohmann::json& doc);
nlohmann::json settings_to_json(const StudySettings& settings);
StudySettings settings_from_json(const nlohmann::json& doc);
nlohmann::json report_to_json(const ValidationReport& report);

}  // namespace studyflow
