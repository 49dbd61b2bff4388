#include "studyflow/domain_json.hpp"

#include "studyflow/error.hpp"

namespace studyflow {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void schema_fail(const std::string& path, const std::string& what) {
  throw SchemaError(path + ": " + what);
}

const json& require(const json& doc, const char* key, const std::string& path) {
  if (!doc.is_object()) schema_fail(path, "expected an object");
  auto it = doc.find(key);
  if (it == doc.end()) schema_fail(path + "." + key, "missing");
  return *it;
}

std::string get_string(const json& doc, const char* key, const std::string& path) {
  const json& v = require(doc, key, path);
  if (!v.is_string()) schema_fail(path + "." + key, "expected a string");
  return v.get<std::string>();
}

std::string get_string_or(const json& doc, const char* key, const std::string& path,
                          std::string fallback = {}) {
  auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return fallback;
  if (!it->is_string()) schema_fail(path + "." + key, "expected a string");
  return it->get<std::string>();
}

bool get_bool_or(const json& doc, const char* key, const std::string& path, bool fallback) {
  auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return fallback;
  if (!it->is_boolean()) schema_fail(path + "." + key, "expected a boolean");
  return it->get<bool>();
}

std::int64_t get_int(const json& doc, const char* key, const std::string& path) {
  const json& v = require(doc, key, path);
  if (!v.is_number_integer()) schema_fail(path + "." + key, "expected an integer");
  return v.get<std::int64_t>();
}

std::optional<std::string> get_optional_string(const json& doc, const char* key,
                                               const std::string& path) {
  auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) schema_fail(path + "." + key, "expected a string");
  return it->get<std::string>();
}

std::vector<std::string> get_string_list(const json& doc, const char* key, const std::string& path) {
  auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return {};
  if (!it->is_array()) schema_fail(path + "." + key, "expected an array");
  std::vector<std::string> out;
  for (const auto& item : *it) {
    if (!item.is_string()) schema_fail(path + "." + key, "expected an array of strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

const json& get_array(const json& doc, const char* key, const std::string& path) {
  const json& v = require(doc, key, path);
  if (!v.is_array()) schema_fail(path + "." + key, "expected an array");
  return v;
}

ordered_json answer_type_to_json(const AnswerType& type) {
  ordered_json out;
  if (const auto* likert = std::get_if<Likert>(&type)) {
    out["kind"] = "likert";
    out["points"] = likert->points;
    out["low_anchor"] = likert->low_anchor;
    out["high_anchor"] = likert->high_anchor;
  } else if (const auto* choice = std::get_if<MultipleChoice>(&type)) {
    out["kind"] = "multiple_choice";
    out["options"] = choice->options;
    out["allow_multiple"] = choice->allow_multiple;
  } else {
    const auto& open = std::get<OpenEnded>(type);
    out["kind"] = "open_ended";
    if (open.max_length) out["max_length"] = *open.max_length;
  }
  return out;
}

AnswerType answer_type_from_json(const json& doc, const std::string& path) {
  if (!doc.is_object()) schema_fail(path, "expected an object");
  const std::string kind = get_string(doc, "kind", path);
  if (kind == "likert") {
    const std::int64_t points = get_int(doc, "points", path);
    if (points < 0 || points > 1000) schema_fail(path + ".points", "out of range");
    return Likert{static_cast<int>(points), get_string_or(doc, "low_anchor", path),
                  get_string_or(doc, "high_anchor", path)};
  }
  if (kind == "multiple_choice") {
    return MultipleChoice{get_string_list(doc, "options", path),
                          get_bool_or(doc, "allow_multiple", path, false)};
  }
  if (kind == "open_ended") {
    OpenEnded open;
    auto it = doc.find("max_length");
    if (it != doc.end() && !it->is_null()) {
      if (!it->is_number_unsigned()) schema_fail(path + ".max_length", "expected a non-negative integer");
      open.max_length = it->get<std::size_t>();
    }
    return open;
  }
  schema_fail(path + ".kind", "unknown answer type '" + kind + "'");
}

}  // namespace

json answer_to_json(const AnswerValue& value) {
  return std::visit([](const auto& v) { return json(v); }, value);
}

AnswerValue answer_from_json(const json& doc) {
  if (doc.is_number_integer()) return doc.get<std::int64_t>();
  if (doc.is_string()) return doc.get<std::string>();
  if (doc.is_array()) {
    std::vector<std::string> out;
    for (const auto& item : doc) {
      if (!item.is_string()) throw SchemaError("answer arrays must contain strings");
      out.push_back(item.get<std::string>());
    }
    return out;
  }
  throw SchemaError("answer must be an integer, a string, or an array of strings");
}

std::string answer_to_cell(const AnswerValue& value) {
  if (const auto* point = std::get_if<std::int64_t>(&value)) return std::to_string(*point);
  if (const auto* text = std::get_if<std::string>(&value)) return *text;
  return json(std::get<std::vector<std::string>>(value)).dump();
}

ordered_json survey_to_json(const SurveyInstrument& instrument) {
  ordered_json out;
  out["survey_id"] = instrument.survey_id;
  out["title"] = instrument.title;
  out["questions"] = ordered_json::array();
  for (const Question& q : instrument.questions) {
    ordered_json item;
    item["question_id"] = q.question_id;
    item["prompt"] = q.prompt;
    item["answer_type"] = answer_type_to_json(q.answer_type);
    item["required"] = q.required;
    if (q.attention_check) {
      item["attention_check"] = ordered_json{{"expected_answer", answer_to_json(q.attention_check->expected_answer)}};
    }
    out["questions"].push_back(std::move(item));
  }
  return out;
}

SurveyInstrument parse_survey_structure(const json& doc, const std::string& path) {
  if (!doc.is_object()) schema_fail(path, "expected an object");
  SurveyInstrument instrument;
  instrument.survey_id = get_string(doc, "survey_id", path);
  instrument.title = get_string_or(doc, "title", path);
  const json& questions = get_array(doc, "questions", path);
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const std::string qpath = path + ".questions[" + std::to_string(i) + "]";
    const json& item = questions[i];
    if (!item.is_object()) schema_fail(qpath, "expected an object");
    Question q;
    q.question_id = get_string(item, "question_id", qpath);
    q.prompt = get_string_or(item, "prompt", qpath);
    q.answer_type = answer_type_from_json(require(item, "answer_type", qpath), qpath + ".answer_type");
    q.required = get_bool_or(item, "required", qpath, false);
    auto check = item.find("attention_check");
    if (check != item.end() && !check->is_null()) {
      try {
        q.attention_check =
            AttentionCheck{answer_from_json(require(*check, "expected_answer", qpath + ".attention_check"))};
      } catch (const SchemaError& e) {
        schema_fail(qpath + ".attention_check.expected_answer", e.what());
      }
    }
    instrument.questions.push_back(std::move(q));
  }
  return instrument;
}

SurveyInstrument survey_from_json(const json& doc) {
  const std::string path = "survey";
  SurveyInstrument instrument = parse_survey_structure(doc, path);
  auto issues = validate_instrument(instrument, path);
  if (!issues.empty()) throw SchemaError(issues.front().path + ": " + issues.front().message);
  return instrument;
}

SurveyInstrument import_survey_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed survey document: ") + e.what());
  }
  return survey_from_json(doc);
}

std::string export_survey_json(const SurveyInstrument& instrument) {
  return survey_to_json(instrument).dump(2);
}

// ---------------------------------------------------------------------------
// Study configuration

json flow_step_to_json(const FlowStep& step) {
  json out{{"kind", to_string(step.kind)}, {"enabled", step.enabled}, {"order", step.order}};
  if (step.reminder_text) out["reminder_text"] = *step.reminder_text;
  if (step.survey_id) out["survey_id"] = *step.survey_id;
  if (step.task_id) out["task_id"] = *step.task_id;
  return out;
}

FlowStep flow_step_from_json(const json& doc) {
  const std::string path = "flow_step";
  FlowStep step;
  const std::string kind = get_string(doc, "kind", path);
  auto parsed = step_kind_from_string(kind);
  if (!parsed) schema_fail(path + ".kind", "unknown step kind '" + kind + "'");
  step.kind = *parsed;
  step.enabled = get_bool_or(doc, "enabled", path, true);
  step.order = static_cast<int>(get_int(doc, "order", path));
  step.reminder_text = get_optional_string(doc, "reminder_text", path);
  step.survey_id = get_optional_string(doc, "survey_id", path);
  step.task_id = get_optional_string(doc, "task_id", path);
  return step;
}

json task_to_json(const TaskDef& task) {
  return json{{"task_id", task.task_id},
              {"modality", to_string(task.modality)},
              {"title", task.title},
              {"description_markdown", task.description_markdown}};
}

TaskDef task_from_json(const json& doc) {
  const std::string path = "task";
  TaskDef task;
  task.task_id = get_string(doc, "task_id", path);
  const std::string modality = get_string(doc, "modality", path);
  auto parsed = modality_from_string(modality);
  if (!parsed) schema_fail(path + ".modality", "unknown modality '" + modality + "'");
  task.modality = *parsed;
  task.title = get_string_or(doc, "title", path);
  task.description_markdown = get_string_or(doc, "description_markdown", path);
  return task;
}

json trigger_rule_to_json(const TriggerRule& rule) {
  json condition = std::visit(
      [](const auto& c) -> json {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, AfterNPrompts>) return {{"kind", "after_n_prompts"}, {"n", c.n}};
        if constexpr (std::is_same_v<T, AfterNResponses>) return {{"kind", "after_n_responses"}, {"n", c.n}};
        if constexpr (std::is_same_v<T, AfterNQueries>) return {{"kind", "after_n_queries"}, {"n", c.n}};
        if constexpr (std::is_same_v<T, Periodic>) return {{"kind", "periodic"}, {"interval_s", c.interval_s}};
        if constexpr (std::is_same_v<T, BeforeSubmission>) return {{"kind", "before_submission"}};
      },
      rule.condition);
  json out{{"rule_id", rule.rule_id},
           {"survey_id", rule.survey_id},
           {"condition", condition},
           {"repeat", to_string(rule.repeat)}};
  out["scope"] = rule.scope_task_id ? json(*rule.scope_task_id) : json("all");
  return out;
}

TriggerRule trigger_rule_from_json(const json& doc) {
  const std::string path = "trigger_rule";
  TriggerRule rule;
  rule.rule_id = get_string(doc, "rule_id", path);
  rule.survey_id = get_string(doc, "survey_id", path);
  const json& condition = require(doc, "condition", path);
  const std::string cpath = path + ".condition";
  const std::string kind = get_string(condition, "kind", cpath);
  if (kind == "after_n_prompts") {
    rule.condition = AfterNPrompts{static_cast<int>(get_int(condition, "n", cpath))};
  } else if (kind == "after_n_responses") {
    rule.condition = AfterNResponses{static_cast<int>(get_int(condition, "n", cpath))};
  } else if (kind == "after_n_queries") {
    rule.condition = AfterNQueries{static_cast<int>(get_int(condition, "n", cpath))};
  } else if (kind == "periodic") {
    rule.condition = Periodic{static_cast<int>(get_int(condition, "interval_s", cpath))};
  } else if (kind == "before_submission") {
    rule.condition = BeforeSubmission{};
  } else {
    schema_fail(cpath + ".kind", "unknown trigger condition '" + kind + "'");
  }
  const std::string repeat = get_string_or(doc, "repeat", path, "once");
  if (repeat == "once") {
    rule.repeat = TriggerRepeat::once;
  } else if (repeat == "every_multiple") {
    rule.repeat = TriggerRepeat::every_multiple;
  } else {
    schema_fail(path + ".repeat", "unknown repeat mode '" + repeat + "'");
  }
  const std::string scope = get_string_or(doc, "scope", path, "all");
  if (scope != "all") rule.scope_task_id = scope;
  return rule;
}

json typology_to_json(const IntentionTypology& typology) {
  json categories = json::array();
  for (const auto& c : typology.categories) {
    categories.push_back({{"category_id", c.category_id}, {"label", c.label}, {"description", c.description}});
  }
  return json{{"categories", categories}};
}

IntentionTypology typology_from_json(const json& doc) {
  const std::string path = "typology";
  IntentionTypology typology;
  const json& categories = get_array(doc, "categories", path);
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const std::string cpath = path + ".categories[" + std::to_string(i) + "]";
    typology.categories.push_back({get_string(categories[i], "category_id", cpath),
                                   get_string(categories[i], "label", cpath),
                                   get_string_or(categories[i], "description", cpath)});
  }
  return typology;
}

json settings_to_json(const StudySettings& settings) {
  return json{{"task_order", settings.task_order},
              {"notes_enabled", settings.notes_enabled},
              {"min_interactions", settings.min_interactions},
              {"attention_fail_policy", to_string(settings.attention_fail_policy)}};
}

StudySettings settings_from_json(const json& doc) {
  const std::string path = "settings";
  if (!doc.is_object()) schema_fail(path, "expected an object");
  StudySettings settings;
  settings.task_order = get_string_list(doc, "task_order", path);
  settings.notes_enabled = get_bool_or(doc, "notes_enabled", path, true);
  if (doc.contains("min_interactions")) settings.min_interactions = get_int(doc, "min_interactions", path);
  const std::string policy = get_string_or(doc, "attention_fail_policy", path, "record_only");
  if (policy == "record_only") {
    settings.attention_fail_policy = AttentionFailPolicy::record_only;
  } else if (policy == "block_advance") {
    settings.attention_fail_policy = AttentionFailPolicy::block_advance;
  } else {
    schema_fail(path + ".attention_fail_policy", "unknown policy '" + policy + "'");
  }
  return settings;
}

json study_to_json(const StudyConfig& config) {
  json out;
  out["study_id"] = config.study_id;
  out["title"] = config.title;
  out["settings"] = settings_to_json(config.settings);
  out["flow"] = json::array();
  for (const auto& step : config.flow) out["flow"].push_back(flow_step_to_json(step));
  out["tasks"] = json::array();
  for (const auto& task : config.tasks) out["tasks"].push_back(task_to_json(task));
  out["surveys"] = json::object();
  for (const auto& [slot, instrument] : config.surveys) out["surveys"][slot] = survey_to_json(instrument);
  out["typology"] = typology_to_json(config.typology);
  out["trigger_rules"] = json::array();
  for (const auto& rule : config.trigger_rules) out["trigger_rules"].push_back(trigger_rule_to_json(rule));
  out["provider_config_ref"] = config.provider_config_ref;
  out["consent_text"] = config.consent_text;
  out["consent_checkboxes"] = config.consent_checkboxes;
  return out;
}

StudyConfig study_from_json(const json& doc) {
  const std::string path = "study";
  if (!doc.is_object()) schema_fail(path, "expected an object");
  StudyConfig config;
  config.study_id = get_string(doc, "study_id", path);
  config.title = get_string_or(doc, "title", path);
  if (doc.contains("settings")) config.settings = settings_from_json(doc["settings"]);
  if (doc.contains("flow")) {
    for (const auto& step : get_array(doc, "flow", path)) config.flow.push_back(flow_step_from_json(step));
  }
  if (doc.contains("tasks")) {
    for (const auto& task : get_array(doc, "tasks", path)) config.tasks.push_back(task_from_json(task));
  }
  if (doc.contains("surveys")) {
    const json& surveys = doc["surveys"];
    if (!surveys.is_object()) schema_fail(path + ".surveys", "expected an object");
    for (const auto& [slot, instrument] : surveys.items()) {
      // Instrument invariants are left to validate_study_config.
      config.surveys[slot] = parse_survey_structure(instrument, path + ".surveys." + slot);
    }
  }
  if (doc.contains("typology")) config.typology = typology_from_json(doc["typology"]);
  if (doc.contains("trigger_rules")) {
    for (const auto& rule : get_array(doc, "trigger_rules", path)) {
      config.trigger_rules.push_back(trigger_rule_from_json(rule));
    }
  }
  config.provider_config_ref = get_string_or(doc, "provider_config_ref", path, "mock");
  config.consent_text = get_string_or(doc, "consent_text", path);
  config.consent_checkboxes = get_string_list(doc, "consent_checkboxes", path);
  return config;
}

json report_to_json(const ValidationReport& report) {
  json out = json::array();
  for (const auto& issue : report) {
    out.push_back({{"path", issue.path},
                   {"severity", issue.severity == Severity::error ? "error" : "warning"},
                   {"message", issue.message}});
  }
  return out;
}

}  // namespace studyflow
