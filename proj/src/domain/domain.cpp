#include "studyflow/domain.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "studyflow/error.hpp"

namespace studyflow {

namespace {

void add_error(ValidationReport& report, std::string path, std::string message) {
  report.push_back({std::move(path), Severity::error, std::move(message)});
}

std::size_t utf8_length(std::string_view text) {
  return static_cast<std::size_t>(
      std::count_if(text.begin(), text.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

bool is_permutation_of_range(const std::vector<int>& values) {
  std::vector<int> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) return false;
  }
  return true;
}

}  // namespace

bool binds_survey(StepKind kind) {
  switch (kind) {
    case StepKind::background_survey:
    case StepKind::pre_task:
    case StepKind::post_task:
    case StepKind::experience_survey:
    case StepKind::end_survey:
    case StepKind::custom_survey:
      return true;
    case StepKind::consent:
    case StepKind::main_task:
      return false;
  }
  return false;
}

const TaskDef* StudyConfig::find_task(std::string_view task_id) const {
  auto it = std::find_if(tasks.begin(), tasks.end(),
                         [&](const TaskDef& t) { return t.task_id == task_id; });
  return it == tasks.end() ? nullptr : &*it;
}

const SurveyInstrument* StudyConfig::find_survey(std::string_view survey_id) const {
  for (const auto& [slot, instrument] : surveys) {
    if (instrument.survey_id == survey_id) return &instrument;
  }
  return nullptr;
}

std::string_view to_string(StepKind kind) {
  switch (kind) {
    case StepKind::consent: return "consent";
    case StepKind::background_survey: return "background_survey";
    case StepKind::pre_task: return "pre_task";
    case StepKind::main_task: return "main_task";
    case StepKind::post_task: return "post_task";
    case StepKind::experience_survey: return "experience_survey";
    case StepKind::end_survey: return "end_survey";
    case StepKind::custom_survey: return "custom_survey";
  }
  return "unknown";
}

std::string_view to_string(Modality modality) {
  return modality == Modality::chat ? "chat" : "search";
}

std::string_view to_string(AttentionFailPolicy policy) {
  return policy == AttentionFailPolicy::record_only ? "record_only" : "block_advance";
}

std::string_view to_string(TriggerRepeat repeat) {
  return repeat == TriggerRepeat::once ? "once" : "every_multiple";
}

std::optional<StepKind> step_kind_from_string(std::string_view text) {
  static constexpr StepKind kAll[] = {
      StepKind::consent,   StepKind::background_survey, StepKind::pre_task,
      StepKind::main_task, StepKind::post_task,         StepKind::experience_survey,
      StepKind::end_survey, StepKind::custom_survey};
  for (StepKind kind : kAll) {
    if (to_string(kind) == text) return kind;
  }
  return std::nullopt;
}

std::optional<Modality> modality_from_string(std::string_view text) {
  if (text == "chat") return Modality::chat;
  if (text == "search") return Modality::search;
  return std::nullopt;
}

std::string trim(std::string_view text) {
  constexpr std::string_view kSpace = " \t\r\n\f\v";
  const auto first = text.find_first_not_of(kSpace);
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(kSpace);
  return std::string(text.substr(first, last - first + 1));
}

bool answer_fits(const AnswerType& type, const AnswerValue& value) {
  if (const auto* likert = std::get_if<Likert>(&type)) {
    const auto* point = std::get_if<std::int64_t>(&value);
    return point != nullptr && *point >= 1 && *point <= likert->points;
  }
  if (const auto* choice = std::get_if<MultipleChoice>(&type)) {
    auto is_option = [&](const std::string& v) {
      return std::find(choice->options.begin(), choice->options.end(), v) != choice->options.end();
    };
    if (const auto* single = std::get_if<std::string>(&value)) return is_option(*single);
    if (const auto* many = std::get_if<std::vector<std::string>>(&value)) {
      if (!choice->allow_multiple || many->empty()) return false;
      std::set<std::string> seen;
      for (const auto& v : *many) {
        if (!is_option(v) || !seen.insert(v).second) return false;
      }
      return true;
    }
    return false;
  }
  const auto& open = std::get<OpenEnded>(type);
  const auto* text = std::get_if<std::string>(&value);
  if (text == nullptr) return false;
  return !open.max_length || utf8_length(*text) <= *open.max_length;
}

bool attention_check_passes(const AttentionCheck& check, const AnswerValue& given) {
  if (check.expected_answer.index() != given.index()) return false;
  if (const auto* expected = std::get_if<std::string>(&check.expected_answer)) {
    return trim(*expected) == trim(std::get<std::string>(given));
  }
  if (const auto* expected = std::get_if<std::vector<std::string>>(&check.expected_answer)) {
    auto normalize = [](const std::vector<std::string>& values) {
      std::vector<std::string> out;
      out.reserve(values.size());
      for (const auto& v : values) out.push_back(trim(v));
      std::sort(out.begin(), out.end());
      return out;
    };
    return normalize(*expected) == normalize(std::get<std::vector<std::string>>(given));
  }
  return check.expected_answer == given;
}

ValidationReport validate_instrument(const SurveyInstrument& instrument,
                                     const std::string& path_prefix) {
  ValidationReport report;
  const std::string base = path_prefix.empty() ? "" : path_prefix + ".";
  if (instrument.survey_id.empty()) add_error(report, base + "survey_id", "survey id is empty");
  if (instrument.questions.empty()) {
    add_error(report, base + "questions", "instrument needs at least one question");
  }
  std::set<std::string> ids;
  for (std::size_t i = 0; i < instrument.questions.size(); ++i) {
    const Question& q = instrument.questions[i];
    const std::string qpath = base + "questions[" + std::to_string(i) + "]";
    if (q.question_id.empty()) {
      add_error(report, qpath + ".question_id", "question id is empty");
    } else if (!ids.insert(q.question_id).second) {
      add_error(report, qpath + ".question_id", "duplicate question id '" + q.question_id + "'");
    }
    if (const auto* likert = std::get_if<Likert>(&q.answer_type)) {
      if (likert->points < 2 || likert->points > 11) {
        add_error(report, qpath + ".answer_type.points", "Likert points must be within 2..11");
      }
    } else if (const auto* choice = std::get_if<MultipleChoice>(&q.answer_type)) {
      if (choice->options.size() < 2) {
        add_error(report, qpath + ".answer_type.options", "multiple choice needs at least two options");
      }
    }
    if (q.attention_check && !answer_fits(q.answer_type, q.attention_check->expected_answer)) {
      add_error(report, qpath + ".attention_check.expected_answer",
                "expected answer does not fit the question's answer type");
    }
  }
  return report;
}

ValidationReport validate_study_config(const StudyConfig& config) {
  ValidationReport report;
  if (config.study_id.empty()) add_error(report, "study_id", "study id is empty");

  // tasks
  std::set<std::string> task_ids;
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    const TaskDef& task = config.tasks[i];
    const std::string path = "tasks[" + std::to_string(i) + "]";
    if (task.task_id.empty()) {
      add_error(report, path + ".task_id", "task id is empty");
    } else if (!task_ids.insert(task.task_id).second) {
      add_error(report, path + ".task_id", "duplicate task id '" + task.task_id + "'");
    }
    if (trim(task.description_markdown).empty()) {
      add_error(report, path + ".description_markdown", "task description is empty");
    }
  }

  // settings
  if (config.settings.min_interactions < 0) {
    add_error(report, "settings.min_interactions", "minimum interactions must be non-negative");
  }
  {
    std::vector<std::string> order = config.settings.task_order;
    std::vector<std::string> declared(task_ids.begin(), task_ids.end());
    std::sort(order.begin(), order.end());
    if (order != declared) {
      add_error(report, "settings.task_order", "task order must be a permutation of the declared tasks");
    }
  }

  // surveys
  std::set<std::string> survey_ids;
  for (const auto& [slot, instrument] : config.surveys) {
    const std::string path = "surveys." + slot;
    for (auto& issue : validate_instrument(instrument, path)) report.push_back(std::move(issue));
    if (!instrument.survey_id.empty() && !survey_ids.insert(instrument.survey_id).second) {
      add_error(report, path + ".survey_id", "duplicate survey id '" + instrument.survey_id + "'");
    }
  }

  // flow
  std::vector<int> orders;
  std::map<StepKind, int> singleton_counts;
  for (std::size_t i = 0; i < config.flow.size(); ++i) {
    const FlowStep& step = config.flow[i];
    const std::string path = "flow[" + std::to_string(i) + "]";
    orders.push_back(step.order);
    switch (step.kind) {
      case StepKind::consent:
      case StepKind::background_survey:
      case StepKind::experience_survey:
      case StepKind::end_survey:
        if (++singleton_counts[step.kind] == 2) {
          add_error(report, path + ".kind",
                    "step kind '" + std::string(to_string(step.kind)) + "' appears more than once");
        }
        break;
      default:
        break;
    }
    if (binds_survey(step.kind)) {
      if (!step.survey_id) {
        add_error(report, path + ".survey_id", "survey step has no survey id");
      } else if (config.find_survey(*step.survey_id) == nullptr) {
        add_error(report, path + ".survey_id", "unknown survey id '" + *step.survey_id + "'");
      }
    }
    if (step.kind == StepKind::main_task) {
      if (!step.task_id) {
        add_error(report, path + ".task_id", "main task step has no task id");
      } else if (config.find_task(*step.task_id) == nullptr) {
        add_error(report, path + ".task_id", "unknown task id '" + *step.task_id + "'");
      }
    } else if (step.task_id && config.find_task(*step.task_id) == nullptr) {
      add_error(report, path + ".task_id", "unknown task id '" + *step.task_id + "'");
    }
  }
  if (!is_permutation_of_range(orders)) {
    add_error(report, "flow", "step order indices must be a permutation of 0..len-1");
  }

  // typology
  std::set<std::string> category_ids;
  for (std::size_t i = 0; i < config.typology.categories.size(); ++i) {
    const auto& category = config.typology.categories[i];
    const std::string path = "typology.categories[" + std::to_string(i) + "]";
    if (category.category_id.empty() || !category_ids.insert(category.category_id).second) {
      add_error(report, path + ".category_id", "category id is empty or duplicated");
    }
    if (trim(category.label).empty()) add_error(report, path + ".label", "category label is empty");
  }

  // trigger rules
  std::set<std::string> rule_ids;
  for (std::size_t i = 0; i < config.trigger_rules.size(); ++i) {
    const TriggerRule& rule = config.trigger_rules[i];
    const std::string path = "trigger_rules[" + std::to_string(i) + "]";
    if (rule.rule_id.empty() || !rule_ids.insert(rule.rule_id).second) {
      add_error(report, path + ".rule_id", "rule id is empty or duplicated");
    } else if (!std::all_of(rule.rule_id.begin(), rule.rule_id.end(), [](unsigned char ch) {
                 return std::isalnum(ch) || ch == '-' || ch == '_' || ch == '.';
               })) {
      // Instance ids embed the rule id and travel in URL paths.
      add_error(report, path + ".rule_id", "rule id may only use letters, digits, '-', '_' and '.'");
    }
    if (config.find_survey(rule.survey_id) == nullptr) {
      add_error(report, path + ".survey_id", "unknown survey id '" + rule.survey_id + "'");
    }
    std::visit(
        [&](const auto& condition) {
          using T = std::decay_t<decltype(condition)>;
          if constexpr (std::is_same_v<T, Periodic>) {
            if (condition.interval_s < 1) {
              add_error(report, path + ".condition.interval_s", "interval must be at least 1 s");
            }
          } else if constexpr (std::is_same_v<T, BeforeSubmission>) {
            if (rule.repeat != TriggerRepeat::once) {
              add_error(report, path + ".repeat", "before-submission rules fire once");
            }
          } else {
            if (condition.n < 1) add_error(report, path + ".condition.n", "n must be at least 1");
          }
        },
        rule.condition);
    if (rule.scope_task_id && config.find_task(*rule.scope_task_id) == nullptr) {
      add_error(report, path + ".scope", "unknown task id '" + *rule.scope_task_id + "'");
    }
  }
  return report;
}

SurveyInstrument reorder_questions(const SurveyInstrument& instrument,
                                   std::span<const std::size_t> permutation) {
  const std::size_t n = instrument.questions.size();
  if (permutation.size() != n) {
    throw BadPermutation("permutation has " + std::to_string(permutation.size()) +
                         " entries for " + std::to_string(n) + " questions");
  }
  std::vector<bool> seen(n, false);
  for (std::size_t index : permutation) {
    if (index >= n || seen[index]) throw BadPermutation("not a permutation of 0..n-1");
    seen[index] = true;
  }
  SurveyInstrument out = instrument;
  for (std::size_t i = 0; i < n; ++i) out.questions[i] = instrument.questions[permutation[i]];
  return out;
}

StudyConfig make_default_study(std::string study_id) {
  StudyConfig config;
  config.study_id = std::move(study_id);
  config.title = "Information seeking study";
  config.provider_config_ref = "mock";
  config.consent_text =
      "# Consent\n\nYou are invited to take part in a research study about how people look for "
      "information. Participation is voluntary and you may stop at any time.";
  config.consent_checkboxes = {"I have read and understood the information above.",
                               "I agree to take part in this study."};

  config.tasks.push_back({"task-chat", Modality::chat, "Plan a trip",
                          "Use the assistant to plan a three-day trip to a city you have never "
                          "visited. Write down the key facts you find in the notes panel."});
  config.settings.task_order = {"task-chat"};
  config.settings.notes_enabled = true;
  config.settings.min_interactions = 0;

  config.typology.categories = {
      {"fact", "Find a specific fact", "Looking up a concrete piece of information."},
      {"learn", "Learn about a topic", "Building an understanding of something new."},
      {"decide", "Make a decision", "Comparing options to choose between them."},
  };

  config.surveys["background"] = {
      "background",
      "About you",
      {
          {"age", "What is your age group?",
           MultipleChoice{{"18-24", "25-34", "35-44", "45-54", "55+"}, false}, true, std::nullopt},
          {"search_frequency", "How often do you use web search engines?",
           Likert{5, "Rarely", "Many times a day"}, true, std::nullopt},
          {"chat_frequency", "How often do you use AI chat assistants?",
           Likert{5, "Never", "Many times a day"}, true, std::nullopt},
      }};
  config.surveys["pre_task"] = {
      "pre_task",
      "Before the task",
      {{"topic_familiarity", "How familiar are you with the task topic?",
        Likert{5, "Not at all", "Very familiar"}, true, std::nullopt}}};
  config.surveys["post_task"] = {
      "post_task",
      "After the task",
      {{"satisfaction", "How satisfied are you with the information you found?",
        Likert{5, "Very dissatisfied", "Very satisfied"}, true, std::nullopt},
       {"attention_1", "To show that you are reading carefully, please select 3.",
        Likert{5, "1", "5"}, true, AttentionCheck{std::int64_t{3}}}}};
  config.surveys["experience"] = {
      "experience",
      "Your experience",
      {{"ease_of_use", "The system was easy to use.", Likert{7, "Strongly disagree", "Strongly agree"},
        true, std::nullopt},
       {"trust", "I trust the information the system provided.",
        Likert{7, "Strongly disagree", "Strongly agree"}, true, std::nullopt}}};
  config.surveys["end"] = {
      "end",
      "End of study",
      {{"comments", "Anything else you would like to tell us?", OpenEnded{2000}, false,
        std::nullopt}}};

  config.flow = {
      {StepKind::consent, true, 0, std::nullopt, std::nullopt, std::nullopt},
      {StepKind::background_survey, true, 1, std::nullopt, "background", std::nullopt},
      {StepKind::pre_task, true, 2, "Answer a few questions before you start the task.", "pre_task",
       std::nullopt},
      {StepKind::main_task, true, 3, "Remember to take notes while you work.", std::nullopt,
       "task-chat"},
      {StepKind::post_task, true, 4, std::nullopt, "post_task", std::nullopt},
      {StepKind::experience_survey, true, 5, std::nullopt, "experience", std::nullopt},
      {StepKind::end_survey, true, 6, std::nullopt, "end", std::nullopt},
  };
  return config;
}

}  // namespace studyflow
