#include "studyflow/flow_engine.hpp"

#include <algorithm>

#include "studyflow/domain_json.hpp"
#include "studyflow/error.hpp"

namespace studyflow {

using nlohmann::json;

namespace {

bool answered(const std::map<std::string, AnswerValue>& answers, const std::string& question_id) {
  auto it = answers.find(question_id);
  if (it == answers.end()) return false;
  if (const auto* text = std::get_if<std::string>(&it->second)) return !trim(*text).empty();
  if (const auto* many = std::get_if<std::vector<std::string>>(&it->second)) return !many->empty();
  return true;
}

const TypologyCategory* category_by_label(const StudyConfig& config, const std::string& label) {
  for (const auto& category : config.typology.categories) {
    if (category.label == label) return &category;
  }
  return nullptr;
}

}  // namespace

std::string_view to_string(StepStatus status) {
  switch (status) {
    case StepStatus::not_started: return "not_started";
    case StepStatus::in_progress: return "in_progress";
    case StepStatus::completed: return "completed";
  }
  return "unknown";
}

std::vector<FlowStep> enabled_sequence(const StudyConfig& config) {
  std::vector<FlowStep> steps;
  std::copy_if(config.flow.begin(), config.flow.end(), std::back_inserter(steps),
               [](const FlowStep& s) { return s.enabled; });
  std::stable_sort(steps.begin(), steps.end(),
                   [](const FlowStep& a, const FlowStep& b) { return a.order < b.order; });
  return steps;
}

ParticipantSession init_session(const StudyConfig& config, const std::string& participant_id,
                                const std::string& session_id, TimestampMs now_ms,
                                std::span<const ParticipantSession> existing) {
  for (const auto& other : existing) {
    if (other.participant_id == participant_id && other.study_id == config.study_id) {
      throw DuplicateSession("participant '" + participant_id + "' already has a session in study '" +
                             config.study_id + "'");
    }
  }
  ParticipantSession session;
  session.session_id = session_id;
  session.participant_id = participant_id;
  session.study_id = config.study_id;
  session.steps = enabled_sequence(config);
  session.step_states.resize(session.steps.size());
  session.started_at = now_ms;
  if (session.steps.empty()) {
    session.completed_at = now_ms;
  } else {
    session.step_states[0].status = StepStatus::in_progress;
  }
  return session;
}

std::optional<std::string> associated_task(const ParticipantSession& session, std::size_t step_index) {
  if (step_index >= session.steps.size()) return std::nullopt;
  const FlowStep& step = session.steps[step_index];
  if (step.task_id) return step.task_id;
  if (step.kind == StepKind::pre_task) {
    for (std::size_t i = step_index + 1; i < session.steps.size(); ++i) {
      if (session.steps[i].kind == StepKind::main_task) return session.steps[i].task_id;
    }
  } else if (step.kind == StepKind::post_task) {
    for (std::size_t i = step_index; i-- > 0;) {
      if (session.steps[i].kind == StepKind::main_task) return session.steps[i].task_id;
    }
  }
  return std::nullopt;
}

std::optional<SurveyInstrument> effective_instrument(const StudyConfig& config, const ParticipantSession& session,
                                                     std::size_t step_index) {
  if (step_index >= session.steps.size()) return std::nullopt;
  const FlowStep& step = session.steps[step_index];
  if (!binds_survey(step.kind) || !step.survey_id) return std::nullopt;
  const SurveyInstrument* configured = config.find_survey(*step.survey_id);
  if (configured == nullptr) return std::nullopt;
  SurveyInstrument instrument = *configured;
  if (config.typology.categories.empty()) return instrument;

  if (step.kind == StepKind::pre_task) {
    MultipleChoice choice;
    choice.allow_multiple = true;
    for (const auto& category : config.typology.categories) choice.options.push_back(category.label);
    instrument.questions.push_back({std::string(kIntentionQuestionId),
                                    "What do you intend to achieve in this task? Select all that apply.",
                                    choice, true, std::nullopt});
  } else if (step.kind == StepKind::post_task) {
    const auto task = associated_task(session, step_index);
    auto selected = task ? session.selected_intentions.find(*task) : session.selected_intentions.end();
    if (selected != session.selected_intentions.end()) {
      for (const auto& category_id : selected->second) {
        auto it = std::find_if(config.typology.categories.begin(), config.typology.categories.end(),
                               [&](const TypologyCategory& c) { return c.category_id == category_id; });
        if (it == config.typology.categories.end()) continue;
        instrument.questions.push_back({std::string(kFulfillmentQuestionPrefix) + category_id,
                                        "How well was your intention fulfilled: " + it->label + "?",
                                        Likert{5, "Not at all", "Completely"}, true, std::nullopt});
      }
    }
  }
  return instrument;
}

std::vector<AttentionFailure> check_attention(const SurveyInstrument& instrument, const SurveyAnswers& answers) {
  std::vector<AttentionFailure> failures;
  for (const auto& q : instrument.questions) {
    if (!q.attention_check) continue;
    auto it = answers.answers.find(q.question_id);
    if (it == answers.answers.end()) {
      failures.push_back({q.question_id, q.attention_check->expected_answer, std::nullopt});
    } else if (!attention_check_passes(*q.attention_check, it->second)) {
      failures.push_back({q.question_id, q.attention_check->expected_answer, it->second});
    }
  }
  return failures;
}

void record_interaction(ParticipantSession& session, const std::string& task_id, bool prompt, bool response,
                        bool query) {
  TaskCounts& task = session.task_counts[task_id];
  if (prompt) {
    ++task.prompts;
    ++session.interaction_counts.prompts;
  }
  if (response) {
    ++task.responses;
    ++session.interaction_counts.responses;
  }
  if (query) {
    ++task.queries;
    ++session.interaction_counts.queries;
  }
}

AdvanceResult advance(const ParticipantSession& session, const StepCompletion& completion,
                      const StudyConfig& config, const AdvanceContext& context) {
  if (session.finished()) throw SessionClosed("session '" + session.session_id + "' has completed the study");
  const FlowStep& step = session.steps[session.cursor];
  if (completion.kind != step.kind) {
    throw StepMismatch("completion for '" + std::string(to_string(completion.kind)) + "' but current step is '" +
                       std::string(to_string(step.kind)) + "'");
  }

  AdvanceResult result;
  result.session = session;
  ParticipantSession& next = result.session;

  if (step.kind == StepKind::consent) {
    const auto* ack = std::get_if<ConsentAck>(&completion.payload);
    if (ack == nullptr) throw StepMismatch("consent step expects a consent acknowledgement");
    const bool all_checked = ack->checked.size() == config.consent_checkboxes.size() &&
                             std::all_of(ack->checked.begin(), ack->checked.end(), [](bool b) { return b; });
    if (!all_checked) throw GateError(GateReason::consent_incomplete, "every consent checkbox must be ticked");
  } else if (binds_survey(step.kind)) {
    const auto* submitted = std::get_if<SurveyAnswers>(&completion.payload);
    if (submitted == nullptr) throw StepMismatch("survey step expects survey answers");
    const auto instrument = effective_instrument(config, session, session.cursor);
    if (!instrument) throw InvalidConfig("survey step has no instrument");
    for (const auto& q : instrument->questions) {
      auto it = submitted->answers.find(q.question_id);
      if (it != submitted->answers.end() && !answer_fits(q.answer_type, it->second)) {
        throw GateError(GateReason::missing_required, "answer to '" + q.question_id + "' does not fit its type");
      }
      if (q.required && !answered(submitted->answers, q.question_id)) {
        throw GateError(GateReason::missing_required, "required question '" + q.question_id + "' unanswered");
      }
    }
    result.attention_failures = check_attention(*instrument, *submitted);
    if (!result.attention_failures.empty() &&
        config.settings.attention_fail_policy == AttentionFailPolicy::block_advance) {
      throw GateError(GateReason::attention_failed,
                      "attention check '" + result.attention_failures.front().question_id + "' failed");
    }
    if (step.kind == StepKind::pre_task) {
      auto it = submitted->answers.find(std::string(kIntentionQuestionId));
      const auto task = associated_task(session, session.cursor);
      if (it != submitted->answers.end() && task) {
        std::vector<std::string> labels;
        if (const auto* many = std::get_if<std::vector<std::string>>(&it->second)) labels = *many;
        if (const auto* one = std::get_if<std::string>(&it->second)) labels = {*one};
        auto& selected = next.selected_intentions[*task];
        selected.clear();
        for (const auto& label : labels) {
          if (const auto* category = category_by_label(config, label)) selected.push_back(category->category_id);
        }
      }
    }
  } else {
    const auto* submit = std::get_if<TaskSubmit>(&completion.payload);
    if (submit == nullptr) throw StepMismatch("main task step expects a task submission");
    const TaskDef* task = step.task_id ? config.find_task(*step.task_id) : nullptr;
    if (task == nullptr) throw InvalidConfig("main task step references no known task");
    auto counts_it = session.task_counts.find(task->task_id);
    const TaskCounts counts = counts_it == session.task_counts.end() ? TaskCounts{} : counts_it->second;
    const std::uint64_t have = task->modality == Modality::chat ? counts.prompts : counts.queries;
    const auto need = static_cast<std::uint64_t>(std::max<std::int64_t>(0, config.settings.min_interactions));
    if (have < need) {
      throw GateError(GateReason::below_min_interactions,
                      std::to_string(have) + " of " + std::to_string(need) + " required interactions");
    }
    if (context.pending_popups) {
      const std::size_t pending = context.pending_popups();
      if (pending > 0) {
        throw GateError(GateReason::pending_trigger, std::to_string(pending) + " popup survey(s) still unanswered");
      }
    }
  }

  next.step_states[next.cursor] = {StepStatus::completed, context.now_ms};
  ++next.cursor;
  if (next.cursor < next.steps.size()) {
    next.step_states[next.cursor].status = StepStatus::in_progress;
  } else {
    next.completed_at = context.now_ms;
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

json counts_to_json(const TaskCounts& c) {
  return {{"prompts", c.prompts}, {"responses", c.responses}, {"queries", c.queries}};
}

TaskCounts counts_from_json(const json& doc) {
  return {doc.at("prompts").get<std::uint64_t>(), doc.at("responses").get<std::uint64_t>(),
          doc.at("queries").get<std::uint64_t>()};
}

}  // namespace

json session_to_json(const ParticipantSession& session) {
  json out;
  out["session_id"] = session.session_id;
  out["participant_id"] = session.participant_id;
  out["study_id"] = session.study_id;
  out["cursor"] = session.cursor;
  out["steps"] = json::array();
  for (const auto& step : session.steps) out["steps"].push_back(flow_step_to_json(step));
  out["step_states"] = json::array();
  for (const auto& state : session.step_states) {
    out["step_states"].push_back(
        {{"status", to_string(state.status)},
         {"completed_at", state.completed_at ? json(*state.completed_at) : json(nullptr)}});
  }
  out["interaction_counts"] = counts_to_json(session.interaction_counts);
  out["task_counts"] = json::object();
  for (const auto& [task, counts] : session.task_counts) out["task_counts"][task] = counts_to_json(counts);
  out["selected_intentions"] = session.selected_intentions;
  out["started_at"] = session.started_at;
  out["completed_at"] = session.completed_at ? json(*session.completed_at) : json(nullptr);
  return out;
}

ParticipantSession session_from_json(const json& doc) {
  ParticipantSession session;
  session.session_id = doc.at("session_id").get<std::string>();
  session.participant_id = doc.at("participant_id").get<std::string>();
  session.study_id = doc.at("study_id").get<std::string>();
  session.cursor = doc.at("cursor").get<std::size_t>();
  for (const auto& step : doc.at("steps")) session.steps.push_back(flow_step_from_json(step));
  for (const auto& state : doc.at("step_states")) {
    StepState s;
    const auto status = state.at("status").get<std::string>();
    s.status = status == "completed"     ? StepStatus::completed
               : status == "in_progress" ? StepStatus::in_progress
                                         : StepStatus::not_started;
    if (!state.at("completed_at").is_null()) s.completed_at = state.at("completed_at").get<TimestampMs>();
    session.step_states.push_back(s);
  }
  session.interaction_counts = counts_from_json(doc.at("interaction_counts"));
  for (const auto& [task, counts] : doc.at("task_counts").items()) {
    session.task_counts[task] = counts_from_json(counts);
  }
  session.selected_intentions =
      doc.at("selected_intentions").get<std::map<std::string, std::vector<std::string>>>();
  session.started_at = doc.at("started_at").get<TimestampMs>();
  if (!doc.at("completed_at").is_null()) session.completed_at = doc.at("completed_at").get<TimestampMs>();
  return session;
}

}  // namespace studyflow
