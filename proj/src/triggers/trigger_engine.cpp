#include "studyflow/trigger_engine.hpp"

#include <algorithm>

#include "studyflow/domain_json.hpp"
#include "studyflow/error.hpp"

namespace studyflow {

using nlohmann::json;

namespace {

bool in_scope(const TriggerRule& rule, const std::string& task_id) {
  return !rule.scope_task_id || *rule.scope_task_id == task_id;
}

bool has_pending(const TriggerState& state, const std::string& rule_id) {
  return std::any_of(state.instances.begin(), state.instances.end(), [&](const FiredTrigger& f) {
    return f.rule_id == rule_id && f.state == FiredState::pending;
  });
}

FiredTrigger create_instance(TriggerState& state, std::size_t rule_index, TimestampMs at, std::string cause,
                             std::optional<std::string> task_id) {
  const TriggerRule& rule = state.rules[rule_index];
  RuleRuntime& runtime = state.runtime[rule_index];
  FiredTrigger fired;
  fired.instance_id = rule.rule_id + "." + std::to_string(++runtime.instances_created);
  fired.rule_id = rule.rule_id;
  fired.survey_id = rule.survey_id;
  fired.task_id = std::move(task_id);
  fired.fired_at = at;
  fired.cause = std::move(cause);
  state.instances.push_back(fired);
  return fired;
}

std::int64_t boundary_index(const Periodic& periodic, TimestampMs anchor, TimestampMs now) {
  if (now < anchor) return 0;
  return (now - anchor) / (static_cast<std::int64_t>(periodic.interval_s) * 1000);
}

}  // namespace

TriggerState make_trigger_state(std::vector<TriggerRule> rules) {
  TriggerState state;
  state.runtime.resize(rules.size());
  state.rules = std::move(rules);
  return state;
}

ObserveResult observe(TriggerState state, const InteractionEvent& event) {
  ObserveResult result;
  const std::string task_id = event.payload.is_object() ? event.payload.value("task_id", "") : "";

  if (event.kind == EventKind::task_started) {
    state.active_task = task_id;
    for (std::size_t i = 0; i < state.rules.size(); ++i) {
      if (!std::holds_alternative<Periodic>(state.rules[i].condition)) continue;
      RuleRuntime& runtime = state.runtime[i];
      runtime.anchor_ms = in_scope(state.rules[i], task_id) ? std::optional(event.server_ts) : std::nullopt;
      runtime.last_boundary = 0;
    }
  } else if (event.kind == EventKind::task_submitted) {
    state.active_task.reset();
    for (auto& runtime : state.runtime) runtime.anchor_ms.reset();
  }

  for (std::size_t i = 0; i < state.rules.size(); ++i) {
    const TriggerRule& rule = state.rules[i];
    int n = 0;
    std::visit(
        [&](const auto& condition) {
          using T = std::decay_t<decltype(condition)>;
          if constexpr (std::is_same_v<T, AfterNPrompts>) {
            if (event.kind == EventKind::prompt) n = condition.n;
          } else if constexpr (std::is_same_v<T, AfterNResponses>) {
            if (event.kind == EventKind::response_complete) n = condition.n;
          } else if constexpr (std::is_same_v<T, AfterNQueries>) {
            if (event.kind == EventKind::query) n = condition.n;
          }
        },
        rule.condition);
    if (n < 1 || !in_scope(rule, task_id)) continue;
    const std::uint64_t count = ++state.runtime[i].count;
    const bool fires = rule.repeat == TriggerRepeat::once ? count == static_cast<std::uint64_t>(n)
                                                          : count % static_cast<std::uint64_t>(n) == 0;
    if (fires) result.fired.push_back(create_instance(state, i, event.server_ts, event.event_id, task_id));
  }
  result.state = std::move(state);
  return result;
}

ObserveResult observe(TriggerState state, const ClockTick& tick) {
  ObserveResult result;
  for (std::size_t i = 0; i < state.rules.size(); ++i) {
    const auto* periodic = std::get_if<Periodic>(&state.rules[i].condition);
    RuleRuntime& runtime = state.runtime[i];
    if (periodic == nullptr || !runtime.anchor_ms) continue;
    const std::int64_t boundary = boundary_index(*periodic, *runtime.anchor_ms, tick.now_ms);
    if (boundary <= runtime.last_boundary) continue;
    runtime.last_boundary = boundary;
    if (has_pending(state, state.rules[i].rule_id)) continue;
    result.fired.push_back(create_instance(state, i, tick.now_ms, "tick", state.active_task));
  }
  result.state = std::move(state);
  return result;
}

TriggerState acknowledge(TriggerState state, const std::string& instance_id, const std::string& response_id,
                         TimestampMs now_ms) {
  auto it = std::find_if(state.instances.begin(), state.instances.end(),
                         [&](const FiredTrigger& f) { return f.instance_id == instance_id; });
  if (it == state.instances.end()) throw UnknownInstance("unknown popup instance '" + instance_id + "'");
  if (it->state == FiredState::answered) throw AlreadyAnswered("popup '" + instance_id + "' already answered");
  it->state = FiredState::answered;
  it->response_id = response_id;
  for (std::size_t i = 0; i < state.rules.size(); ++i) {
    if (state.rules[i].rule_id != it->rule_id) continue;
    const auto* periodic = std::get_if<Periodic>(&state.rules[i].condition);
    RuleRuntime& runtime = state.runtime[i];
    if (periodic != nullptr && runtime.anchor_ms) {
      runtime.last_boundary = std::max(runtime.last_boundary, boundary_index(*periodic, *runtime.anchor_ms, now_ms));
    }
  }
  return state;
}

ObserveResult pending_before_submission(TriggerState state, const std::string& task_id, TimestampMs now_ms) {
  for (std::size_t i = 0; i < state.rules.size(); ++i) {
    const TriggerRule& rule = state.rules[i];
    if (!std::holds_alternative<BeforeSubmission>(rule.condition) || !in_scope(rule, task_id)) continue;
    if (!state.runtime[i].submitted_tasks.insert(task_id).second) continue;
    create_instance(state, i, now_ms, "before_submission", task_id);
  }
  ObserveResult result;
  result.fired = pending_instances(state);
  result.state = std::move(state);
  return result;
}

std::vector<FiredTrigger> pending_instances(const TriggerState& state) {
  std::vector<FiredTrigger> out;
  std::copy_if(state.instances.begin(), state.instances.end(), std::back_inserter(out),
               [](const FiredTrigger& f) { return f.state == FiredState::pending; });
  return out;
}

const FiredTrigger* find_instance(const TriggerState& state, const std::string& instance_id) {
  auto it = std::find_if(state.instances.begin(), state.instances.end(),
                         [&](const FiredTrigger& f) { return f.instance_id == instance_id; });
  return it == state.instances.end() ? nullptr : &*it;
}

json fired_to_json(const FiredTrigger& fired) {
  json out{{"instance_id", fired.instance_id},
           {"rule_id", fired.rule_id},
           {"survey_id", fired.survey_id},
           {"fired_at", fired.fired_at},
           {"cause", fired.cause},
           {"state", fired.state == FiredState::pending ? "pending" : "answered"}};
  out["task_id"] = fired.task_id ? json(*fired.task_id) : json(nullptr);
  out["response_id"] = fired.response_id ? json(*fired.response_id) : json(nullptr);
  return out;
}

json trigger_state_to_json(const TriggerState& state) {
  json out;
  out["rules"] = json::array();
  for (const auto& rule : state.rules) out["rules"].push_back(trigger_rule_to_json(rule));
  out["runtime"] = json::array();
  for (const auto& r : state.runtime) {
    out["runtime"].push_back({{"count", r.count},
                              {"anchor_ms", r.anchor_ms ? json(*r.anchor_ms) : json(nullptr)},
                              {"last_boundary", r.last_boundary},
                              {"submitted_tasks", r.submitted_tasks},
                              {"instances_created", r.instances_created}});
  }
  out["instances"] = json::array();
  for (const auto& f : state.instances) out["instances"].push_back(fired_to_json(f));
  out["active_task"] = state.active_task ? json(*state.active_task) : json(nullptr);
  return out;
}

TriggerState trigger_state_from_json(const json& doc) {
  TriggerState state;
  for (const auto& rule : doc.at("rules")) state.rules.push_back(trigger_rule_from_json(rule));
  for (const auto& r : doc.at("runtime")) {
    RuleRuntime runtime;
    runtime.count = r.at("count").get<std::uint64_t>();
    if (!r.at("anchor_ms").is_null()) runtime.anchor_ms = r.at("anchor_ms").get<TimestampMs>();
    runtime.last_boundary = r.at("last_boundary").get<std::int64_t>();
    runtime.submitted_tasks = r.at("submitted_tasks").get<std::set<std::string>>();
    runtime.instances_created = r.at("instances_created").get<std::uint64_t>();
    state.runtime.push_back(std::move(runtime));
  }
  for (const auto& f : doc.at("instances")) {
    FiredTrigger fired;
    fired.instance_id = f.at("instance_id").get<std::string>();
    fired.rule_id = f.at("rule_id").get<std::string>();
    fired.survey_id = f.at("survey_id").get<std::string>();
    if (!f.at("task_id").is_null()) fired.task_id = f.at("task_id").get<std::string>();
    fired.fired_at = f.at("fired_at").get<TimestampMs>();
    fired.cause = f.at("cause").get<std::string>();
    fired.state = f.at("state").get<std::string>() == "pending" ? FiredState::pending : FiredState::answered;
    if (!f.at("response_id").is_null()) fired.response_id = f.at("response_id").get<std::string>();
    state.instances.push_back(std::move(fired));
  }
  if (!doc.at("active_task").is_null()) state.active_task = doc.at("active_task").get<std::string>();
  return state;
}

}  // namespace studyflow
