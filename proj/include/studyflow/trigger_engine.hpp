#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "studyflow/clock.hpp"
#include "studyflow/domain.hpp"
#include "studyflow/events.hpp"

namespace studyflow {

/// Injected by the service (or the harness's virtual clock) into a session's
/// mutation stream. Periodic rules only advance on ticks.
struct ClockTick {
  TimestampMs now_ms = 0;
};

enum class FiredState { pending, answered };

struct FiredTrigger {
  /// "<rule_id>.<n>", n counting every instance the session has created.
  std::string instance_id;
  std::string rule_id;
  std::string survey_id;
  std::optional<std::string> task_id;
  TimestampMs fired_at = 0;
  /// Event id that crossed the threshold, "tick" or "before_submission".
  std::string cause;
  FiredState state = FiredState::pending;
  std::optional<std::string> response_id;
  bool operator==(const FiredTrigger&) const = default;
};

struct RuleRuntime {
  std::uint64_t count = 0;
  std::optional<TimestampMs> anchor_ms;
  std::int64_t last_boundary = 0;
  std::set<std::string> submitted_tasks;
  std::uint64_t instances_created = 0;
  bool operator==(const RuleRuntime&) const = default;
};

/// Per-session trigger state. Owned by the session's serialized mutation
/// stream; every operation below is a pure function of its inputs.
struct TriggerState {
  std::vector<TriggerRule> rules;
  std::vector<RuleRuntime> runtime;
  std::vector<FiredTrigger> instances;
  std::optional<std::string> active_task;
  bool operator==(const TriggerState&) const = default;
};

TriggerState make_trigger_state(std::vector<TriggerRule> rules);

struct ObserveResult {
  TriggerState state;
  /// New instances, in rule declaration order.
  std::vector<FiredTrigger> fired;
};

/// Counting rules fire on the event that brings their counter to n (once) or
/// to any multiple of n (every_multiple), regardless of other pending popups.
/// task_started anchors periodic rules; task_submitted stops them.
ObserveResult observe(TriggerState state, const InteractionEvent& event);

/// Periodic rules fire when a new interval boundary since the task start has
/// elapsed, unless their previous instance is still pending; a suppressed
/// boundary is dropped, not queued.
ObserveResult observe(TriggerState state, const ClockTick& tick);

/// Marks a pending instance answered. A periodic rule's next eligible
/// boundary is the first one after `now_ms`. Throws UnknownInstance or
/// AlreadyAnswered.
TriggerState acknowledge(TriggerState state, const std::string& instance_id,
                         const std::string& response_id, TimestampMs now_ms);

/// Materializes each not-yet-fired before-submission rule in scope for
/// `task_id` and returns every pending instance (`fired` holds them all).
/// Calling it again without answering returns the same instances.
ObserveResult pending_before_submission(TriggerState state, const std::string& task_id,
                                        TimestampMs now_ms);

std::vector<FiredTrigger> pending_instances(const TriggerState& state);
const FiredTrigger* find_instance(const TriggerState& state, const std::string& instance_id);

nlohmann::json fired_to_json(const FiredTrigger& fired);
nlohmann::json trigger_state_to_json(const TriggerState& state);
TriggerState trigger_state_from_json(const nlohmann::json& doc);

}  // namespace studyflow
