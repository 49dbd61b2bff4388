#include <gtest/gtest.h>

#include "studyflow/error.hpp"
#include "studyflow/trigger_engine.hpp"

using namespace studyflow;

namespace {

TriggerRule rule(std::string id, TriggerCondition condition, TriggerRepeat repeat = TriggerRepeat::once,
                 std::optional<std::string> scope = std::nullopt) {
  TriggerRule r;
  r.rule_id = std::move(id);
  r.survey_id = "pop";
  r.condition = condition;
  r.repeat = repeat;
  r.scope_task_id = std::move(scope);
  return r;
}

InteractionEvent event(EventKind kind, int seq, TimestampMs at, const std::string& task = "t") {
  InteractionEvent e;
  e.session_id = "s";
  e.seq = static_cast<std::uint64_t>(seq);
  e.event_id = "s:" + std::to_string(seq);
  e.kind = kind;
  e.payload = {{"task_id", task}};
  e.server_ts = at;
  return e;
}

std::vector<FiredTrigger> feed(TriggerState& state, const InteractionEvent& e) {
  auto r = observe(std::move(state), e);
  state = std::move(r.state);
  return r.fired;
}

std::vector<FiredTrigger> tick(TriggerState& state, TimestampMs at) {
  auto r = observe(std::move(state), ClockTick{at});
  state = std::move(r.state);
  return r.fired;
}

}  // namespace

TEST(Triggers, AfterTwoPromptsOnceFiresAtSecond) {
  TriggerState state = make_trigger_state({rule("r", AfterNPrompts{2})});
  EXPECT_TRUE(feed(state, event(EventKind::prompt, 1, 0)).empty());
  auto fired = feed(state, event(EventKind::prompt, 2, 0));
  ASSERT_EQ(fired.size(), 1u);
  EXPECT_EQ(fired[0].cause, "s:2");
  EXPECT_EQ(fired[0].state, FiredState::pending);
  EXPECT_TRUE(feed(state, event(EventKind::prompt, 3, 0)).empty());
  EXPECT_EQ(state.instances.size(), 1u);
}

TEST(Triggers, EveryQueryFiresThreeTimes) {
  TriggerState state = make_trigger_state({rule("r", AfterNQueries{1}, TriggerRepeat::every_multiple)});
  int fired = 0;
  for (int i = 1; i <= 3; ++i) fired += static_cast<int>(feed(state, event(EventKind::query, i, 0)).size());
  EXPECT_EQ(fired, 3);
}

TEST(Triggers, NoRulesNeverFire) {
  TriggerState state = make_trigger_state({});
  EXPECT_TRUE(feed(state, event(EventKind::prompt, 1, 0)).empty());
  EXPECT_TRUE(tick(state, 1'000'000).empty());
}

TEST(Triggers, SimultaneousFiringsInDeclarationOrder) {
  TriggerState state = make_trigger_state(
      {rule("b", AfterNResponses{1}), rule("a", AfterNResponses{1}, TriggerRepeat::every_multiple)});
  auto fired = feed(state, event(EventKind::response_complete, 1, 0));
  ASSERT_EQ(fired.size(), 2u);
  EXPECT_EQ(fired[0].rule_id, "b");
  EXPECT_EQ(fired[1].rule_id, "a");
}

TEST(Triggers, ScopeLimitsCounting) {
  TriggerState state = make_trigger_state({rule("r", AfterNPrompts{2}, TriggerRepeat::once, "t2")});
  feed(state, event(EventKind::prompt, 1, 0, "t1"));
  feed(state, event(EventKind::prompt, 2, 0, "t1"));
  EXPECT_TRUE(state.instances.empty());
  feed(state, event(EventKind::prompt, 3, 0, "t2"));
  EXPECT_EQ(feed(state, event(EventKind::prompt, 4, 0, "t2")).size(), 1u);
}

TEST(Triggers, AcknowledgeLifecycle) {
  TriggerState state = make_trigger_state({rule("r", AfterNPrompts{1})});
  const auto fired = feed(state, event(EventKind::prompt, 1, 0));
  state = acknowledge(state, fired[0].instance_id, "resp-1", 5);
  EXPECT_EQ(find_instance(state, fired[0].instance_id)->state, FiredState::answered);
  EXPECT_EQ(find_instance(state, fired[0].instance_id)->response_id, "resp-1");
  EXPECT_THROW(acknowledge(state, fired[0].instance_id, "resp-2", 6), AlreadyAnswered);
  EXPECT_THROW(acknowledge(state, "ghost", "resp-2", 6), UnknownInstance);
}

TEST(Triggers, PeriodicAnswerDoesNotBackfill) {
  TriggerState state = make_trigger_state({rule("p", Periodic{60})});
  feed(state, event(EventKind::task_started, 1, 0));
  EXPECT_TRUE(tick(state, 59'999).empty());
  auto first = tick(state, 60'000);
  ASSERT_EQ(first.size(), 1u);
  // Boundary 120 s passes while the popup is pending: suppressed, not queued.
  EXPECT_TRUE(tick(state, 121'000).empty());
  state = acknowledge(state, first[0].instance_id, "r", 130'000);
  EXPECT_TRUE(tick(state, 130'000).empty());
  EXPECT_TRUE(tick(state, 179'999).empty());
  auto next = tick(state, 180'000);
  ASSERT_EQ(next.size(), 1u);
  EXPECT_EQ(next[0].fired_at, 180'000);
  EXPECT_EQ(next[0].cause, "tick");
}

TEST(Triggers, PeriodicStopsAtSubmission) {
  TriggerState state = make_trigger_state({rule("p", Periodic{1})});
  feed(state, event(EventKind::task_started, 1, 0));
  feed(state, event(EventKind::task_submitted, 2, 500));
  EXPECT_TRUE(tick(state, 10'000).empty());
}

TEST(Triggers, BeforeSubmissionIsIdempotent) {
  TriggerState state = make_trigger_state({rule("b", BeforeSubmission{})});
  auto first = pending_before_submission(state, "t", 10);
  ASSERT_EQ(first.fired.size(), 1u);
  auto second = pending_before_submission(first.state, "t", 20);
  ASSERT_EQ(second.fired.size(), 1u);
  EXPECT_EQ(second.fired[0].instance_id, first.fired[0].instance_id);
  EXPECT_EQ(second.state.instances.size(), 1u);
  const TriggerState answered = acknowledge(second.state, first.fired[0].instance_id, "r", 30);
  EXPECT_TRUE(pending_before_submission(answered, "t", 40).fired.empty());
}

TEST(Triggers, NothingPendingWithoutBeforeSubmissionRules) {
  TriggerState state = make_trigger_state({rule("r", AfterNPrompts{5})});
  EXPECT_TRUE(pending_before_submission(state, "t", 0).fired.empty());
}

TEST(Triggers, StateJsonRoundTrip) {
  TriggerState state = make_trigger_state({rule("p", Periodic{5}), rule("b", BeforeSubmission{}, TriggerRepeat::once, "t")});
  feed(state, event(EventKind::task_started, 1, 0));
  tick(state, 6000);
  state = pending_before_submission(state, "t", 7000).state;
  EXPECT_EQ(trigger_state_from_json(trigger_state_to_json(state)), state);
}
