#include <gtest/gtest.h>

#include "studyflow/error.hpp"
#include "studyflow/interaction_log.hpp"

using namespace studyflow;
using nlohmann::json;

namespace {

struct LogFixture : ::testing::Test {
  MemoryStore store;
  VirtualClock clock{1000};
  InteractionLog log{store, clock};

  void SetUp() override {
    log.begin_session("st", "s1", "p1", 1000);
    log.append_event("s1", EventKind::task_started, {{"task_id", "t"}}, 1000);
  }

  void prompt(const std::string& turn, const std::string& text, TimestampMs start = 0, TimestampMs end = 0,
              TimestampMs submitted = 0) {
    log.append_event("s1", EventKind::prompt,
                     {{"task_id", "t"},
                      {"turn_id", turn},
                      {"text", text},
                      {"typing_start_ms", start},
                      {"typing_end_ms", end},
                      {"submitted_ms", submitted}},
                     submitted);
  }

  void reply(const std::string& turn, const std::vector<std::string>& chunks, bool complete = true) {
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      log.append_event("s1", EventKind::response_chunk,
                       {{"turn_id", turn}, {"chunk_index", i}, {"text", chunks[i]}}, 0);
    }
    log.append_event("s1", complete ? EventKind::response_complete : EventKind::response_error,
                     complete ? json{{"turn_id", turn}} : json{{"turn_id", turn}, {"error", "provider_unavailable"}}, 0);
  }

  json serp(int n) {
    json out = json::array();
    for (int i = 1; i <= n; ++i) {
      out.push_back({{"rank", i}, {"title", "T" + std::to_string(i)}, {"url", "https://x/" + std::to_string(i)},
                     {"snippet", ""}});
    }
    return out;
  }
};

}  // namespace

TEST_F(LogFixture, SequenceIsDenseAndIdsDerived) {
  prompt("turn-1", "hi");
  const auto timeline = log.session_timeline("s1");
  ASSERT_EQ(timeline.size(), 3u);
  for (std::size_t i = 0; i < timeline.size(); ++i) {
    EXPECT_EQ(timeline[i].seq, i + 1);
    EXPECT_EQ(timeline[i].event_id, "s1:" + std::to_string(i + 1));
  }
  EXPECT_EQ(timeline[2].payload.at("turn_index"), 1);
}

TEST_F(LogFixture, ServerTimestampsNeverDecrease) {
  clock.set_ms(5000);
  prompt("turn-1", "a");
  const auto timeline = log.session_timeline("s1");
  for (std::size_t i = 1; i < timeline.size(); ++i) EXPECT_GE(timeline[i].server_ts, timeline[i - 1].server_ts);
  EXPECT_EQ(timeline.back().server_ts, 5000);
}

TEST_F(LogFixture, ChunkBeforePromptIsOutOfOrder) {
  EXPECT_THROW(log.append_event("s1", EventKind::response_chunk,
                                {{"turn_id", "turn-9"}, {"chunk_index", 0}, {"text", "x"}}, 0),
               OutOfOrderTurn);
  prompt("turn-1", "a");
  EXPECT_THROW(log.append_event("s1", EventKind::response_chunk,
                                {{"turn_id", "turn-1"}, {"chunk_index", 1}, {"text", "x"}}, 0),
               OutOfOrderTurn);
  reply("turn-1", {"x"});
  EXPECT_THROW(log.append_event("s1", EventKind::response_complete, {{"turn_id", "turn-1"}}, 0), OutOfOrderTurn);
}

TEST_F(LogFixture, RatingRequiresCompletedTurn) {
  EXPECT_THROW(log.rate_turn("s1", "turn-1", 3, 0), UnknownTurn);
  prompt("turn-1", "a");
  EXPECT_THROW(log.rate_turn("s1", "turn-1", 3, 0), ResponseNotComplete);
  reply("turn-1", {"ok"});
  EXPECT_EQ(log.rate_turn("s1", "turn-1", 4, 0).turn_rating, 4);
}

TEST_F(LogFixture, PromptForUnstartedTaskIsRejected) {
  EXPECT_THROW(log.append_event("s1", EventKind::prompt,
                                {{"task_id", "other"},
                                 {"turn_id", "turn-1"},
                                 {"text", "a"},
                                 {"typing_start_ms", 0},
                                 {"typing_end_ms", 0},
                                 {"submitted_ms", 0}},
                                0),
               UnknownTask);
  EXPECT_THROW(log.rate_trajectory("s1", "other", 3, 0), UnknownTask);
}

TEST_F(LogFixture, ClicksMustMatchSnapshot) {
  log.append_event("s1", EventKind::query,
                   {{"task_id", "t"}, {"query_id", "query-1"}, {"text", "q"}, {"typing_start_ms", 0},
                    {"typing_end_ms", 0}, {"issued_ms", 0}, {"serp", serp(3)}},
                   0);
  log.append_event("s1", EventKind::click, {{"query_id", "query-1"}, {"rank", 2}, {"url", "https://x/2"}}, 0);
  EXPECT_THROW(log.append_event("s1", EventKind::click, {{"query_id", "query-1"}, {"rank", 4}, {"url", "https://x/4"}}, 0),
               PayloadInvalid);
  EXPECT_THROW(log.append_event("s1", EventKind::click, {{"query_id", "query-1"}, {"rank", 1}, {"url", "https://x/2"}}, 0),
               PayloadInvalid);
  EXPECT_THROW(log.append_event("s1", EventKind::click, {{"query_id", "query-9"}, {"rank", 1}, {"url", "https://x/1"}}, 0),
               PayloadInvalid);
}

TEST_F(LogFixture, CompletedSessionIsClosed) {
  log.append_event("s1", EventKind::session_completed, json::object(), 0);
  EXPECT_FALSE(log.is_open("s1"));
  EXPECT_THROW(log.append_event("s1", EventKind::note, {{"task_id", "t"}, {"text", "late"}}, 0), SessionClosed);
}

TEST_F(LogFixture, UnknownSession) {
  EXPECT_THROW(log.session_timeline("nope"), UnknownSession);
  EXPECT_THROW(log.append_event("nope", EventKind::note, {{"task_id", "t"}, {"text", "x"}}, 0), UnknownSession);
}

TEST_F(LogFixture, ChatTurnFoldConcatenatesChunks) {
  prompt("turn-1", "first", 10, 20, 30);
  reply("turn-1", {"he", "llo", " there"});
  prompt("turn-2", "second", 40, 50, 60);
  reply("turn-2", {"par", "tial"}, false);
  log.rate_turn("s1", "turn-1", 5, 0);
  const auto turns = fold_chat_turns(log.session_timeline("s1"));
  ASSERT_EQ(turns.size(), 2u);
  EXPECT_EQ(turns[0].response_text, "hello there");
  EXPECT_EQ(turns[0].status, TurnStatus::complete);
  EXPECT_EQ(turns[0].chunk_count, 3u);
  EXPECT_EQ(turns[0].turn_rating, 5);
  EXPECT_EQ(turns[0].typing_start_ms, 10);
  EXPECT_EQ(turns[0].submitted_ms, 30);
  EXPECT_EQ(turns[1].response_text, "partial");
  EXPECT_EQ(turns[1].status, TurnStatus::failed);
  EXPECT_EQ(turns[1].turn_index, 2);
}

TEST_F(LogFixture, SearchFoldAttachesClicks) {
  log.append_event("s1", EventKind::query,
                   {{"task_id", "t"}, {"query_id", "query-1"}, {"text", "q"}, {"typing_start_ms", 0},
                    {"typing_end_ms", 0}, {"issued_ms", 0}, {"serp", serp(2)}},
                   0);
  log.append_event("s1", EventKind::click, {{"query_id", "query-1"}, {"rank", 1}, {"url", "https://x/1"}, {"clicked_ms", 5}}, 0);
  log.append_event("s1", EventKind::click, {{"query_id", "query-1"}, {"rank", 2}, {"url", "https://x/2"}, {"clicked_ms", 6}}, 0);
  const auto queries = fold_search_queries(log.session_timeline("s1"));
  ASSERT_EQ(queries.size(), 1u);
  EXPECT_EQ(queries[0].result_count, 2);
  ASSERT_EQ(queries[0].clicks.size(), 2u);
  EXPECT_EQ(queries[0].clicks[1].url, "https://x/2");
  EXPECT_EQ(queries[0].clicks[1].clicked_ms, 6);
}

TEST_F(LogFixture, NotesKeepLatestPerTask) {
  log.append_event("s1", EventKind::note, {{"task_id", "t"}, {"text", "draft"}}, 0);
  clock.advance_ms(10);
  log.append_event("s1", EventKind::note, {{"task_id", "t"}, {"text", "final"}}, 0);
  const auto notes = fold_notes(log.session_timeline("s1"));
  ASSERT_EQ(notes.size(), 1u);
  EXPECT_EQ(notes[0].text, "final");
}

TEST_F(LogFixture, OutOfOrderTypingIsWarnedNotRejected) {
  prompt("turn-1", "x", 50, 20, 60);
  EXPECT_EQ(timestamp_warnings(log.session_timeline("s1")).size(), 1u);
}

TEST_F(LogFixture, CountsPerTask) {
  prompt("turn-1", "a");
  reply("turn-1", {"b"});
  prompt("turn-2", "c");
  EXPECT_EQ(log.counts("s1", "t"), (InteractionCounts{2, 1, 0}));
  EXPECT_EQ(log.total_counts("s1"), (InteractionCounts{2, 1, 0}));
}

TEST(InteractionLogReload, RebuildsFromStorage) {
  MemoryStore store;
  VirtualClock clock{1};
  std::vector<InteractionEvent> before;
  {
    InteractionLog log(store, clock);
    log.begin_session("st", "s1", "p1", 1);
    log.append_event("s1", EventKind::task_started, {{"task_id", "t"}}, 1);
    log.append_event("s1", EventKind::note, {{"task_id", "t"}, {"text", "n"}}, 1);
    before = log.session_timeline("s1");
  }
  InteractionLog log(store, clock);
  log.load_study("st");
  log.load_study("st");
  EXPECT_EQ(log.session_timeline("s1"), before);
  EXPECT_EQ(log.append_event("s1", EventKind::note, {{"task_id", "t"}, {"text", "m"}}, 1).seq, 4u);
}

TEST(EventJson, RoundTrip) {
  InteractionEvent e;
  e.event_id = "s:3";
  e.session_id = "s";
  e.seq = 3;
  e.kind = EventKind::click;
  e.payload = {{"query_id", "query-1"}, {"rank", 1}, {"url", "u"}};
  e.client_ts = 7;
  e.server_ts = 9;
  EXPECT_EQ(event_from_json(event_to_json(e)), e);
  EXPECT_THROW(event_from_json(json{{"kind", "bogus"}}), PayloadInvalid);
}
