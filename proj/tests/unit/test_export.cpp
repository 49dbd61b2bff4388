#include <gtest/gtest.h>

#include "studyflow/error.hpp"
#include "studyflow/export.hpp"
#include "studyflow/interaction_log.hpp"
#include "support.hpp"

using namespace studyflow;
using nlohmann::json;

TEST(Csv, QuotesOnlyWhenNeeded) {
  EXPECT_EQ(csv_encode({"a", "b"}, {{"1", "x"}}), "a,b\r\n1,x\r\n");
  EXPECT_EQ(csv_encode({"a"}, {{"x,y"}}), "a\r\n\"x,y\"\r\n");
  EXPECT_EQ(csv_encode({"a"}, {{"say \"hi\""}}), "a\r\n\"say \"\"hi\"\"\"\r\n");
  EXPECT_EQ(csv_encode({"a"}, {{"two\nlines"}}), "a\r\n\"two\nlines\"\r\n");
  EXPECT_EQ(csv_encode({"a", "b"}, {{"", ""}}), "a,b\r\n,\r\n");
}

TEST(Csv, WidthMismatch) {
  EXPECT_THROW(csv_encode({"a", "b"}, {{"1"}}), WidthMismatch);
  EXPECT_THROW(csv_encode({"a"}, {{"1"}, {"1", "2"}}), WidthMismatch);
}

TEST(Csv, PythonReadsBackEveryField) {
  const CsvRow header = {"id", "text"};
  const std::vector<CsvRow> rows = {{"1", "plain"},
                                    {"2", "comma, inside"},
                                    {"3", "\"quoted\" and \"\"doubled\"\""},
                                    {"4", "line one\nline two\r\nline three"},
                                    {"5", "\xe2\x9c\x93 unicode"},
                                    {"6", ""}};
  const auto parsed = testsupport::python_csv_rows(csv_encode(header, rows));
  ASSERT_EQ(parsed.size(), rows.size() + 1);
  EXPECT_EQ(parsed[0], header);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(parsed[i + 1], rows[i]);
}

TEST(Zip, PythonOpensArchiveAndChecksCrc) {
  const std::map<std::string, std::string> files = {{"a.csv", "x,y\r\n1,2\r\n"}, {"b.csv", ""}, {"c.txt", std::string(5000, 'z')}};
  const std::string zip = zip_store(files);
  EXPECT_EQ(testsupport::python_zip_entries(zip), files);
  EXPECT_EQ(zip_store(files), zip);
}

namespace {

struct ExportFixture : ::testing::Test {
  MemoryStore store;
  VirtualClock clock{1'700'000'000'000};
  InteractionLog log{store, clock};

  void SetUp() override { store.put({Collection::studies, study_key("st")}, "{}", 0); }

  void register_session(const std::string& participant, const std::string& session) {
    RegistrationRecord r{participant, session, "st", "prolific-" + participant, clock.now_ms()};
    store.put({Collection::sessions, registration_key("st", participant)}, registration_to_json(r).dump(), 0);
    log.begin_session("st", session, participant, 0);
  }
};

}  // namespace

TEST_F(ExportFixture, EmptyStudyHasHeadersOnly) {
  const ExportBundle bundle = export_study(store, "st");
  ASSERT_EQ(bundle.files.size(), std::size(kExportFiles));
  for (const auto name : kExportFiles) {
    const auto rows = testsupport::python_csv_rows(bundle.files.at(std::string(name)));
    EXPECT_EQ(rows.size(), 1u) << name;
  }
}

TEST_F(ExportFixture, UnknownStudy) { EXPECT_THROW(export_study(store, "missing"), UnknownStudy); }

TEST_F(ExportFixture, RowsFollowTheLog) {
  register_session("p1", "s1");
  register_session("p2", "s2");
  log.append_event("s1", EventKind::task_started, {{"task_id", "t"}}, 0);
  for (int i = 1; i <= 2; ++i) {
    const std::string turn = "turn-" + std::to_string(i);
    log.append_event("s1", EventKind::prompt,
                     {{"task_id", "t"}, {"turn_id", turn}, {"text", "q, \"" + std::to_string(i) + "\""},
                      {"typing_start_ms", 1}, {"typing_end_ms", 2}, {"submitted_ms", 3}},
                     3);
    log.append_event("s1", EventKind::response_chunk, {{"turn_id", turn}, {"chunk_index", 0}, {"text", "multi\nline"}}, 0);
    log.append_event("s1", EventKind::response_complete, {{"turn_id", turn}}, 0);
  }
  log.append_event("s2", EventKind::task_started, {{"task_id", "t"}}, 0);
  log.append_event("s2", EventKind::query,
                   {{"task_id", "t"}, {"query_id", "query-1"}, {"text", "bikes"}, {"typing_start_ms", 0},
                    {"typing_end_ms", 0}, {"issued_ms", 0},
                    {"serp", json::array({{{"rank", 1}, {"title", "A"}, {"url", "https://a"}, {"snippet", ""}},
                                          {{"rank", 2}, {"title", "B"}, {"url", "https://b"}, {"snippet", ""}}})}},
                   0);
  log.append_event("s2", EventKind::query,
                   {{"task_id", "t"}, {"query_id", "query-2"}, {"text", "cars"}, {"typing_start_ms", 0},
                    {"typing_end_ms", 0}, {"issued_ms", 0}, {"serp", json::array()}},
                   0);
  for (int rank : {1, 2}) {
    log.append_event("s2", EventKind::click,
                     {{"query_id", "query-1"}, {"rank", rank}, {"url", rank == 1 ? "https://a" : "https://b"}}, 0);
  }
  log.append_event("s2", EventKind::note, {{"task_id", "t"}, {"text", "n"}}, 0);

  const ExportBundle bundle = export_study(store, "st");
  const auto registration = testsupport::python_csv_rows(bundle.files.at("registration.csv"));
  ASSERT_EQ(registration.size(), 3u);
  EXPECT_EQ(registration[1][0], "p1");
  EXPECT_EQ(registration[1][3], "prolific-p1");
  EXPECT_EQ(registration[1][5], "2023-11-14T22:13:20.000Z");

  const auto chat = testsupport::python_csv_rows(bundle.files.at("chat_history.csv"));
  ASSERT_EQ(chat.size(), 3u);
  EXPECT_EQ(chat[1][5], "q, \"1\"");
  EXPECT_EQ(chat[1][9], "multi\nline");
  EXPECT_EQ(chat[2][4], "2");

  // One row per click, plus one for the query without clicks.
  const auto search = testsupport::python_csv_rows(bundle.files.at("search_log.csv"));
  ASSERT_EQ(search.size(), 4u);
  EXPECT_EQ(search[1][9], "https://a");
  EXPECT_EQ(search[2][9], "https://b");
  EXPECT_EQ(search[3][3], "query-2");
  EXPECT_EQ(search[3][9], "");
  EXPECT_EQ(search[3][8], "0");

  EXPECT_EQ(testsupport::python_csv_rows(bundle.files.at("notes.csv")).size(), 2u);
  // Same inputs give the same archive.
  EXPECT_EQ(zip_store(export_study(store, "st").files), zip_store(bundle.files));
}

TEST(Registration, JsonRoundTrip) {
  const RegistrationRecord r{"p", "s", "st", "label", 42};
  EXPECT_EQ(registration_from_json(registration_to_json(r)), r);
}
