#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "studyflow/clock.hpp"
#include "studyflow/events.hpp"
#include "studyflow/storage.hpp"

namespace studyflow {

// ---------------------------------------------------------------------------
// Materialized views. Each is a pure fold over a session timeline.

enum class TurnStatus { streaming, complete, failed, cancelled };

std::string_view to_string(TurnStatus status);

struct ChatTurn {
  std::string turn_id;
  std::string task_id;
  std::int64_t turn_index = 0;
  std::string prompt_text;
  TimestampMs typing_start_ms = 0;
  TimestampMs typing_end_ms = 0;
  TimestampMs submitted_ms = 0;
  std::string response_text;
  std::optional<TimestampMs> response_completed_ms;
  std::optional<std::int64_t> turn_rating;
  TurnStatus status = TurnStatus::streaming;
  std::size_t chunk_count = 0;
  bool operator==(const ChatTurn&) const = default;
};

struct SerpEntry {
  std::int64_t rank = 0;
  std::string title;
  std::string url;
  std::string snippet;
  bool operator==(const SerpEntry&) const = default;
};

struct ClickRecord {
  std::string url;
  std::int64_t rank = 0;
  TimestampMs clicked_ms = 0;
  bool operator==(const ClickRecord&) const = default;
};

struct SearchQueryRecord {
  std::string query_id;
  std::string task_id;
  std::string query_text;
  TimestampMs typing_start_ms = 0;
  TimestampMs typing_end_ms = 0;
  TimestampMs issued_ms = 0;
  std::int64_t result_count = 0;
  std::vector<SerpEntry> serp;
  std::vector<ClickRecord> clicks;
  bool operator==(const SearchQueryRecord&) const = default;
};

struct NoteRecord {
  std::string session_id;
  std::string task_id;
  std::string text;
  TimestampMs updated_ms = 0;
  bool operator==(const NoteRecord&) const = default;
};

std::vector<ChatTurn> fold_chat_turns(std::span<const InteractionEvent> timeline);
std::vector<SearchQueryRecord> fold_search_queries(std::span<const InteractionEvent> timeline);
/// Latest note per task, ordered by task id.
std::vector<NoteRecord> fold_notes(std::span<const InteractionEvent> timeline);
/// Latest trajectory rating per task.
std::map<std::string, std::int64_t> fold_trajectory_ratings(std::span<const InteractionEvent> timeline);
/// Turns and queries whose client typing timestamps are out of order. These are
/// recorded, never rejected.
std::vector<std::string> timestamp_warnings(std::span<const InteractionEvent> timeline);

std::vector<SerpEntry> serp_from_json(const nlohmann::json& serp);
nlohmann::json serp_to_json(std::span<const SerpEntry> serp);

// ---------------------------------------------------------------------------
// Append-only store of interaction events, one stream per study
// ("<study_id>/events"). Sequence numbers are per session, dense from 1.

struct InteractionCounts {
  std::uint64_t prompts = 0;
  std::uint64_t responses = 0;
  std::uint64_t queries = 0;
  bool operator==(const InteractionCounts&) const = default;
};

class InteractionLog {
 public:
  InteractionLog(Store& store, const Clock& clock);
  ~InteractionLog();

  InteractionLog(const InteractionLog&) = delete;
  InteractionLog& operator=(const InteractionLog&) = delete;

  /// Rebuilds in-memory state for every session of the study from storage.
  /// Idempotent.
  void load_study(const std::string& study_id);

  /// Appends the session_started event and opens the session for appends.
  InteractionEvent begin_session(const std::string& study_id, const std::string& session_id,
                                 const std::string& participant_id, TimestampMs client_ts);

  /// Validates and durably appends one event. A session_completed event closes
  /// the session. Throws UnknownSession, SessionClosed, PayloadInvalid,
  /// OutOfOrderTurn, UnknownTurn, UnknownTask.
  InteractionEvent append_event(const std::string& session_id, EventKind kind,
                                nlohmann::json payload, TimestampMs client_ts);

  /// Throws UnknownTurn, ResponseNotComplete.
  ChatTurn rate_turn(const std::string& session_id, const std::string& turn_id,
                     std::int64_t rating, TimestampMs client_ts);

  /// Throws UnknownTask when the task was never started in this session.
  std::int64_t rate_trajectory(const std::string& session_id, const std::string& task_id,
                               std::int64_t rating, TimestampMs client_ts);

  /// Throws UnknownSession.
  std::vector<InteractionEvent> session_timeline(const std::string& session_id) const;

  bool has_session(const std::string& session_id) const;
  bool is_open(const std::string& session_id) const;
  std::vector<std::string> sessions_of(const std::string& study_id) const;

  InteractionCounts counts(const std::string& session_id, const std::string& task_id) const;
  InteractionCounts total_counts(const std::string& session_id) const;
  /// Serp snapshot stored with the query, if any.
  std::optional<SearchQueryRecord> find_query(const std::string& session_id,
                                              const std::string& query_id) const;
  std::optional<ChatTurn> find_turn(const std::string& session_id, const std::string& turn_id) const;

 private:
  struct SessionLog;
  struct StudyLog;

  StudyLog& study(const std::string& study_id);
  StudyLog* study_of_session(const std::string& session_id) const;
  InteractionEvent append_locked(StudyLog& study, SessionLog& session, EventKind kind,
                                 nlohmann::json payload, TimestampMs client_ts);

  Store& store_;
  const Clock& clock_;
  mutable std::mutex registry_mutex_;
  std::map<std::string, std::unique_ptr<StudyLog>> studies_;
  std::map<std::string, StudyLog*> session_index_;
};

}  // namespace studyflow
