#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "studyflow/clock.hpp"
#include "studyflow/domain.hpp"
#include "studyflow/error.hpp"
#include "studyflow/export.hpp"
#include "studyflow/flow_engine.hpp"
#include "studyflow/interaction_log.hpp"
#include "studyflow/providers.hpp"
#include "studyflow/storage.hpp"
#include "studyflow/trigger_engine.hpp"

namespace studyflow {

/// Rejected study write; carries the validation report.
class ValidationFailed : public Error {
 public:
  explicit ValidationFailed(ValidationReport report)
      : Error("invalid_config", "study configuration has errors"), report_(std::move(report)) {}
  const ValidationReport& report() const noexcept { return report_; }

 private:
  ValidationReport report_;
};

enum class PrincipalKind { admin, participant };

struct Principal {
  PrincipalKind kind = PrincipalKind::admin;
  /// Admin username, or participant id.
  std::string id;
  std::string study_id;    // participants only
  std::string session_id;  // participants only
};

struct ServiceOptions {
  std::chrono::milliseconds token_ttl{12LL * 60 * 60 * 1000};
  /// Requests one bearer token may make before it must be renewed.
  std::uint64_t token_request_cap = 100000;
  /// Enables the virtual-clock endpoints.
  bool test_mode = false;
};

/// Everything a participant's session consists of at runtime: the configuration
/// snapshot taken at registration, the flow position and the trigger state.
/// The last two are a pure fold of the session's events over the snapshot.
struct SessionRuntime {
  StudyConfig config;
  ParticipantSession flow;
  TriggerState triggers;
};

/// Applies one logged event to the runtime and returns the popup instances it
/// created. Used both live and when rebuilding after a restart.
std::vector<FiredTrigger> apply_event(SessionRuntime& runtime, const InteractionEvent& event);

/// Popup descriptor delivered to the participant: the instance plus the
/// survey to show.
nlohmann::json popup_descriptor(const StudyConfig& config, const FiredTrigger& fired);

/// Receives each SSE payload of a chat stream; returning false cancels.
using FrameSink = std::function<bool(const nlohmann::json& frame)>;

/// A chat turn whose prompt has been logged and whose reply is not yet
/// streamed. Holds the session lock until destroyed; if it is destroyed
/// before `stream` runs, the turn is logged as cancelled.
class ChatExchange {
 public:
  ~ChatExchange();
  ChatExchange(const ChatExchange&) = delete;
  ChatExchange& operator=(const ChatExchange&) = delete;

  const std::string& turn_id() const { return turn_id_; }
  const nlohmann::json& prompt_event() const { return prompt_event_; }

  /// Streams `{chunk_index, text}` frames, then one terminal frame: either
  /// `{final: true, turn_id, chunk_count, popups: [...]}` or
  /// `{final: true, error: {code, message}, partial_text}`.
  void stream(const FrameSink& sink);

 private:
  friend class StudyService;
  ChatExchange() = default;

  class StudyService* service_ = nullptr;
  std::unique_lock<std::mutex> lock_;
  SessionRuntime* runtime_ = nullptr;
  std::vector<ChatMessage> history_;
  std::string turn_id_;
  nlohmann::json prompt_event_;
  std::vector<FiredTrigger> fired_on_prompt_;
  bool done_ = false;
};

/// Business logic behind the HTTP API. Thread-safe; mutations of one session
/// are serialized by a per-session lock.
class StudyService {
 public:
  StudyService(Store& store, const Clock& clock, CredentialStore& credentials, const ProviderGateway& gateway,
               ServiceOptions options = {});
  ~StudyService();

  const ServiceOptions& options() const { return options_; }
  const Clock& clock() const { return clock_; }
  InteractionLog& log() { return log_; }
  CredentialStore& credentials() { return credentials_; }
  const ProviderGateway& gateway() const { return gateway_; }

  // -- authentication -------------------------------------------------------
  bool setup_required() const;
  /// Creates the first admin account. Throws Conflict once any admin exists.
  std::string setup_admin(const std::string& username, const std::string& password);
  std::string admin_login(const std::string& username, const std::string& password);
  /// Resolves a bearer token and counts the request against its cap. Throws
  /// Unauthorized or RateLimited.
  Principal authenticate(const std::string& token);

  // -- studies --------------------------------------------------------------
  std::vector<std::string> list_studies() const;
  /// Stores a new study. Throws ValidationFailed, Conflict.
  StudyConfig create_study(const StudyConfig& config);
  StudyConfig get_study(const std::string& study_id) const;
  /// Replaces the configuration. Running sessions keep their snapshot.
  StudyConfig update_study(const StudyConfig& config);
  /// Read-modify-write helper used by the fine-grained admin endpoints.
  StudyConfig modify_study(const std::string& study_id, const std::function<void(StudyConfig&)>& edit);
  /// Refused with Conflict while the study has participants.
  void delete_study(const std::string& study_id);
  std::string invite_code(const std::string& study_id) const;
  std::string rotate_invite_code(const std::string& study_id);
  /// Stored survey responses (step questionnaires and popups), oldest first.
  std::vector<nlohmann::json> list_responses(const std::string& study_id) const;
  /// Progress of every session in the study.
  std::vector<nlohmann::json> list_sessions(const std::string& study_id);
  std::vector<InteractionEvent> timeline(const std::string& study_id, const std::string& session_id);
  ExportBundle export_bundle(const std::string& study_id) const;

  // -- participants ---------------------------------------------------------
  struct Registration {
    std::string participant_id;
    std::string access_key;
    std::string session_id;
    std::string token;
  };
  Registration register_participant(const std::string& study_id, const std::string& invite_code,
                                     const std::string& external_label, TimestampMs client_ts);
  Registration participant_login(const std::string& study_id, const std::string& participant_id,
                                 const std::string& access_key);

  /// Current step descriptor, reminders, pending popups and counts.
  nlohmann::json state(const Principal& who);
  nlohmann::json submit_consent(const Principal& who, const std::vector<bool>& checked, TimestampMs client_ts);
  nlohmann::json submit_survey(const Principal& who, const std::map<std::string, AnswerValue>& answers,
                               TimestampMs client_ts);
  nlohmann::json submit_task(const Principal& who, const std::optional<std::string>& final_note,
                             TimestampMs client_ts);

  struct ChatRequest {
    std::string prompt;
    TimestampMs typing_start_ms = 0;
    TimestampMs typing_end_ms = 0;
    TimestampMs client_ts = 0;
  };
  /// Logs the prompt and returns the exchange that streams the reply. Throws
  /// WrongStep when the current step is not a chat task.
  std::unique_ptr<ChatExchange> begin_chat(const Principal& who, const ChatRequest& request);

  struct SearchRequest {
    std::string query;
    TimestampMs typing_start_ms = 0;
    TimestampMs typing_end_ms = 0;
    TimestampMs client_ts = 0;
  };
  nlohmann::json search(const Principal& who, const SearchRequest& request);
  /// A click not matching the stored result page is logged as rejected and
  /// then reported with PayloadInvalid.
  nlohmann::json click(const Principal& who, const std::string& query_id, std::int64_t rank, const std::string& url,
                       TimestampMs clicked_ms, TimestampMs client_ts);
  nlohmann::json rate_turn(const Principal& who, const std::string& turn_id, std::int64_t rating,
                           TimestampMs client_ts);
  nlohmann::json rate_trajectory(const Principal& who, const std::optional<std::string>& task_id,
                                 std::int64_t rating, TimestampMs client_ts);
  nlohmann::json save_note(const Principal& who, const std::string& text, TimestampMs client_ts);
  nlohmann::json answer_popup(const Principal& who, const std::string& instance_id,
                              const std::map<std::string, AnswerValue>& answers, TimestampMs client_ts);
  nlohmann::json pending_popups(const Principal& who);

  /// Lets periodic rules of every open session observe the current time.
  void tick_all();

 private:
  friend class ChatExchange;
  struct SessionSlot;
  struct TokenInfo;

  struct StudyRecord {
    StudyConfig config;
    std::string invite_code;
    std::uint64_t version = 0;
  };
  std::optional<StudyRecord> load_study_record(const std::string& study_id) const;
  void save_study_record(const StudyRecord& record, std::uint64_t expected_version);
  std::string issue_token(Principal principal);

  SessionSlot& slot(const std::string& session_id);
  /// Locks the session, loads it if needed and observes a clock tick.
  std::pair<std::unique_lock<std::mutex>, SessionRuntime*> open_session(const Principal& who);

  InteractionEvent append(SessionRuntime& runtime, EventKind kind, nlohmann::json payload, TimestampMs client_ts,
                          std::vector<FiredTrigger>* fired = nullptr);
  std::vector<FiredTrigger> tick(SessionRuntime& runtime);
  void log_fired(SessionRuntime& runtime, const std::vector<FiredTrigger>& fired);
  nlohmann::json popups_json(const SessionRuntime& runtime, const std::vector<FiredTrigger>& fired) const;
  const TaskDef& current_task(const SessionRuntime& runtime, Modality modality) const;
  void after_step_completed(SessionRuntime& runtime);
  nlohmann::json state_locked(const SessionRuntime& runtime) const;
  std::string store_response(const SessionRuntime& runtime, const nlohmann::json& body);

  Store& store_;
  const Clock& clock_;
  CredentialStore& credentials_;
  const ProviderGateway& gateway_;
  ServiceOptions options_;
  InteractionLog log_;

  mutable std::mutex setup_mutex_;
  mutable std::mutex tokens_mutex_;
  std::map<std::string, std::unique_ptr<TokenInfo>> tokens_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::unique_ptr<SessionSlot>> sessions_;
  mutable std::mutex studies_mutex_;
};

std::string_view to_string(PrincipalKind kind);

}  // namespace studyflow
