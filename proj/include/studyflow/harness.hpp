#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "studyflow/clock.hpp"
#include "studyflow/domain.hpp"
#include "studyflow/error.hpp"

namespace httplib {
class Client;
}

namespace studyflow {

// ---------------------------------------------------------------------------
// HTTP client for the service API

struct ApiResult {
  int status = 0;
  nlohmann::json body;
  /// Raw body, kept for non-JSON payloads (CSV, ZIP).
  std::string raw;
  bool ok() const { return status >= 200 && status < 300; }
};

/// Frames of one chat stream in arrival order.
struct ChatStream {
  int status = 0;
  /// Parsed `data:` payloads; the last one is the terminal frame when the
  /// stream ended normally.
  std::vector<nlohmann::json> frames;
  /// Error body when the request was refused before streaming began.
  nlohmann::json error;
  bool ok() const { return status == 200; }
  const nlohmann::json* terminal() const;
  std::string concatenated_text() const;
};

class ApiClient {
 public:
  /// `base_url` like "http://127.0.0.1:8080". Throws ServiceError on a
  /// malformed URL.
  explicit ApiClient(const std::string& base_url);
  ~ApiClient();
  ApiClient(ApiClient&&) noexcept;
  ApiClient& operator=(ApiClient&&) noexcept;

  void set_token(std::string token) { token_ = std::move(token); }
  const std::string& token() const { return token_; }

  /// Throws ServiceError when the connection fails; HTTP errors are returned.
  ApiResult get(const std::string& path) const;
  ApiResult post(const std::string& path, const nlohmann::json& body) const;
  ApiResult put(const std::string& path, const nlohmann::json& body) const;
  ApiResult patch(const std::string& path, const nlohmann::json& body) const;
  ApiResult del(const std::string& path) const;
  /// Sends a raw body with the given content type.
  ApiResult send_raw(const std::string& method, const std::string& path, const std::string& body,
                     const std::string& content_type) const;
  ChatStream chat(const nlohmann::json& body) const;

  /// Logs in, or performs first-run setup when no admin exists. Stores the
  /// token on success.
  void admin_session(const std::string& username, const std::string& password);

 private:
  std::unique_ptr<httplib::Client> http_;
  std::string token_;
};

/// Parses RFC 4180 text into records, header included.
std::vector<std::vector<std::string>> csv_decode(std::string_view text);

// ---------------------------------------------------------------------------
// Behavior scripts

/// One line of a script file: a JSON object with an "action" member and the
/// action's arguments. An optional "expect" member states what the service
/// must answer: {status, error, reason, popups, completed}.
struct ScriptAction {
  std::string action;
  nlohmann::json args = nlohmann::json::object();
  std::optional<nlohmann::json> expect;
};

/// Parses line-delimited action records; blank lines and lines starting with
/// '#' are skipped. Throws ScriptTypeError naming the offending line.
std::vector<ScriptAction> parse_script(std::string_view text);
std::vector<ScriptAction> load_script(const std::string& path);

/// Checks one action's argument types. Throws ScriptTypeError.
void check_action(const ScriptAction& action);

/// Answers an automated participant gives: attention checks get their
/// expected answer, Likert the midpoint, multiple choice the first option,
/// open questions "ok". Entries of `overrides` replace the defaults.
nlohmann::json auto_answers(const SurveyInstrument& survey, const nlohmann::json& overrides = nlohmann::json::object());

struct ActionRecord {
  std::size_t index = 0;
  std::string action;
  nlohmann::json request;
  int status = 0;
  nlohmann::json response;
  /// Popup descriptors delivered with this response.
  nlohmann::json popups = nlohmann::json::array();
  bool ok = true;
  std::string problem;
};

struct TranscriptCounts {
  std::int64_t turns = 0;
  std::int64_t queries = 0;
  std::int64_t clicks = 0;
  std::int64_t popups_answered = 0;
  bool operator==(const TranscriptCounts&) const = default;
};

struct ExportDiff {
  bool checked = false;
  TranscriptCounts exported;
  std::vector<std::string> mismatches;
};

struct SessionTranscript {
  std::string study_id;
  std::string participant_id;
  std::string session_id;
  std::vector<ActionRecord> actions;
  TranscriptCounts counts;
  bool completed = false;
  std::optional<TimestampMs> completed_at;
  ExportDiff export_diff;
  /// Unexpected service answers and expectation mismatches.
  std::vector<std::string> failures;

  bool ok() const { return failures.empty() && export_diff.mismatches.empty(); }
  nlohmann::json to_json() const;
};

struct HarnessOptions {
  /// Admin token used to read the invite code and the export. Without it the
  /// export comparison is skipped and `invite_code` must be set.
  std::string admin_token;
  std::string invite_code;
  std::string external_label;
  /// Drive `wait` through the service's test clock instead of sleeping.
  bool virtual_clock = false;
  bool compare_export = true;
};

/// Registers a participant and replays `script` against the service at
/// `endpoint`. Throws ScriptTypeError before sending anything when an action
/// is malformed, and ServiceError when the service cannot be reached or
/// registration fails.
SessionTranscript run_script(const std::string& endpoint, const std::string& study_id,
                             const std::vector<ScriptAction>& script, const HarnessOptions& options);

/// Counts the session's rows in an export and compares them with the
/// transcript's counts.
ExportDiff diff_export(const SessionTranscript& transcript, const std::string& chat_history_csv,
                       const std::string& search_log_csv, const std::string& in_situ_csv);

}  // namespace studyflow
