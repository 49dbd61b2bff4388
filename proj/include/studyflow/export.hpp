#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "studyflow/clock.hpp"
#include "studyflow/domain.hpp"
#include "studyflow/events.hpp"
#include "studyflow/storage.hpp"

namespace studyflow {

using CsvRow = std::vector<std::string>;

/// RFC 4180 text: fields holding a comma, quote, CR or LF are quoted with
/// inner quotes doubled; every record (header included) ends in CRLF.
/// Throws WidthMismatch when a row's width differs from the header's.
std::string csv_encode(const CsvRow& header, const std::vector<CsvRow>& rows);

/// Stored (uncompressed) ZIP archive of `files`, in map order, with a fixed
/// timestamp so equal inputs give equal bytes.
std::string zip_store(const std::map<std::string, std::string>& files);

/// Participant registration as persisted by the service in the sessions
/// collection under "<study_id>/participant.<participant_id>".
struct RegistrationRecord {
  std::string participant_id;
  std::string session_id;
  std::string study_id;
  /// Recruitment-platform id supplied at registration, if any.
  std::string external_label;
  TimestampMs registered_ms = 0;
  bool operator==(const RegistrationRecord&) const = default;
};

nlohmann::json registration_to_json(const RegistrationRecord& record);
RegistrationRecord registration_from_json(const nlohmann::json& doc);
std::string registration_key(const std::string& study_id, const std::string& participant_id);

inline constexpr std::string_view kExportFiles[] = {
    "registration.csv", "demographics.csv", "pre_task.csv",  "post_task.csv",
    "chat_history.csv", "search_log.csv",   "in_situ.csv",   "notes.csv",
};

/// Everything an export reads, captured at one point in time.
struct ExportSnapshot {
  std::string study_id;
  std::vector<RegistrationRecord> registrations;
  /// Events of every session in the study, any order.
  std::vector<InteractionEvent> events;
};

struct ExportBundle {
  /// Exactly the eight names in kExportFiles.
  std::map<std::string, std::string> files;
};

/// Pure transformation of a snapshot. Rows are ordered by session id, then by
/// the sequence number of the event that created them.
ExportBundle build_export(const ExportSnapshot& snapshot);

/// Reads the study's registrations and event stream from `store`. Throws
/// UnknownStudy when no study document "<study_id>/config" exists.
ExportSnapshot load_export_snapshot(const Store& store, const std::string& study_id);

ExportBundle export_study(const Store& store, const std::string& study_id);

/// Key of the study configuration document in the studies collection.
std::string study_key(const std::string& study_id);
/// Stream holding every event of the study.
std::string events_stream(const std::string& study_id);

}  // namespace studyflow
