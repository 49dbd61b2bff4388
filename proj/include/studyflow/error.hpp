#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace studyflow {

/// Base class for every failure the service reports. `code()` is the stable
/// machine-readable name that travels over the wire.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define STUDYFLOW_DEFINE_ERROR(Name, Code)                                   \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& message) : Error(Code, message) {}     \
  }

// domain-model
STUDYFLOW_DEFINE_ERROR(ParseError, "parse_error");
STUDYFLOW_DEFINE_ERROR(SchemaError, "schema_error");
STUDYFLOW_DEFINE_ERROR(BadPermutation, "bad_permutation");
STUDYFLOW_DEFINE_ERROR(InvalidConfig, "invalid_config");

// flow-engine
STUDYFLOW_DEFINE_ERROR(DuplicateSession, "duplicate_session");
STUDYFLOW_DEFINE_ERROR(StepMismatch, "step_mismatch");

// trigger-engine
STUDYFLOW_DEFINE_ERROR(UnknownInstance, "unknown_instance");
STUDYFLOW_DEFINE_ERROR(AlreadyAnswered, "already_answered");

// interaction-log
STUDYFLOW_DEFINE_ERROR(SessionClosed, "session_closed");
STUDYFLOW_DEFINE_ERROR(PayloadInvalid, "payload_invalid");
STUDYFLOW_DEFINE_ERROR(OutOfOrderTurn, "out_of_order_turn");
STUDYFLOW_DEFINE_ERROR(UnknownTurn, "unknown_turn");
STUDYFLOW_DEFINE_ERROR(ResponseNotComplete, "response_not_complete");
STUDYFLOW_DEFINE_ERROR(UnknownTask, "unknown_task");
STUDYFLOW_DEFINE_ERROR(UnknownSession, "unknown_session");

// provider-gateway
STUDYFLOW_DEFINE_ERROR(AuthError, "auth_error");
STUDYFLOW_DEFINE_ERROR(ProviderUnavailable, "provider_unavailable");
STUDYFLOW_DEFINE_ERROR(ContentError, "content_error");
STUDYFLOW_DEFINE_ERROR(PreconditionViolation, "precondition_violation");

// persistence
STUDYFLOW_DEFINE_ERROR(VersionConflict, "version_conflict");
STUDYFLOW_DEFINE_ERROR(StorageFailure, "storage_failure");

// export
STUDYFLOW_DEFINE_ERROR(UnknownStudy, "unknown_study");
STUDYFLOW_DEFINE_ERROR(WidthMismatch, "width_mismatch");

// http-api
STUDYFLOW_DEFINE_ERROR(WrongStep, "wrong_step");
STUDYFLOW_DEFINE_ERROR(Unauthorized, "unauthorized");
STUDYFLOW_DEFINE_ERROR(Forbidden, "forbidden");
STUDYFLOW_DEFINE_ERROR(NotFound, "not_found");
STUDYFLOW_DEFINE_ERROR(Conflict, "conflict");
STUDYFLOW_DEFINE_ERROR(BadRequest, "bad_request");
STUDYFLOW_DEFINE_ERROR(RateLimited, "rate_limited");
STUDYFLOW_DEFINE_ERROR(BindFailure, "bind_failure");

// headless-harness
STUDYFLOW_DEFINE_ERROR(ScriptTypeError, "script_type_error");
STUDYFLOW_DEFINE_ERROR(ServiceError, "service_error");

#undef STUDYFLOW_DEFINE_ERROR

enum class GateReason {
  consent_incomplete,
  missing_required,
  below_min_interactions,
  attention_failed,
  pending_trigger,
};

std::string_view to_string(GateReason reason);

/// Raised by the flow engine when a step completion does not satisfy its gate.
class GateError : public Error {
 public:
  GateError(GateReason reason, const std::string& message)
      : Error("gate_error", message), reason_(reason) {}

  GateReason reason() const noexcept { return reason_; }

 private:
  GateReason reason_;
};

}  // namespace studyflow
