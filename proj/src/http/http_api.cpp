#include "studyflow/http_api.hpp"

#include <cstdlib>
#include <functional>

#include "httplib.h"
#include "studyflow/domain_json.hpp"
#include "studyflow/export.hpp"
#include "studyflow/sse.hpp"

namespace studyflow {

using nlohmann::json;

int http_status(const Error& error) {
  const std::string& code = error.code();
  if (code == "unauthorized") return 401;
  if (code == "forbidden") return 403;
  if (code == "not_found" || code == "unknown_study" || code == "unknown_session" || code == "unknown_task" ||
      code == "unknown_turn" || code == "unknown_instance") {
    return 404;
  }
  if (code == "conflict" || code == "duplicate_session" || code == "version_conflict" ||
      code == "already_answered" || code == "wrong_step" || code == "step_mismatch" || code == "session_closed" ||
      code == "out_of_order_turn" || code == "response_not_complete" || code == "gate_error") {
    return 409;
  }
  if (code == "invalid_config") return 422;
  if (code == "rate_limited") return 429;
  if (code == "auth_error" || code == "content_error") return 502;
  if (code == "provider_unavailable") return 503;
  if (code == "storage_failure" || code == "bind_failure") return 500;
  return 400;
}

namespace {

struct Ctx {
  const httplib::Request& req;
  httplib::Response& res;
  std::optional<Principal> principal;

  json body() const {
    if (req.body.empty()) return json::object();
    json doc = json::parse(req.body, nullptr, false);
    if (doc.is_discarded()) throw BadRequest("request body is not valid JSON");
    return doc;
  }
  std::string param(const char* name) const {
    auto it = req.path_params.find(name);
    if (it == req.path_params.end()) throw BadRequest(std::string("missing path parameter ") + name);
    return it->second;
  }
  void send(const json& doc, int status = 200) const {
    res.status = status;
    res.set_content(doc.dump(), "application/json");
  }
};

using Handler = std::function<void(Ctx&)>;

std::string required_string(const json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_string()) throw BadRequest(std::string("field '") + key + "' must be a string");
  return body[key].get<std::string>();
}

std::string optional_string(const json& body, const char* key) {
  if (!body.contains(key) || body[key].is_null()) return "";
  if (!body[key].is_string()) throw BadRequest(std::string("field '") + key + "' must be a string");
  return body[key].get<std::string>();
}

std::int64_t required_int(const json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_number_integer()) {
    throw BadRequest(std::string("field '") + key + "' must be an integer");
  }
  return body[key].get<std::int64_t>();
}

TimestampMs optional_ts(const json& body, const char* key, TimestampMs fallback) {
  if (!body.contains(key) || body[key].is_null()) return fallback;
  if (!body[key].is_number_integer()) throw BadRequest(std::string("field '") + key + "' must be an integer");
  return body[key].get<TimestampMs>();
}

std::map<std::string, AnswerValue> parse_answers(const json& body) {
  std::map<std::string, AnswerValue> out;
  if (!body.contains("answers")) return out;
  const json& answers = body["answers"];
  if (!answers.is_object()) throw BadRequest("answers must be an object");
  for (const auto& [id, value] : answers.items()) {
    if (value.is_null()) continue;
    out.emplace(id, answer_from_json(value));
  }
  return out;
}

json study_summary(StudyService& svc, const StudyConfig& config) {
  return {{"study", study_to_json(config)},
          {"invite_code", svc.invite_code(config.study_id)},
          {"report", report_to_json(validate_study_config(config))}};
}

json events_json(const std::vector<InteractionEvent>& events) {
  json out = json::array();
  for (const auto& e : events) out.push_back(event_to_json(e));
  return out;
}

json credential_report_json(const CredentialReport& r) {
  return {{"llm", {{"status", to_string(r.llm)}, {"detail", r.llm_detail}}},
          {"search", {{"status", to_string(r.search)}, {"detail", r.search_detail}}}};
}

const SurveyInstrument& survey_slot(const StudyConfig& config, const std::string& slot) {
  auto it = config.surveys.find(slot);
  if (it == config.surveys.end()) throw NotFound("no survey slot '" + slot + "'");
  return it->second;
}

/// Calls `add` for every route. Handlers capture `svc` and `clock`, which may
/// be null when only the catalog is wanted.
void define_routes(StudyService* svc_ptr, VirtualClock* clock,
                   const std::function<void(RouteInfo, Handler)>& add) {
  StudyService* svc = svc_ptr;
  auto now = [svc_ptr] { return svc_ptr->clock().now_ms(); };

  // -- open ------------------------------------------------------------------
  add({"GET", "/api/health", Access::open}, [svc](Ctx& c) {
    c.send({{"status", "ok"}, {"setup_required", svc->setup_required()}, {"test_mode", svc->options().test_mode}});
  });
  add({"GET", "/api/setup", Access::open}, [svc](Ctx& c) { c.send({{"setup_required", svc->setup_required()}}); });
  add({"POST", "/api/admin/setup", Access::open}, [svc](Ctx& c) {
    const json b = c.body();
    c.send({{"token", svc->setup_admin(required_string(b, "username"), required_string(b, "password"))}}, 201);
  });
  add({"POST", "/api/admin/login", Access::open}, [svc](Ctx& c) {
    const json b = c.body();
    c.send({{"token", svc->admin_login(required_string(b, "username"), required_string(b, "password"))}});
  });
  add({"POST", "/api/participant/register", Access::open}, [svc, now](Ctx& c) {
    const json b = c.body();
    auto r = svc->register_participant(required_string(b, "study_id"), required_string(b, "invite_code"),
                                      optional_string(b, "external_label"), optional_ts(b, "client_ts", now()));
    c.send({{"participant_id", r.participant_id},
            {"access_key", r.access_key},
            {"session_id", r.session_id},
            {"token", r.token}},
           201);
  });
  add({"POST", "/api/participant/login", Access::open}, [svc](Ctx& c) {
    const json b = c.body();
    auto r = svc->participant_login(required_string(b, "study_id"), required_string(b, "participant_id"),
                                   required_string(b, "access_key"));
    c.send({{"participant_id", r.participant_id}, {"session_id", r.session_id}, {"token", r.token}});
  });

  // -- admin: studies ----------------------------------------------------------
  add({"GET", "/api/admin/studies", Access::admin}, [svc](Ctx& c) {
    json list = json::array();
    for (const auto& id : svc->list_studies()) {
      const auto config = svc->get_study(id);
      list.push_back({{"study_id", id}, {"title", config.title}});
    }
    c.send({{"studies", list}});
  });
  add({"POST", "/api/admin/studies", Access::admin}, [svc](Ctx& c) {
    const json b = c.body();
    StudyConfig config;
    if (b.contains("flow")) {
      config = study_from_json(b);
    } else {
      config = make_default_study(required_string(b, "study_id"));
      if (b.contains("title")) config.title = required_string(b, "title");
    }
    c.send(study_summary(*svc, svc->create_study(config)), 201);
  });
  add({"GET", "/api/admin/studies/:study_id", Access::admin},
      [svc](Ctx& c) { c.send(study_summary(*svc, svc->get_study(c.param("study_id")))); });
  add({"PUT", "/api/admin/studies/:study_id", Access::admin}, [svc](Ctx& c) {
    StudyConfig config = study_from_json(c.body());
    if (config.study_id.empty()) config.study_id = c.param("study_id");
    if (config.study_id != c.param("study_id")) throw BadRequest("study_id in body does not match the path");
    c.send(study_summary(*svc, svc->update_study(config)));
  });
  add({"DELETE", "/api/admin/studies/:study_id", Access::admin}, [svc](Ctx& c) {
    svc->delete_study(c.param("study_id"));
    c.send({{"deleted", true}});
  });
  add({"POST", "/api/admin/studies/:study_id/validate", Access::admin}, [svc](Ctx& c) {
    const json b = c.body();
    const StudyConfig config = b.empty() ? svc->get_study(c.param("study_id")) : study_from_json(b);
    c.send({{"report", report_to_json(validate_study_config(config))}});
  });
  add({"PUT", "/api/admin/studies/:study_id/settings", Access::admin}, [svc](Ctx& c) {
    const StudySettings settings = settings_from_json(c.body());
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) { s.settings = settings; })));
  });
  add({"PUT", "/api/admin/studies/:study_id/meta", Access::admin}, [svc](Ctx& c) {
    const json b = c.body();
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      if (b.contains("title")) s.title = required_string(b, "title");
      if (b.contains("consent_text")) s.consent_text = required_string(b, "consent_text");
      if (b.contains("consent_checkboxes")) s.consent_checkboxes = b["consent_checkboxes"].get<std::vector<std::string>>();
      if (b.contains("provider_config_ref")) s.provider_config_ref = required_string(b, "provider_config_ref");
    })));
  });

  // -- admin: flow ---------------------------------------------------------------
  add({"PUT", "/api/admin/studies/:study_id/flow/order", Access::admin}, [svc](Ctx& c) {
    const json b = c.body();
    if (!b.contains("order") || !b["order"].is_array()) throw BadRequest("order must be an array of step indices");
    const auto order = b["order"].get<std::vector<std::size_t>>();
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      std::vector<bool> seen(s.flow.size(), false);
      if (order.size() != s.flow.size()) throw BadPermutation("order must list every flow step once");
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] >= s.flow.size() || seen[order[i]]) throw BadPermutation("order is not a permutation");
        seen[order[i]] = true;
      }
      for (std::size_t i = 0; i < order.size(); ++i) s.flow[order[i]].order = static_cast<int>(i);
    })));
  });
  add({"PATCH", "/api/admin/studies/:study_id/flow/:index", Access::admin}, [svc](Ctx& c) {
    const json b = c.body();
    const std::size_t index = std::stoul(c.param("index"));
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      if (index >= s.flow.size()) throw NotFound("no flow step " + std::to_string(index));
      FlowStep& step = s.flow[index];
      if (b.contains("enabled")) step.enabled = b["enabled"].get<bool>();
      if (b.contains("reminder_text")) {
        step.reminder_text = b["reminder_text"].is_null() ? std::nullopt
                                                          : std::optional(b["reminder_text"].get<std::string>());
      }
      if (b.contains("survey_id")) step.survey_id = b["survey_id"].get<std::string>();
      if (b.contains("task_id")) step.task_id = b["task_id"].get<std::string>();
    })));
  });
  add({"POST", "/api/admin/studies/:study_id/flow", Access::admin}, [svc](Ctx& c) {
    const FlowStep step = flow_step_from_json(c.body());
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) { s.flow.push_back(step); })),
           201);
  });
  add({"DELETE", "/api/admin/studies/:study_id/flow/:index", Access::admin}, [svc](Ctx& c) {
    const std::size_t index = std::stoul(c.param("index"));
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      if (index >= s.flow.size()) throw NotFound("no flow step " + std::to_string(index));
      const int removed = s.flow[index].order;
      s.flow.erase(s.flow.begin() + static_cast<std::ptrdiff_t>(index));
      for (auto& step : s.flow) {
        if (step.order > removed) --step.order;
      }
    })));
  });

  // -- admin: tasks ----------------------------------------------------------------
  add({"PUT", "/api/admin/studies/:study_id/tasks/:task_id", Access::admin}, [svc](Ctx& c) {
    TaskDef task = task_from_json(c.body());
    task.task_id = c.param("task_id");
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      auto it = std::find_if(s.tasks.begin(), s.tasks.end(), [&](const TaskDef& t) { return t.task_id == task.task_id; });
      if (it == s.tasks.end()) {
        s.tasks.push_back(task);
      } else {
        if (it->modality != task.modality) throw BadRequest("a task's modality is fixed after creation");
        *it = task;
      }
    })));
  });
  add({"DELETE", "/api/admin/studies/:study_id/tasks/:task_id", Access::admin}, [svc](Ctx& c) {
    const std::string id = c.param("task_id");
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      std::erase_if(s.tasks, [&](const TaskDef& t) { return t.task_id == id; });
      std::erase(s.settings.task_order, id);
    })));
  });

  // -- admin: surveys ----------------------------------------------------------------
  add({"GET", "/api/admin/studies/:study_id/surveys", Access::admin}, [svc](Ctx& c) {
    json out = json::object();
    for (const auto& [slot, survey] : svc->get_study(c.param("study_id")).surveys) out[slot] = survey_to_json(survey);
    c.send({{"surveys", out}});
  });
  add({"GET", "/api/admin/studies/:study_id/surveys/:slot", Access::admin}, [svc](Ctx& c) {
    const auto config = svc->get_study(c.param("study_id"));
    c.res.status = 200;
    c.res.set_content(survey_to_json(survey_slot(config, c.param("slot"))).dump(), "application/json");
  });
  add({"PUT", "/api/admin/studies/:study_id/surveys/:slot", Access::admin}, [svc](Ctx& c) {
    const SurveyInstrument survey = import_survey_json(c.req.body);
    const std::string slot = c.param("slot");
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) { s.surveys[slot] = survey; })));
  });
  add({"DELETE", "/api/admin/studies/:study_id/surveys/:slot", Access::admin}, [svc](Ctx& c) {
    const std::string slot = c.param("slot");
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      if (s.surveys.erase(slot) == 0) throw NotFound("no survey slot '" + slot + "'");
    })));
  });
  add({"POST", "/api/admin/studies/:study_id/surveys/:slot/import", Access::admin}, [svc](Ctx& c) {
    const SurveyInstrument survey = import_survey_json(c.req.body);
    const std::string slot = c.param("slot");
    svc->modify_study(c.param("study_id"), [&](StudyConfig& s) { s.surveys[slot] = survey; });
    c.res.status = 200;
    c.res.set_content(export_survey_json(survey), "application/json");
  });
  add({"GET", "/api/admin/studies/:study_id/surveys/:slot/export", Access::admin}, [svc](Ctx& c) {
    const auto config = svc->get_study(c.param("study_id"));
    c.res.status = 200;
    c.res.set_content(export_survey_json(survey_slot(config, c.param("slot"))), "application/json");
  });
  add({"POST", "/api/admin/studies/:study_id/surveys/:slot/reorder", Access::admin}, [svc](Ctx& c) {
    const json b = c.body();
    if (!b.contains("permutation") || !b["permutation"].is_array()) throw BadRequest("permutation must be an array");
    std::vector<std::size_t> permutation;
    for (const auto& v : b["permutation"]) {
      if (!v.is_number_unsigned()) throw BadPermutation("permutation entries must be non-negative integers");
      permutation.push_back(v.get<std::size_t>());
    }
    const std::string slot = c.param("slot");
    SurveyInstrument reordered;
    svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      reordered = reorder_questions(survey_slot(s, slot), permutation);
      s.surveys[slot] = reordered;
    });
    c.res.status = 200;
    c.res.set_content(export_survey_json(reordered), "application/json");
  });

  // -- admin: typology, trigger rules --------------------------------------------------
  add({"GET", "/api/admin/studies/:study_id/typology", Access::admin},
      [svc](Ctx& c) { c.send(typology_to_json(svc->get_study(c.param("study_id")).typology)); });
  add({"PUT", "/api/admin/studies/:study_id/typology", Access::admin}, [svc](Ctx& c) {
    const IntentionTypology typology = typology_from_json(c.body());
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) { s.typology = typology; })));
  });
  add({"GET", "/api/admin/studies/:study_id/trigger-rules", Access::admin}, [svc](Ctx& c) {
    json out = json::array();
    for (const auto& rule : svc->get_study(c.param("study_id")).trigger_rules) out.push_back(trigger_rule_to_json(rule));
    c.send({{"trigger_rules", out}});
  });
  add({"PUT", "/api/admin/studies/:study_id/trigger-rules/:rule_id", Access::admin}, [svc](Ctx& c) {
    json b = c.body();
    b["rule_id"] = c.param("rule_id");
    const TriggerRule rule = trigger_rule_from_json(b);
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      auto it = std::find_if(s.trigger_rules.begin(), s.trigger_rules.end(),
                             [&](const TriggerRule& r) { return r.rule_id == rule.rule_id; });
      if (it == s.trigger_rules.end()) {
        s.trigger_rules.push_back(rule);
      } else {
        *it = rule;
      }
    })));
  });
  add({"DELETE", "/api/admin/studies/:study_id/trigger-rules/:rule_id", Access::admin}, [svc](Ctx& c) {
    const std::string id = c.param("rule_id");
    c.send(study_summary(*svc, svc->modify_study(c.param("study_id"), [&](StudyConfig& s) {
      if (std::erase_if(s.trigger_rules, [&](const TriggerRule& r) { return r.rule_id == id; }) == 0) {
        throw NotFound("no trigger rule '" + id + "'");
      }
    })));
  });

  // -- admin: participants, data -----------------------------------------------------
  add({"GET", "/api/admin/studies/:study_id/invite", Access::admin},
      [svc](Ctx& c) { c.send({{"invite_code", svc->invite_code(c.param("study_id"))}}); });
  add({"POST", "/api/admin/studies/:study_id/invite/rotate", Access::admin},
      [svc](Ctx& c) { c.send({{"invite_code", svc->rotate_invite_code(c.param("study_id"))}}); });
  add({"GET", "/api/admin/studies/:study_id/responses", Access::admin},
      [svc](Ctx& c) { c.send({{"responses", svc->list_responses(c.param("study_id"))}}); });
  add({"GET", "/api/admin/studies/:study_id/sessions", Access::admin},
      [svc](Ctx& c) { c.send({{"sessions", svc->list_sessions(c.param("study_id"))}}); });
  add({"GET", "/api/admin/studies/:study_id/sessions/:session_id/timeline", Access::admin}, [svc](Ctx& c) {
    const auto events = svc->timeline(c.param("study_id"), c.param("session_id"));
    c.send({{"events", events_json(events)},
            {"warnings", timestamp_warnings(events)}});
  });
  add({"GET", "/api/admin/studies/:study_id/export", Access::admin}, [svc](Ctx& c) {
    const std::string id = c.param("study_id");
    const ExportBundle bundle = svc->export_bundle(id);
    c.res.status = 200;
    c.res.set_header("Content-Disposition", "attachment; filename=\"" + id + "-export.zip\"");
    c.res.set_content(zip_store(bundle.files), "application/zip");
  });
  add({"GET", "/api/admin/studies/:study_id/export/:file", Access::admin}, [svc](Ctx& c) {
    const ExportBundle bundle = svc->export_bundle(c.param("study_id"));
    auto it = bundle.files.find(c.param("file"));
    if (it == bundle.files.end()) throw NotFound("no export file '" + c.param("file") + "'");
    c.res.status = 200;
    c.res.set_header("Content-Disposition", "attachment; filename=\"" + it->first + "\"");
    c.res.set_content(it->second, "text/csv; charset=utf-8");
  });

  // -- admin: credentials --------------------------------------------------------------
  add({"GET", "/api/admin/credentials", Access::admin}, [svc](Ctx& c) {
    json providers = json::object();
    for (const auto& ref : svc->credentials().provider_config_refs()) {
      providers[ref] = provider_config_to_json(*svc->credentials().provider_config(ref));
    }
    c.send({{"providers", providers}});
  });
  add({"PUT", "/api/admin/credentials/keys/:key_ref", Access::admin}, [svc](Ctx& c) {
    svc->credentials().set_key(c.param("key_ref"), required_string(c.body(), "api_key"));
    c.send({{"key_ref", c.param("key_ref")}, {"stored", true}});
  });
  add({"DELETE", "/api/admin/credentials/keys/:key_ref", Access::admin}, [svc](Ctx& c) {
    svc->credentials().remove_key(c.param("key_ref"));
    c.send({{"key_ref", c.param("key_ref")}, {"deleted", true}});
  });
  add({"GET", "/api/admin/credentials/providers/:ref", Access::admin}, [svc](Ctx& c) {
    const auto config = svc->credentials().provider_config(c.param("ref"));
    if (!config) throw NotFound("no provider configuration '" + c.param("ref") + "'");
    c.send(provider_config_to_json(*config));
  });
  add({"PUT", "/api/admin/credentials/providers/:ref", Access::admin}, [svc](Ctx& c) {
    const ProviderConfig config = provider_config_from_json(c.body());
    svc->credentials().put_provider_config(c.param("ref"), config);
    c.send(provider_config_to_json(config));
  });
  add({"POST", "/api/admin/credentials/providers/:ref/verify", Access::admin}, [svc](Ctx& c) {
    const auto config = svc->credentials().provider_config(c.param("ref"));
    if (!config) throw NotFound("no provider configuration '" + c.param("ref") + "'");
    c.send(credential_report_json(svc->gateway().verify_credentials(*config)));
  });

  // -- participant ------------------------------------------------------------------------
  add({"GET", "/api/participant/state", Access::participant}, [svc](Ctx& c) { c.send(svc->state(*c.principal)); });
  add({"POST", "/api/participant/consent", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    if (!b.contains("checked") || !b["checked"].is_array()) throw BadRequest("checked must be an array of booleans");
    std::vector<bool> checked;
    for (const auto& v : b["checked"]) {
      if (!v.is_boolean()) throw BadRequest("checked must be an array of booleans");
      checked.push_back(v.get<bool>());
    }
    c.send(svc->submit_consent(*c.principal, checked, optional_ts(b, "client_ts", now())));
  });
  add({"POST", "/api/participant/survey", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    c.send(svc->submit_survey(*c.principal, parse_answers(b), optional_ts(b, "client_ts", now())));
  });
  add({"POST", "/api/participant/chat", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    StudyService::ChatRequest request;
    request.prompt = required_string(b, "prompt");
    request.client_ts = optional_ts(b, "client_ts", now());
    request.typing_end_ms = optional_ts(b, "typing_end_ms", request.client_ts);
    request.typing_start_ms = optional_ts(b, "typing_start_ms", request.typing_end_ms);
    std::shared_ptr<ChatExchange> exchange = svc->begin_chat(*c.principal, request);
    c.res.status = 200;
    c.res.set_header("Cache-Control", "no-cache");
    c.res.set_header("X-Turn-Id", exchange->turn_id());
    c.res.set_chunked_content_provider(
        "text/event-stream",
        [exchange](std::size_t, httplib::DataSink& sink) {
          try {
            exchange->stream([&](const json& frame) {
              const char* name = frame.contains("error") ? "error" : frame.value("final", false) ? "final" : "chunk";
              const std::string text = sse_frame(frame.dump(), name);
              return sink.write(text.data(), text.size());
            });
          } catch (const std::exception&) {
            // The exchange logged what it could; the client sees a truncated stream.
          }
          sink.done();
          return true;
        },
        [exchange](bool) {});
  });
  add({"POST", "/api/participant/rate-turn", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    c.send(svc->rate_turn(*c.principal, required_string(b, "turn_id"), required_int(b, "rating"),
                         optional_ts(b, "client_ts", now())));
  });
  add({"POST", "/api/participant/rate-trajectory", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    const std::string task = optional_string(b, "task_id");
    c.send(svc->rate_trajectory(*c.principal, task.empty() ? std::nullopt : std::optional(task),
                               required_int(b, "rating"), optional_ts(b, "client_ts", now())));
  });
  add({"POST", "/api/participant/search", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    StudyService::SearchRequest request;
    request.query = required_string(b, "query");
    request.client_ts = optional_ts(b, "client_ts", now());
    request.typing_end_ms = optional_ts(b, "typing_end_ms", request.client_ts);
    request.typing_start_ms = optional_ts(b, "typing_start_ms", request.typing_end_ms);
    c.send(svc->search(*c.principal, request));
  });
  add({"POST", "/api/participant/click", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    const TimestampMs ts = optional_ts(b, "client_ts", now());
    c.send(svc->click(*c.principal, required_string(b, "query_id"), required_int(b, "rank"), required_string(b, "url"),
                     optional_ts(b, "clicked_ms", ts), ts));
  });
  add({"PUT", "/api/participant/note", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    c.send(svc->save_note(*c.principal, required_string(b, "text"), optional_ts(b, "client_ts", now())));
  });
  add({"POST", "/api/participant/submit-task", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    const std::string note = optional_string(b, "final_note");
    c.send(svc->submit_task(*c.principal, b.contains("final_note") ? std::optional(note) : std::nullopt,
                           optional_ts(b, "client_ts", now())));
  });
  add({"GET", "/api/participant/popups", Access::participant},
      [svc](Ctx& c) { c.send(svc->pending_popups(*c.principal)); });
  add({"POST", "/api/participant/popups/:instance_id", Access::participant}, [svc, now](Ctx& c) {
    const json b = c.body();
    c.send(svc->answer_popup(*c.principal, c.param("instance_id"), parse_answers(b),
                            optional_ts(b, "client_ts", now())));
  });

  // -- test mode ---------------------------------------------------------------------------
  add({"GET", "/api/test/clock", Access::test_only}, [clock](Ctx& c) { c.send({{"now_ms", clock->now_ms()}}); });
  add({"POST", "/api/test/clock", Access::test_only}, [clock](Ctx& c) {
    const json b = c.body();
    if (b.contains("set_ms")) clock->set_ms(required_int(b, "set_ms"));
    if (b.contains("advance_ms")) {
      const auto delta = required_int(b, "advance_ms");
      if (delta < 0) throw BadRequest("the clock cannot move backwards");
      clock->advance_ms(delta);
    }
    c.send({{"now_ms", clock->now_ms()}});
  });
}

void send_error(Ctx& c, StudyService* svc, const Error& e) {
  json body = {{"error", e.code()}, {"message", e.what()}};
  if (const auto* gate = dynamic_cast<const GateError*>(&e)) {
    body["reason"] = to_string(gate->reason());
    if (gate->reason() == GateReason::pending_trigger && c.principal && svc != nullptr) {
      try {
        body["popups"] = svc->pending_popups(*c.principal).at("popups");
      } catch (const std::exception&) {
      }
    }
  }
  if (const auto* invalid = dynamic_cast<const ValidationFailed*>(&e)) body["report"] = report_to_json(invalid->report());
  c.send(body, http_status(e));
}

}  // namespace

const std::vector<RouteInfo>& route_catalog() {
  static const std::vector<RouteInfo> catalog = [] {
    std::vector<RouteInfo> out;
    define_routes(nullptr, nullptr, [&](RouteInfo info, Handler) { out.push_back(std::move(info)); });
    return out;
  }();
  return catalog;
}

void install_routes(httplib::Server& server, StudyService& service, VirtualClock* test_clock) {
  StudyService* svc = &service;
  define_routes(svc, test_clock, [&server, svc, test_clock](RouteInfo info, Handler handler) {
    auto wrapped = [svc, test_clock, info, handler](const httplib::Request& req, httplib::Response& res) {
      Ctx c{req, res, std::nullopt};
      try {
        if (info.access == Access::test_only && (test_clock == nullptr || !svc->options().test_mode)) {
          throw NotFound("test endpoints are disabled");
        }
        if (info.access == Access::admin || info.access == Access::participant) {
          const std::string header = req.get_header_value("Authorization");
          constexpr std::string_view prefix = "Bearer ";
          if (header.rfind(prefix, 0) != 0) throw Unauthorized("bearer token required");
          const Principal who = svc->authenticate(header.substr(prefix.size()));
          const PrincipalKind wanted =
              info.access == Access::admin ? PrincipalKind::admin : PrincipalKind::participant;
          if (who.kind != wanted) {
            throw Forbidden("this endpoint requires a " + std::string(to_string(wanted)) + " token");
          }
          c.principal = who;
        }
        handler(c);
      } catch (const Error& e) {
        send_error(c, svc, e);
      } catch (const nlohmann::json::exception& e) {
        c.send({{"error", "bad_request"}, {"message", e.what()}}, 400);
      } catch (const std::invalid_argument& e) {
        c.send({{"error", "bad_request"}, {"message", e.what()}}, 400);
      } catch (const std::out_of_range& e) {
        c.send({{"error", "bad_request"}, {"message", e.what()}}, 400);
      } catch (const std::exception& e) {
        c.send({{"error", "internal"}, {"message", e.what()}}, 500);
      }
    };
    if (info.method == "GET") {
      server.Get(info.pattern, wrapped);
    } else if (info.method == "POST") {
      server.Post(info.pattern, wrapped);
    } else if (info.method == "PUT") {
      server.Put(info.pattern, wrapped);
    } else if (info.method == "PATCH") {
      server.Patch(info.pattern, wrapped);
    } else if (info.method == "DELETE") {
      server.Delete(info.pattern, wrapped);
    }
  });
}

// ---------------------------------------------------------------------------

ServerConfig ServerConfig::from_environment() {
  ServerConfig config;
  auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    return v == nullptr ? std::nullopt : std::optional<std::string>(v);
  };
  if (auto v = env("STUDYFLOW_BIND")) config.bind_address = *v;
  if (auto v = env("STUDYFLOW_PORT")) config.port = std::stoi(*v);
  if (auto v = env("STUDYFLOW_STORAGE")) config.storage_root = *v;
  if (auto v = env("STUDYFLOW_SECRET")) config.secret = *v;
  if (auto v = env("STUDYFLOW_TEST_MODE")) config.test_mode = (*v == "1" || *v == "true");
  if (auto v = env("STUDYFLOW_CORPUS")) config.corpus_path = *v;
  return config;
}

ServiceHost::ServiceHost(ServerConfig config) : config_(std::move(config)) {
  if (config_.storage_root.empty()) {
    store_ = std::make_unique<MemoryStore>();
  } else {
    store_ = std::make_unique<FileStore>(config_.storage_root);
  }
  const Clock* clock = nullptr;
  if (config_.test_mode) {
    virtual_clock_ = std::make_unique<VirtualClock>(config_.virtual_start_ms);
    clock = virtual_clock_.get();
  } else {
    system_clock_ = std::make_unique<SystemClock>();
    clock = system_clock_.get();
  }
  credentials_ = std::make_unique<CredentialStore>(*store_, config_.secret);
  credentials_->set_default_corpus(config_.corpus_path);
  gateway_ = std::make_unique<ProviderGateway>(credentials_.get(), config_.gateway);
  ServiceOptions options = config_.service;
  options.test_mode = config_.test_mode;
  service_ = std::make_unique<StudyService>(*store_, *clock, *credentials_, *gateway_, options);
  server_ = std::make_unique<httplib::Server>();
  server_->set_read_timeout(30, 0);
  server_->set_write_timeout(30, 0);
  install_routes(*server_, *service_, virtual_clock_.get());
}

ServiceHost::~ServiceHost() { stop(); }

int ServiceHost::bind() {
  if (config_.port == 0) {
    port_ = server_->bind_to_any_port(config_.bind_address);
    if (port_ < 0) throw BindFailure("cannot bind " + config_.bind_address);
  } else {
    if (!server_->bind_to_port(config_.bind_address, config_.port)) {
      throw BindFailure("cannot bind " + config_.bind_address + ":" + std::to_string(config_.port));
    }
    port_ = config_.port;
  }
  return port_;
}

int ServiceHost::start() {
  bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void ServiceHost::run() {
  bind();
  server_->listen_after_bind();
}

void ServiceHost::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string ServiceHost::base_url() const { return "http://" + config_.bind_address + ":" + std::to_string(port_); }

}  // namespace studyflow
