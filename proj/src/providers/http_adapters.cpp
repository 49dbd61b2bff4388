#include <algorithm>

#include "adapters.hpp"
#include "httplib.h"
#include "json.hpp"
#include "studyflow/error.hpp"
#include "studyflow/sse.hpp"

namespace studyflow::detail {

using nlohmann::json;

namespace {

constexpr const char* kOpenAiDefault = "https://api.openai.com";
constexpr const char* kClaudeDefault = "https://api.anthropic.com";
constexpr const char* kGeminiDefault = "https://generativelanguage.googleapis.com";
constexpr const char* kSearchDefault = "https://api.search.brave.com/res/v1/web/search";

std::string default_base(LlmProviderKind kind) {
  switch (kind) {
    case LlmProviderKind::openai_compatible: return kOpenAiDefault;
    case LlmProviderKind::claude_compatible: return kClaudeDefault;
    case LlmProviderKind::gemini_compatible: return kGeminiDefault;
    case LlmProviderKind::mock_echo: break;
  }
  throw PreconditionViolation("mock provider has no endpoint");
}

std::unique_ptr<httplib::Client> make_client(const Endpoint& endpoint, const GatewayOptions& options,
                                             std::chrono::milliseconds read_timeout) {
  auto client = std::make_unique<httplib::Client>(endpoint.origin);
  client->set_connection_timeout(options.connect_timeout);
  client->set_read_timeout(read_timeout);
  client->set_write_timeout(options.connect_timeout);
  return client;
}

[[noreturn]] void raise_for_status(int status, const std::string& body) {
  const std::string detail = "HTTP " + std::to_string(status) + ": " + body.substr(0, 300);
  if (status == 401 || status == 403) throw AuthError(detail);
  if (status == 408 || status == 429 || status >= 500) throw ProviderUnavailable(detail);
  throw ContentError(detail);
}

json openai_messages(std::span<const ChatMessage> history) {
  json messages = json::array();
  for (const auto& m : history) messages.push_back({{"role", m.role}, {"content", m.text}});
  return messages;
}

/// Builds the vendor request and returns a parser for each SSE data payload.
/// The parser appends text deltas and sets `done` on the vendor's end marker.
struct VendorRequest {
  std::string path;
  httplib::Headers headers;
  json body;
  std::function<void(const SseEvent&, std::vector<std::string>&, bool&)> parse;
  bool end_on_close = false;
};

VendorRequest build_request(const LlmSettings& settings, const std::string& key, const Endpoint& endpoint,
                            std::span<const ChatMessage> history) {
  VendorRequest req;
  switch (settings.provider) {
    case LlmProviderKind::openai_compatible: {
      req.path = endpoint.path + "/v1/chat/completions";
      req.headers = {{"Authorization", "Bearer " + key}, {"Accept", "text/event-stream"}};
      req.body = {{"model", settings.model},
                  {"messages", openai_messages(history)},
                  {"temperature", settings.temperature},
                  {"max_tokens", settings.max_tokens},
                  {"stream", true}};
      req.parse = [](const SseEvent& ev, std::vector<std::string>& out, bool& done) {
        if (ev.data == "[DONE]") {
          done = true;
          return;
        }
        const json doc = json::parse(ev.data, nullptr, false);
        if (doc.is_discarded() || !doc.contains("choices")) return;
        for (const auto& choice : doc["choices"]) {
          const auto& delta = choice.value("delta", json::object());
          if (delta.contains("content") && delta["content"].is_string()) out.push_back(delta["content"]);
          if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
            if (choice["finish_reason"] == "content_filter") throw ContentError("reply blocked by content filter");
          }
        }
      };
      break;
    }
    case LlmProviderKind::claude_compatible: {
      req.path = endpoint.path + "/v1/messages";
      req.headers = {{"x-api-key", key}, {"anthropic-version", "2023-06-01"}, {"Accept", "text/event-stream"}};
      json messages = json::array();
      std::string system;
      for (const auto& m : history) {
        if (m.role == "system") {
          system += m.text;
        } else {
          messages.push_back({{"role", m.role}, {"content", m.text}});
        }
      }
      req.body = {{"model", settings.model},
                  {"messages", messages},
                  {"max_tokens", settings.max_tokens},
                  {"temperature", settings.temperature},
                  {"stream", true}};
      if (!system.empty()) req.body["system"] = system;
      req.parse = [](const SseEvent& ev, std::vector<std::string>& out, bool& done) {
        const json doc = json::parse(ev.data, nullptr, false);
        if (doc.is_discarded()) return;
        const std::string type = doc.value("type", ev.event);
        if (type == "content_block_delta") {
          const auto& delta = doc.value("delta", json::object());
          if (delta.contains("text") && delta["text"].is_string()) out.push_back(delta["text"]);
        } else if (type == "message_stop") {
          done = true;
        } else if (type == "error") {
          const std::string kind = doc.value("error", json::object()).value("type", "");
          if (kind == "overloaded_error" || kind == "api_error") throw ProviderUnavailable(ev.data);
          throw ContentError(ev.data);
        }
      };
      break;
    }
    case LlmProviderKind::gemini_compatible: {
      req.path = endpoint.path + "/v1beta/models/" + settings.model + ":streamGenerateContent?alt=sse";
      req.headers = {{"x-goog-api-key", key}, {"Accept", "text/event-stream"}};
      json contents = json::array();
      for (const auto& m : history) {
        const std::string role = m.role == "assistant" ? "model" : "user";
        contents.push_back({{"role", role}, {"parts", json::array({{{"text", m.text}}})}});
      }
      req.body = {{"contents", contents},
                  {"generationConfig", {{"temperature", settings.temperature},
                                        {"maxOutputTokens", settings.max_tokens}}}};
      req.end_on_close = true;
      req.parse = [](const SseEvent& ev, std::vector<std::string>& out, bool& done) {
        const json doc = json::parse(ev.data, nullptr, false);
        if (doc.is_discarded()) return;
        if (doc.contains("promptFeedback") && doc["promptFeedback"].contains("blockReason")) {
          throw ContentError("prompt blocked: " + doc["promptFeedback"]["blockReason"].dump());
        }
        for (const auto& candidate : doc.value("candidates", json::array())) {
          for (const auto& part : candidate.value("content", json::object()).value("parts", json::array())) {
            if (part.contains("text") && part["text"].is_string()) out.push_back(part["text"]);
          }
          if (candidate.value("finishReason", "") == "STOP") done = true;
        }
      };
      break;
    }
    case LlmProviderKind::mock_echo:
      throw PreconditionViolation("mock provider has no endpoint");
  }
  return req;
}

}  // namespace

Endpoint parse_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos || scheme_end == 0) {
    throw PreconditionViolation("base url '" + url + "' has no scheme");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  Endpoint endpoint;
  endpoint.origin = url.substr(0, path_start);
  if (endpoint.origin.size() <= scheme_end + 3) throw PreconditionViolation("base url '" + url + "' has no host");
  if (path_start != std::string::npos) endpoint.path = url.substr(path_start);
  while (!endpoint.path.empty() && endpoint.path.back() == '/') endpoint.path.pop_back();
  return endpoint;
}

bool stream_chat(const LlmSettings& settings, const std::string& api_key, std::span<const ChatMessage> history,
                 const GatewayOptions& options, const DeltaSink& on_delta) {
  const Endpoint endpoint =
      parse_base_url(settings.base_url.empty() ? default_base(settings.provider) : settings.base_url);
  VendorRequest vendor = build_request(settings, api_key, endpoint, history);
  auto client = make_client(endpoint, options, options.stream_timeout);

  httplib::Request req;
  req.method = "POST";
  req.path = vendor.path;
  req.headers = vendor.headers;
  req.body = vendor.body.dump();
  req.set_header("Content-Type", "application/json");

  int status = 0;
  std::string error_body;
  SseParser parser;
  bool cancelled = false;
  bool done = false;
  std::exception_ptr parse_failure;
  req.response_handler = [&](const httplib::Response& response) {
    status = response.status;
    return true;
  };
  req.content_receiver = [&](const char* data, std::size_t length, std::uint64_t, std::uint64_t) {
    if (status < 200 || status >= 300) {
      error_body.append(data, length);
      return true;
    }
    try {
      for (const auto& event : parser.feed(std::string_view(data, length))) {
        std::vector<std::string> deltas;
        vendor.parse(event, deltas, done);
        for (const auto& delta : deltas) {
          if (delta.empty()) continue;
          if (!on_delta(delta)) {
            cancelled = true;
            return false;
          }
        }
      }
    } catch (...) {
      parse_failure = std::current_exception();
      return false;
    }
    return true;
  };

  httplib::Response response;
  httplib::Error error = httplib::Error::Success;
  const bool ok = client->send(req, response, error);
  if (cancelled) return false;
  if (parse_failure) std::rethrow_exception(parse_failure);
  if (status != 0 && (status < 200 || status >= 300)) raise_for_status(status, error_body);
  if (!ok) throw ProviderUnavailable("chat stream failed: " + httplib::to_string(error));
  if (!done && !vendor.end_on_close) throw ProviderUnavailable("chat stream ended before the end marker");
  return true;
}

std::vector<SearchResult> search_web(const SearchSettings& settings, const std::string& api_key,
                                     const std::string& query, const GatewayOptions& options) {
  const Endpoint endpoint = parse_base_url(settings.base_url.empty() ? kSearchDefault : settings.base_url);
  auto client = make_client(endpoint, options, options.connect_timeout);
  httplib::Params params{{"q", query}, {"count", std::to_string(settings.results_per_query)}};
  httplib::Headers headers{{"X-Subscription-Token", api_key}, {"Accept", "application/json"}};
  auto result = client->Get(endpoint.path.empty() ? "/" : endpoint.path, params, headers);
  if (!result) throw ProviderUnavailable("search request failed: " + httplib::to_string(result.error()));
  if (result->status < 200 || result->status >= 300) raise_for_status(result->status, result->body);
  const json doc = json::parse(result->body, nullptr, false);
  if (doc.is_discarded()) throw ProviderUnavailable("search provider returned malformed JSON");
  const json* items = nullptr;
  if (doc.contains("web") && doc["web"].contains("results")) {
    items = &doc["web"]["results"];
  } else if (doc.contains("results")) {
    items = &doc["results"];
  }
  std::vector<SearchResult> out;
  if (items == nullptr || !items->is_array()) return out;
  for (const auto& item : *items) {
    if (static_cast<int>(out.size()) >= settings.results_per_query) break;
    const std::string url = item.value("url", "");
    if (url.find("://") == std::string::npos) continue;
    SearchResult r;
    r.rank = static_cast<std::int64_t>(out.size()) + 1;
    r.title = item.value("title", "");
    r.url = url;
    r.snippet = item.contains("description") ? item.value("description", "") : item.value("snippet", "");
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

ProbeStatus classify(const httplib::Result& result, std::string& detail) {
  if (!result) {
    detail = httplib::to_string(result.error());
    return ProbeStatus::unreachable;
  }
  detail = "HTTP " + std::to_string(result->status);
  if (result->status == 401 || result->status == 403) return ProbeStatus::auth_failed;
  if (result->status >= 200 && result->status < 300) return ProbeStatus::ok;
  return ProbeStatus::unreachable;
}

}  // namespace

ProbeStatus probe_llm(const LlmSettings& settings, const std::string& api_key, const GatewayOptions& options,
                      std::string& detail) {
  const Endpoint endpoint =
      parse_base_url(settings.base_url.empty() ? default_base(settings.provider) : settings.base_url);
  auto client = make_client(endpoint, options, options.connect_timeout);
  switch (settings.provider) {
    case LlmProviderKind::openai_compatible:
      return classify(client->Get(endpoint.path + "/v1/models", {{"Authorization", "Bearer " + api_key}}), detail);
    case LlmProviderKind::claude_compatible:
      return classify(client->Get(endpoint.path + "/v1/models",
                                  {{"x-api-key", api_key}, {"anthropic-version", "2023-06-01"}}),
                      detail);
    case LlmProviderKind::gemini_compatible:
      return classify(client->Get(endpoint.path + "/v1beta/models", {{"x-goog-api-key", api_key}}), detail);
    case LlmProviderKind::mock_echo:
      break;
  }
  return ProbeStatus::ok;
}

ProbeStatus probe_search(const SearchSettings& settings, const std::string& api_key, const GatewayOptions& options,
                         std::string& detail) {
  const Endpoint endpoint = parse_base_url(settings.base_url.empty() ? kSearchDefault : settings.base_url);
  auto client = make_client(endpoint, options, options.connect_timeout);
  return classify(client->Get(endpoint.path.empty() ? "/" : endpoint.path, httplib::Params{{"q", "test"}, {"count", "1"}},
                              httplib::Headers{{"X-Subscription-Token", api_key}, {"Accept", "application/json"}}),
                  detail);
}

}  // namespace studyflow::detail
