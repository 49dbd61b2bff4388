#include "studyflow/providers.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "adapters.hpp"
#include "studyflow/error.hpp"

namespace studyflow {

using nlohmann::json;

std::string_view to_string(LlmProviderKind kind) {
  switch (kind) {
    case LlmProviderKind::openai_compatible: return "openai-compatible";
    case LlmProviderKind::gemini_compatible: return "gemini-compatible";
    case LlmProviderKind::claude_compatible: return "claude-compatible";
    case LlmProviderKind::mock_echo: return "mock-echo";
  }
  return "?";
}

std::string_view to_string(SearchProviderKind kind) {
  switch (kind) {
    case SearchProviderKind::generic_search_api: return "generic-search-api";
    case SearchProviderKind::mock_corpus: return "mock-corpus";
  }
  return "?";
}

std::string_view to_string(ProbeStatus status) {
  switch (status) {
    case ProbeStatus::ok: return "ok";
    case ProbeStatus::auth_failed: return "auth-failed";
    case ProbeStatus::unreachable: return "unreachable";
  }
  return "?";
}

namespace {

LlmProviderKind llm_kind_from(const std::string& text) {
  for (auto kind : {LlmProviderKind::openai_compatible, LlmProviderKind::gemini_compatible,
                    LlmProviderKind::claude_compatible, LlmProviderKind::mock_echo}) {
    if (to_string(kind) == text) return kind;
  }
  throw SchemaError("llm.provider: unknown provider '" + text + "'");
}

SearchProviderKind search_kind_from(const std::string& text) {
  for (auto kind : {SearchProviderKind::generic_search_api, SearchProviderKind::mock_corpus}) {
    if (to_string(kind) == text) return kind;
  }
  throw SchemaError("search.provider: unknown provider '" + text + "'");
}

template <typename T>
T field_or(const json& doc, const char* key, T fallback, const std::string& path) {
  if (!doc.contains(key) || doc[key].is_null()) return fallback;
  try {
    return doc[key].get<T>();
  } catch (const json::exception&) {
    throw SchemaError(path + "." + key + ": wrong type");
  }
}

}  // namespace

json provider_config_to_json(const ProviderConfig& config) {
  json mock = {{"chunk_chars", config.llm.mock.chunk_chars},
               {"chunk_delay_ms", config.llm.mock.chunk_delay.count()}};
  if (config.llm.mock.fail_after_chunks) mock["fail_after_chunks"] = *config.llm.mock.fail_after_chunks;
  return {
      {"llm",
       {{"provider", to_string(config.llm.provider)},
        {"model", config.llm.model},
        {"api_key_ref", config.llm.api_key_ref},
        {"params", {{"temperature", config.llm.temperature}, {"max_tokens", config.llm.max_tokens}}},
        {"base_url", config.llm.base_url},
        {"mock", mock}}},
      {"search",
       {{"provider", to_string(config.search.provider)},
        {"api_key_ref", config.search.api_key_ref},
        {"results_per_query", config.search.results_per_query},
        {"base_url", config.search.base_url},
        {"corpus_path", config.search.corpus_path}}},
  };
}

ProviderConfig provider_config_from_json(const json& doc) {
  if (!doc.is_object()) throw SchemaError("provider config must be an object");
  ProviderConfig config;
  if (doc.contains("llm")) {
    const json& llm = doc["llm"];
    if (!llm.is_object()) throw SchemaError("llm must be an object");
    config.llm.provider = llm_kind_from(field_or<std::string>(llm, "provider", "mock-echo", "llm"));
    config.llm.model = field_or<std::string>(llm, "model", "", "llm");
    config.llm.api_key_ref = field_or<std::string>(llm, "api_key_ref", "", "llm");
    config.llm.base_url = field_or<std::string>(llm, "base_url", "", "llm");
    if (llm.contains("params")) {
      config.llm.temperature = field_or<double>(llm["params"], "temperature", 0.7, "llm.params");
      config.llm.max_tokens = field_or<int>(llm["params"], "max_tokens", 1024, "llm.params");
    }
    if (llm.contains("mock")) {
      const json& mock = llm["mock"];
      const auto chars = field_or<std::int64_t>(mock, "chunk_chars", 4, "llm.mock");
      if (chars < 1) throw SchemaError("llm.mock.chunk_chars must be at least 1");
      config.llm.mock.chunk_chars = static_cast<std::size_t>(chars);
      if (mock.contains("fail_after_chunks") && !mock["fail_after_chunks"].is_null()) {
        const auto n = field_or<std::int64_t>(mock, "fail_after_chunks", 0, "llm.mock");
        if (n < 0) throw SchemaError("llm.mock.fail_after_chunks must be non-negative");
        config.llm.mock.fail_after_chunks = static_cast<std::size_t>(n);
      }
      config.llm.mock.chunk_delay =
          std::chrono::milliseconds(field_or<std::int64_t>(mock, "chunk_delay_ms", 0, "llm.mock"));
    }
    if (config.llm.max_tokens < 1) throw SchemaError("llm.params.max_tokens must be positive");
  }
  if (doc.contains("search")) {
    const json& search = doc["search"];
    if (!search.is_object()) throw SchemaError("search must be an object");
    config.search.provider = search_kind_from(field_or<std::string>(search, "provider", "mock-corpus", "search"));
    config.search.api_key_ref = field_or<std::string>(search, "api_key_ref", "", "search");
    config.search.results_per_query = field_or<int>(search, "results_per_query", 10, "search");
    config.search.base_url = field_or<std::string>(search, "base_url", "", "search");
    config.search.corpus_path = field_or<std::string>(search, "corpus_path", "", "search");
    if (config.search.results_per_query < 1 || config.search.results_per_query > 50) {
      throw SchemaError("search.results_per_query must be within 1..50");
    }
  }
  return config;
}

// ---------------------------------------------------------------------------
// Mock corpus

std::vector<CorpusDocument> parse_corpus(std::string_view text) {
  std::vector<CorpusDocument> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string line(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 5) {
      throw ParseError("corpus line " + std::to_string(line_no) + ": expected 5 tab-separated fields");
    }
    CorpusDocument doc{fields[0], fields[1], fields[2], fields[3], 0.0};
    try {
      std::size_t used = 0;
      doc.score = std::stod(fields[4], &used);
      if (used != fields[4].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("corpus line " + std::to_string(line_no) + ": bad score '" + fields[4] + "'");
    }
    out.push_back(std::move(doc));
  }
  return out;
}

std::vector<CorpusDocument> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageFailure("cannot read corpus file " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_corpus(buffer.str());
}

namespace {

std::set<std::string> tokens(std::string_view text) {
  std::set<std::string> out;
  std::string current;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) != 0) {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else if (!current.empty()) {
      out.insert(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.insert(std::move(current));
  return out;
}

}  // namespace

std::vector<SearchResult> search_corpus(std::span<const CorpusDocument> corpus, std::string_view query,
                                        std::size_t limit) {
  const auto wanted = tokens(query);
  std::vector<const CorpusDocument*> hits;
  for (const auto& doc : corpus) {
    const auto have = tokens(doc.title + " " + doc.body);
    const bool match = std::any_of(wanted.begin(), wanted.end(), [&](const auto& t) { return have.count(t) > 0; });
    if (match) hits.push_back(&doc);
  }
  std::stable_sort(hits.begin(), hits.end(), [](const CorpusDocument* a, const CorpusDocument* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->id < b->id;
  });
  if (hits.size() > limit) hits.resize(limit);
  std::vector<SearchResult> out;
  for (const auto* doc : hits) {
    out.push_back({static_cast<std::int64_t>(out.size()) + 1, doc->title, doc->url, doc->body});
  }
  return out;
}

std::string mock_echo_text(std::string_view prompt) { return "echo: " + std::string(prompt); }

// ---------------------------------------------------------------------------
// Gateway

namespace {

/// Splits into pieces of `n` UTF-8 code points.
std::vector<std::string> split_code_points(const std::string& text, std::size_t n) {
  std::vector<std::string> out;
  std::string current;
  std::size_t count = 0;
  for (std::size_t i = 0; i < text.size();) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = 3;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    len = std::min(len, text.size() - i);
    current.append(text, i, len);
    i += len;
    if (++count == n) {
      out.push_back(std::move(current));
      current.clear();
      count = 0;
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

}  // namespace

ProviderGateway::ProviderGateway(const CredentialStore* credentials, GatewayOptions options)
    : credentials_(credentials), options_(options) {}

std::string ProviderGateway::resolve_key(const std::string& key_ref) const {
  if (key_ref.empty()) throw AuthError("no api_key_ref configured");
  if (credentials_ == nullptr) throw AuthError("no credential store available");
  auto key = credentials_->get_key(key_ref);
  if (!key) throw AuthError("api key '" + key_ref + "' is not set");
  return *key;
}

const std::vector<CorpusDocument>& ProviderGateway::corpus(const std::string& path) const {
  std::lock_guard lock(corpus_mutex_);
  auto it = corpora_.find(path);
  if (it == corpora_.end()) {
    std::vector<CorpusDocument> docs;
    if (!path.empty()) docs = load_corpus(path);
    it = corpora_.emplace(path, std::move(docs)).first;
  }
  return it->second;
}

ChatOutcome ProviderGateway::chat_complete(const ProviderConfig& config, std::span<const ChatMessage> history,
                                           const std::string& turn_id, const ChunkSink& sink) const {
  if (history.empty()) throw PreconditionViolation("chat history is empty");
  if (history.back().role != "user") throw PreconditionViolation("last history entry must be the user prompt");

  ChatOutcome outcome;
  auto deliver = [&](std::string_view text) {
    ResponseChunk chunk{turn_id, outcome.chunk_count, std::string(text), false};
    if (!sink(chunk)) return false;
    outcome.full_text += text;
    ++outcome.chunk_count;
    return true;
  };

  bool finished = false;
  if (config.llm.provider == LlmProviderKind::mock_echo) {
    const auto& mock = config.llm.mock;
    const auto pieces = split_code_points(mock_echo_text(history.back().text), std::max<std::size_t>(1, mock.chunk_chars));
    finished = true;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (mock.fail_after_chunks && i == *mock.fail_after_chunks) {
        throw ProviderUnavailable("mock stream dropped after " + std::to_string(i) + " chunks");
      }
      if (i > 0 && mock.chunk_delay.count() > 0) std::this_thread::sleep_for(mock.chunk_delay);
      if (!deliver(pieces[i])) {
        finished = false;
        break;
      }
    }
  } else {
    const std::string key = resolve_key(config.llm.api_key_ref);
    for (int attempt = 0;; ++attempt) {
      try {
        finished = detail::stream_chat(config.llm, key, history, options_, deliver);
        break;
      } catch (const ProviderUnavailable&) {
        if (outcome.chunk_count > 0 || attempt >= options_.retries) throw;
      }
    }
  }

  if (!finished) {
    outcome.status = StreamStatus::cancelled;
    return outcome;
  }
  sink(ResponseChunk{turn_id, outcome.chunk_count, "", true});
  ++outcome.chunk_count;
  return outcome;
}

ResultPage ProviderGateway::search(const ProviderConfig& config, const std::string& query) const {
  if (trim(query).empty()) throw PreconditionViolation("query is empty");
  ResultPage page;
  page.query_text = query;
  const auto limit = static_cast<std::size_t>(std::max(1, config.search.results_per_query));
  if (config.search.provider == SearchProviderKind::mock_corpus) {
    page.results = search_corpus(corpus(config.search.corpus_path), query, limit);
    return page;
  }
  const std::string key = resolve_key(config.search.api_key_ref);
  for (int attempt = 0;; ++attempt) {
    try {
      page.results = detail::search_web(config.search, key, query, options_);
      return page;
    } catch (const ProviderUnavailable&) {
      if (attempt >= options_.retries) throw;
    }
  }
}

CredentialReport ProviderGateway::verify_credentials(const ProviderConfig& config) const {
  CredentialReport report;
  auto probe = [&](const std::string& key_ref, auto&& run, ProbeStatus& status, std::string& detail) {
    std::optional<std::string> key;
    try {
      if (credentials_ != nullptr && !key_ref.empty()) key = credentials_->get_key(key_ref);
    } catch (const std::exception& e) {
      detail = e.what();
    }
    if (!key) {
      status = ProbeStatus::auth_failed;
      if (detail.empty()) detail = "api key '" + key_ref + "' is not set";
      return;
    }
    try {
      status = run(*key, detail);
    } catch (const std::exception& e) {
      status = ProbeStatus::unreachable;
      detail = e.what();
    }
  };

  if (config.llm.provider == LlmProviderKind::mock_echo) {
    report.llm_detail = "mock";
  } else {
    probe(
        config.llm.api_key_ref,
        [&](const std::string& key, std::string& detail) { return detail::probe_llm(config.llm, key, options_, detail); },
        report.llm, report.llm_detail);
  }
  if (config.search.provider == SearchProviderKind::mock_corpus) {
    report.search_detail = "mock";
  } else {
    probe(
        config.search.api_key_ref,
        [&](const std::string& key, std::string& detail) {
          return detail::probe_search(config.search, key, options_, detail);
        },
        report.search, report.search_detail);
  }
  return report;
}

}  // namespace studyflow
