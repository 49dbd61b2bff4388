#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "studyflow/domain.hpp"
#include "studyflow/storage.hpp"

namespace studyflow {

enum class LlmProviderKind { openai_compatible, gemini_compatible, claude_compatible, mock_echo };
enum class SearchProviderKind { generic_search_api, mock_corpus };

std::string_view to_string(LlmProviderKind kind);
std::string_view to_string(SearchProviderKind kind);

/// Behaviour knobs for the deterministic mock-echo provider.
struct MockChatOptions {
  /// Response text is split into pieces of this many code points.
  std::size_t chunk_chars = 4;
  /// Fault injection: the stream breaks after this many text chunks.
  std::optional<std::size_t> fail_after_chunks;
  /// Pause between chunks, to make streaming observable.
  std::chrono::milliseconds chunk_delay{0};
  bool operator==(const MockChatOptions&) const = default;
};

struct LlmSettings {
  LlmProviderKind provider = LlmProviderKind::mock_echo;
  std::string model;
  std::string api_key_ref;
  double temperature = 0.7;
  int max_tokens = 1024;
  /// Vendor endpoint origin (plus optional path prefix); empty selects the
  /// vendor's public default.
  std::string base_url;
  MockChatOptions mock;
  bool operator==(const LlmSettings&) const = default;
};

struct SearchSettings {
  SearchProviderKind provider = SearchProviderKind::mock_corpus;
  std::string api_key_ref;
  int results_per_query = 10;
  std::string base_url;
  /// Fixtures file for mock-corpus.
  std::string corpus_path;
  bool operator==(const SearchSettings&) const = default;
};

struct ProviderConfig {
  LlmSettings llm;
  SearchSettings search;
  bool operator==(const ProviderConfig&) const = default;
};

nlohmann::json provider_config_to_json(const ProviderConfig& config);
/// Throws SchemaError.
ProviderConfig provider_config_from_json(const nlohmann::json& doc);

struct ChatMessage {
  std::string role;  // "system", "user" or "assistant"
  std::string text;
};

struct ResponseChunk {
  std::string turn_id;
  std::size_t chunk_index = 0;
  std::string text;
  bool is_final = false;
};

/// Receives chunks in order. Returning false cancels the stream.
using ChunkSink = std::function<bool(const ResponseChunk&)>;

enum class StreamStatus { completed, cancelled };

struct ChatOutcome {
  std::string full_text;
  std::size_t chunk_count = 0;  // including the final marker
  StreamStatus status = StreamStatus::completed;
};

struct SearchResult {
  std::int64_t rank = 0;
  std::string title;
  std::string url;
  std::string snippet;
  bool operator==(const SearchResult&) const = default;
};

struct ResultPage {
  std::string query_text;
  std::vector<SearchResult> results;
  /// The EmptyResults signal: the provider answered but matched nothing.
  bool empty_results() const { return results.empty(); }
};

enum class ProbeStatus { ok, auth_failed, unreachable };

std::string_view to_string(ProbeStatus status);

struct CredentialReport {
  ProbeStatus llm = ProbeStatus::ok;
  ProbeStatus search = ProbeStatus::ok;
  std::string llm_detail;
  std::string search_detail;
};

// ---------------------------------------------------------------------------

/// API keys encrypted at rest (XSalsa20-Poly1305 under a key derived from the
/// service secret), stored in the credentials collection under
/// "api-key.<ref>". Provider configurations live next to them under
/// "provider-config.<ref>".
class CredentialStore {
 public:
  /// An empty secret leaves the store read-only for keys.
  CredentialStore(Store& store, std::string secret);

  void set_key(const std::string& key_ref, const std::string& plaintext);
  std::optional<std::string> get_key(const std::string& key_ref) const;
  void remove_key(const std::string& key_ref);

  void put_provider_config(const std::string& ref, const ProviderConfig& config);
  /// "mock" always resolves to the built-in mock configuration.
  std::optional<ProviderConfig> provider_config(const std::string& ref) const;
  std::vector<std::string> provider_config_refs() const;

  /// Corpus used by the built-in "mock" configuration.
  void set_default_corpus(std::string path) { default_corpus_ = std::move(path); }

 private:
  Store& store_;
  std::string secret_;
  std::string default_corpus_;
};

/// Fixture documents for the mock-corpus provider: one tab-separated record per
/// line (id, title, url, body, score); blank lines and '#' comments skipped.
struct CorpusDocument {
  std::string id;
  std::string title;
  std::string url;
  std::string body;
  double score = 0.0;
};

std::vector<CorpusDocument> parse_corpus(std::string_view text);
std::vector<CorpusDocument> load_corpus(const std::string& path);

/// Documents sharing at least one lowercase alphanumeric token with the query,
/// ordered by score (desc) then id, truncated to `limit`, ranked from 1.
std::vector<SearchResult> search_corpus(std::span<const CorpusDocument> corpus, std::string_view query,
                                        std::size_t limit);

/// Response text mock-echo produces for a prompt.
std::string mock_echo_text(std::string_view prompt);

struct GatewayOptions {
  std::chrono::milliseconds connect_timeout{10000};
  std::chrono::milliseconds stream_timeout{120000};
  /// Extra attempts for retryable failures that happen before any chunk.
  int retries = 1;
};

/// Stateless front for the configured chat and search providers.
class ProviderGateway {
 public:
  explicit ProviderGateway(const CredentialStore* credentials, GatewayOptions options = {});

  /// Streams the reply to the last history entry (which must be the user's
  /// prompt) into `sink`: text chunks with dense indices, then one empty
  /// chunk with is_final set. A failure mid-stream throws after the chunks
  /// already delivered. Throws PreconditionViolation, AuthError,
  /// ProviderUnavailable, ContentError.
  ChatOutcome chat_complete(const ProviderConfig& config, std::span<const ChatMessage> history,
                            const std::string& turn_id, const ChunkSink& sink) const;

  /// Throws PreconditionViolation (empty query), AuthError,
  /// ProviderUnavailable. An empty page is the EmptyResults signal.
  ResultPage search(const ProviderConfig& config, const std::string& query) const;

  /// One minimal request per configured provider; never throws.
  CredentialReport verify_credentials(const ProviderConfig& config) const;

  const GatewayOptions& options() const { return options_; }

 private:
  std::string resolve_key(const std::string& key_ref) const;
  const std::vector<CorpusDocument>& corpus(const std::string& path) const;

  const CredentialStore* credentials_;
  GatewayOptions options_;
  mutable std::mutex corpus_mutex_;
  mutable std::map<std::string, std::vector<CorpusDocument>> corpora_;
};

}  // namespace studyflow
