#pragma once

// Vendor HTTP adapters behind ProviderGateway. Internal to the providers
// library.

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "studyflow/providers.hpp"

namespace studyflow::detail {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // "" or "/prefix", no trailing slash
};

/// Throws PreconditionViolation for URLs without a scheme and host.
Endpoint parse_base_url(const std::string& url);

/// Receives each text delta; returning false cancels.
using DeltaSink = std::function<bool(std::string_view)>;

/// Returns false when the sink cancelled, true when the vendor signalled the
/// end of the reply. Throws AuthError, ProviderUnavailable, ContentError.
bool stream_chat(const LlmSettings& settings, const std::string& api_key, std::span<const ChatMessage> history,
                 const GatewayOptions& options, const DeltaSink& on_delta);

std::vector<SearchResult> search_web(const SearchSettings& settings, const std::string& api_key,
                                     const std::string& query, const GatewayOptions& options);

ProbeStatus probe_llm(const LlmSettings& settings, const std::string& api_key, const GatewayOptions& options,
                      std::string& detail);
ProbeStatus probe_search(const SearchSettings& settings, const std::string& api_key,
                         const GatewayOptions& options, std::string& detail);

}  // namespace studyflow::detail
