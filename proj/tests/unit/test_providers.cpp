#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "httplib.h"
#include "studyflow/error.hpp"
#include "studyflow/providers.hpp"
#include "support.hpp"

using namespace studyflow;
using nlohmann::json;

namespace {

// A loopback HTTP server standing in for a vendor API.
struct FakeVendor {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> hits{0};
  json last_body;
  httplib::Headers last_headers;
  std::mutex mutex;

  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~FakeVendor() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }

  void remember(const httplib::Request& req) {
    std::lock_guard lock(mutex);
    ++hits;
    last_body = json::parse(req.body, nullptr, false);
    last_headers = req.headers;
  }
};

std::string sse(const std::vector<std::string>& data) {
  std::string out;
  for (const auto& d : data) out += "data: " + d + "\n\n";
  return out;
}

struct GatewayFixture : ::testing::Test {
  MemoryStore store;
  CredentialStore credentials{store, "unit-secret"};
  GatewayOptions options = [] {
    GatewayOptions o;
    o.connect_timeout = std::chrono::milliseconds(2000);
    o.stream_timeout = std::chrono::milliseconds(2000);
    return o;
  }();

  void SetUp() override { credentials.set_key("vendor", "sk-test"); }

  ChatOutcome chat(const ProviderConfig& config, const std::string& prompt, std::vector<ResponseChunk>* chunks) {
    const ProviderGateway gateway(&credentials, options);
    const std::vector<ChatMessage> history = {{"system", "be brief"}, {"user", prompt}};
    return gateway.chat_complete(config, history, "turn-1", [&](const ResponseChunk& c) {
      chunks->push_back(c);
      return true;
    });
  }

  ProviderConfig vendor_config(LlmProviderKind kind, const std::string& url) {
    ProviderConfig config;
    config.llm.provider = kind;
    config.llm.model = "m-1";
    config.llm.api_key_ref = "vendor";
    config.llm.base_url = url;
    return config;
  }
};

std::string joined(const std::vector<ResponseChunk>& chunks) {
  std::string out;
  for (const auto& c : chunks) out += c.text;
  return out;
}

}  // namespace

TEST_F(GatewayFixture, MockEchoChunksByCodePoint) {
  ProviderConfig config;
  config.llm.mock.chunk_chars = 3;
  std::vector<ResponseChunk> chunks;
  // "echo: " is 6 code points, then four two-byte characters: 10 in total.
  const auto outcome = chat(config, "\xc3\xa9\xc3\xa8\xc3\xaa\xc3\xab", &chunks);
  ASSERT_EQ(chunks.size(), 5u);  // ceil(10/3) text chunks plus the final marker
  EXPECT_EQ(chunks[0].text, "ech");
  EXPECT_EQ(chunks[2].text, "\xc3\xa9\xc3\xa8\xc3\xaa");
  EXPECT_EQ(chunks[3].text, "\xc3\xab");
  EXPECT_TRUE(chunks[4].is_final);
  EXPECT_TRUE(chunks[4].text.empty());
  for (std::size_t i = 0; i < chunks.size(); ++i) EXPECT_EQ(chunks[i].chunk_index, i);
  EXPECT_EQ(outcome.full_text, "echo: \xc3\xa9\xc3\xa8\xc3\xaa\xc3\xab");
  EXPECT_EQ(outcome.chunk_count, 5u);
}

TEST_F(GatewayFixture, MockFaultLeavesPrefix) {
  ProviderConfig config;
  config.llm.mock.chunk_chars = 2;
  config.llm.mock.fail_after_chunks = 2;
  std::vector<ResponseChunk> chunks;
  EXPECT_THROW(chat(config, "hello", &chunks), ProviderUnavailable);
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(joined(chunks), "echo");
}

TEST_F(GatewayFixture, SinkCancellationStopsStream) {
  ProviderConfig config;
  config.llm.mock.chunk_chars = 1;
  const ProviderGateway gateway(&credentials, options);
  const std::vector<ChatMessage> history = {{"user", "abc"}};
  int seen = 0;
  const auto outcome = gateway.chat_complete(config, history, "t", [&](const ResponseChunk&) { return ++seen < 3; });
  EXPECT_EQ(outcome.status, StreamStatus::cancelled);
  EXPECT_EQ(outcome.full_text, "ec");
}

TEST_F(GatewayFixture, HistoryMustEndWithUserPrompt) {
  const ProviderGateway gateway(&credentials, options);
  const std::vector<ChatMessage> empty;
  const std::vector<ChatMessage> assistant_last = {{"user", "a"}, {"assistant", "b"}};
  auto sink = [](const ResponseChunk&) { return true; };
  EXPECT_THROW(gateway.chat_complete({}, empty, "t", sink), PreconditionViolation);
  EXPECT_THROW(gateway.chat_complete({}, assistant_last, "t", sink), PreconditionViolation);
}

TEST_F(GatewayFixture, OpenAiStream) {
  FakeVendor vendor;
  vendor.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    res.set_content(sse({R"({"choices":[{"delta":{"role":"assistant"}}]})", R"({"choices":[{"delta":{"content":"Hel"}}]})",
                         R"({"choices":[{"delta":{"content":"lo"}}]})", "[DONE]"}),
                    "text/event-stream");
  });
  vendor.start();
  std::vector<ResponseChunk> chunks;
  const auto outcome = chat(vendor_config(LlmProviderKind::openai_compatible, vendor.url()), "hi", &chunks);
  EXPECT_EQ(outcome.full_text, "Hello");
  ASSERT_EQ(chunks.size(), 3u);
  EXPECT_TRUE(chunks.back().is_final);
  EXPECT_EQ(vendor.last_body.at("model"), "m-1");
  EXPECT_EQ(vendor.last_body.at("stream"), true);
  EXPECT_EQ(vendor.last_body.at("messages").size(), 2u);
  EXPECT_EQ(vendor.last_headers.find("Authorization")->second, "Bearer sk-test");
}

TEST_F(GatewayFixture, ClaudeStream) {
  FakeVendor vendor;
  vendor.server.Post("/v1/messages", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    res.set_content("event: message_start\ndata: {\"type\":\"message_start\"}\n\n"
                    "event: content_block_delta\ndata: {\"type\":\"content_block_delta\",\"delta\":{\"text\":\"Bon\"}}\n\n"
                    "event: content_block_delta\ndata: {\"type\":\"content_block_delta\",\"delta\":{\"text\":\"jour\"}}\n\n"
                    "event: message_stop\ndata: {\"type\":\"message_stop\"}\n\n",
                    "text/event-stream");
  });
  vendor.start();
  std::vector<ResponseChunk> chunks;
  const auto outcome = chat(vendor_config(LlmProviderKind::claude_compatible, vendor.url()), "hi", &chunks);
  EXPECT_EQ(outcome.full_text, "Bonjour");
  // The system prompt travels separately from the messages.
  EXPECT_EQ(vendor.last_body.at("system"), "be brief");
  EXPECT_EQ(vendor.last_body.at("messages").size(), 1u);
  EXPECT_EQ(vendor.last_headers.find("x-api-key")->second, "sk-test");
}

TEST_F(GatewayFixture, GeminiStream) {
  FakeVendor vendor;
  vendor.server.Post(R"(/v1beta/models/m-1:streamGenerateContent)", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    EXPECT_EQ(req.get_param_value("alt"), "sse");
    res.set_content(sse({R"({"candidates":[{"content":{"parts":[{"text":"Ci"}]}}]})",
                         R"({"candidates":[{"content":{"parts":[{"text":"ao"}]},"finishReason":"STOP"}]})"}),
                    "text/event-stream");
  });
  vendor.start();
  std::vector<ResponseChunk> chunks;
  const auto outcome = chat(vendor_config(LlmProviderKind::gemini_compatible, vendor.url()), "hi", &chunks);
  EXPECT_EQ(outcome.full_text, "Ciao");
  EXPECT_EQ(vendor.last_body.at("contents").size(), 2u);
}

TEST_F(GatewayFixture, StatusCodesMapToErrors) {
  FakeVendor vendor;
  std::atomic<int> status{401};
  vendor.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    res.status = status.load();
    res.set_content("{}", "application/json");
  });
  vendor.start();
  const auto config = vendor_config(LlmProviderKind::openai_compatible, vendor.url());
  std::vector<ResponseChunk> chunks;
  EXPECT_THROW(chat(config, "x", &chunks), AuthError);
  status = 400;
  EXPECT_THROW(chat(config, "x", &chunks), ContentError);
  vendor.hits = 0;
  status = 503;
  EXPECT_THROW(chat(config, "x", &chunks), ProviderUnavailable);
  // One retry for a failure before the first chunk.
  EXPECT_EQ(vendor.hits.load(), 2);
}

TEST_F(GatewayFixture, RetrySucceedsBeforeFirstChunk) {
  FakeVendor vendor;
  vendor.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    if (vendor.hits == 1) {
      res.status = 502;
      return;
    }
    res.set_content(sse({R"({"choices":[{"delta":{"content":"ok"}}]})", "[DONE]"}), "text/event-stream");
  });
  vendor.start();
  std::vector<ResponseChunk> chunks;
  EXPECT_EQ(chat(vendor_config(LlmProviderKind::openai_compatible, vendor.url()), "x", &chunks).full_text, "ok");
  EXPECT_EQ(vendor.hits.load(), 2);
}

TEST_F(GatewayFixture, NoRetryAfterFirstChunk) {
  FakeVendor vendor;
  vendor.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    // Stream ends without the [DONE] marker.
    res.set_content(sse({R"({"choices":[{"delta":{"content":"par"}}]})"}), "text/event-stream");
  });
  vendor.start();
  std::vector<ResponseChunk> chunks;
  EXPECT_THROW(chat(vendor_config(LlmProviderKind::openai_compatible, vendor.url()), "x", &chunks), ProviderUnavailable);
  EXPECT_EQ(vendor.hits.load(), 1);
  ASSERT_EQ(chunks.size(), 1u);
  EXPECT_EQ(chunks[0].text, "par");
}

TEST_F(GatewayFixture, MissingKeyIsAuthError) {
  auto config = vendor_config(LlmProviderKind::openai_compatible, "http://127.0.0.1:1");
  config.llm.api_key_ref = "absent";
  std::vector<ResponseChunk> chunks;
  EXPECT_THROW(chat(config, "x", &chunks), AuthError);
}

TEST_F(GatewayFixture, WebSearchParsesResults) {
  FakeVendor vendor;
  vendor.server.Get("/search", [&](const httplib::Request& req, httplib::Response& res) {
    vendor.remember(req);
    EXPECT_EQ(req.get_param_value("q"), "bikes");
    res.set_content(R"({"web":{"results":[{"title":"A","url":"https://a.example","description":"x"},
                                             {"title":"bad","url":"not a url"},
                                             {"title":"B","url":"https://b.example"}]}})",
                    "application/json");
  });
  vendor.start();
  ProviderConfig config;
  config.search.provider = SearchProviderKind::generic_search_api;
  config.search.api_key_ref = "vendor";
  config.search.base_url = vendor.url() + "/search";
  const ProviderGateway gateway(&credentials, options);
  const auto page = gateway.search(config, "bikes");
  ASSERT_EQ(page.results.size(), 2u);
  EXPECT_EQ(page.results[0].rank, 1);
  EXPECT_EQ(page.results[1].rank, 2);
  EXPECT_EQ(page.results[1].url, "https://b.example");
}

TEST_F(GatewayFixture, ProbesClassifyResponses) {
  FakeVendor vendor;
  vendor.server.Get("/good/v1/models", [](const httplib::Request&, httplib::Response& res) { res.status = 200; });
  vendor.server.Get("/denied/v1/models", [](const httplib::Request&, httplib::Response& res) { res.status = 401; });
  vendor.server.Get("/broken/v1/models", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  vendor.server.Get("/search", [](const httplib::Request&, httplib::Response& res) { res.status = 403; });
  vendor.start();
  const ProviderGateway gateway(&credentials, options);

  auto report_for = [&](const std::string& prefix) {
    ProviderConfig config = vendor_config(LlmProviderKind::openai_compatible, vendor.url() + prefix);
    config.search.provider = SearchProviderKind::generic_search_api;
    config.search.api_key_ref = "vendor";
    config.search.base_url = vendor.url() + "/search";
    return gateway.verify_credentials(config);
  };
  EXPECT_EQ(report_for("/good").llm, ProbeStatus::ok);
  EXPECT_EQ(report_for("/denied").llm, ProbeStatus::auth_failed);
  EXPECT_EQ(report_for("/broken").llm, ProbeStatus::unreachable);
  EXPECT_EQ(report_for("/good").search, ProbeStatus::auth_failed);

  ProviderConfig refused = vendor_config(LlmProviderKind::gemini_compatible, "http://127.0.0.1:1");
  EXPECT_EQ(gateway.verify_credentials(refused).llm, ProbeStatus::unreachable);
  ProviderConfig keyless = vendor_config(LlmProviderKind::claude_compatible, vendor.url());
  keyless.llm.api_key_ref = "absent";
  EXPECT_EQ(gateway.verify_credentials(keyless).llm, ProbeStatus::auth_failed);
}

TEST_F(GatewayFixture, SilentEndpointTimesOut) {
  // A listening socket that never answers.
  httplib::Server silent;
  silent.Get("/v1/models", [](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(1500));
    res.status = 200;
  });
  const int port = silent.bind_to_any_port("127.0.0.1");
  std::thread t([&] { silent.listen_after_bind(); });
  silent.wait_until_ready();
  options.connect_timeout = std::chrono::milliseconds(300);
  const ProviderGateway gateway(&credentials, options);
  const auto started = std::chrono::steady_clock::now();
  const auto report =
      gateway.verify_credentials(vendor_config(LlmProviderKind::openai_compatible, "http://127.0.0.1:" + std::to_string(port)));
  EXPECT_EQ(report.llm, ProbeStatus::unreachable);
  EXPECT_LT(std::chrono::steady_clock::now() - started, std::chrono::milliseconds(1400));
  silent.stop();
  t.join();
}

TEST(Corpus, SearchOrdersByScoreThenId) {
  const auto corpus = load_corpus(testsupport::fixture("corpus.tsv"));
  ASSERT_EQ(corpus.size(), 12u);
  // Hand-checked: "climate" appears in d01, d02 and d12.
  const auto hits = search_corpus(corpus, "Climate", 10);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].url, "https://example.org/climate-basics");
  EXPECT_EQ(hits[1].url, "https://example.org/renewables");
  EXPECT_EQ(hits[2].url, "https://example.org/forecasting");
  EXPECT_EQ(hits[2].rank, 3);
  EXPECT_EQ(search_corpus(corpus, "climate", 2).size(), 2u);
  EXPECT_TRUE(search_corpus(corpus, "zebra", 10).empty());

  const std::vector<CorpusDocument> tied = {{"b", "x", "u2", "", 1.0}, {"a", "x", "u1", "", 1.0}};
  EXPECT_EQ(search_corpus(tied, "x", 5)[0].url, "u1");
}

TEST(Corpus, ParserSkipsCommentsAndBlanks) {
  const auto docs = parse_corpus("# header\n\nid1\tT\thttps://u\tbody\t0.5\n");
  ASSERT_EQ(docs.size(), 1u);
  EXPECT_EQ(docs[0].score, 0.5);
}

TEST(Credentials, EncryptedAtRest) {
  MemoryStore store;
  CredentialStore creds(store, "secret-a");
  creds.set_key("openai", "sk-very-secret");
  EXPECT_EQ(creds.get_key("openai"), "sk-very-secret");
  for (const auto& key : store.list(Collection::credentials, "")) {
    EXPECT_EQ(store.get({Collection::credentials, key})->value.find("sk-very-secret"), std::string::npos);
  }
  // A different secret cannot read it.
  EXPECT_EQ(CredentialStore(store, "secret-b").get_key("openai"), std::nullopt);
  creds.remove_key("openai");
  EXPECT_EQ(creds.get_key("openai"), std::nullopt);
}

TEST(Credentials, EmptySecretRefusesWrites) {
  MemoryStore store;
  CredentialStore creds(store, "");
  EXPECT_THROW(creds.set_key("k", "v"), PreconditionViolation);
}

TEST(Credentials, ProviderConfigsAndBuiltinMock) {
  MemoryStore store;
  CredentialStore creds(store, "s");
  creds.set_default_corpus("/tmp/corpus.tsv");
  const auto mock = creds.provider_config("mock");
  ASSERT_TRUE(mock);
  EXPECT_EQ(mock->llm.provider, LlmProviderKind::mock_echo);
  EXPECT_EQ(mock->search.corpus_path, "/tmp/corpus.tsv");
  EXPECT_THROW(creds.put_provider_config("mock", {}), PreconditionViolation);

  ProviderConfig config;
  config.llm.provider = LlmProviderKind::claude_compatible;
  config.llm.model = "m";
  config.llm.api_key_ref = "k";
  config.llm.temperature = 0.25;
  config.llm.mock.fail_after_chunks = 3;
  config.search.provider = SearchProviderKind::generic_search_api;
  config.search.results_per_query = 7;
  creds.put_provider_config("lab", config);
  EXPECT_EQ(creds.provider_config("lab"), config);
  EXPECT_EQ(creds.provider_config("nope"), std::nullopt);
  EXPECT_EQ(provider_config_from_json(provider_config_to_json(config)), config);
}
