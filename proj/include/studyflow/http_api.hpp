#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "studyflow/clock.hpp"
#include "studyflow/providers.hpp"
#include "studyflow/service.hpp"
#include "studyflow/storage.hpp"

namespace httplib {
class Server;
}

namespace studyflow {

enum class Access { open, admin, participant, test_only };

struct RouteInfo {
  std::string method;
  /// httplib pattern with ":name" path parameters.
  std::string pattern;
  Access access = Access::open;
};

/// The complete endpoint catalog, in registration order.
const std::vector<RouteInfo>& route_catalog();

/// HTTP status a service error maps to.
int http_status(const Error& error);

/// Registers every route of route_catalog() on `server`. `test_clock` is the
/// clock the test-only endpoints drive; it must be null outside test mode.
void install_routes(httplib::Server& server, StudyService& service, VirtualClock* test_clock);

struct ServerConfig {
  std::string bind_address = "127.0.0.1";
  /// 0 picks a free port.
  int port = 8080;
  /// Empty keeps all data in memory.
  std::filesystem::path storage_root;
  /// Credential-encryption secret; empty disables storing API keys.
  std::string secret;
  bool test_mode = false;
  /// Corpus for the built-in "mock" provider configuration.
  std::string corpus_path;
  GatewayOptions gateway;
  ServiceOptions service;
  /// Virtual clock start in test mode.
  TimestampMs virtual_start_ms = 1'700'000'000'000;

  /// Fills unset fields from STUDYFLOW_BIND, STUDYFLOW_PORT,
  /// STUDYFLOW_STORAGE, STUDYFLOW_SECRET, STUDYFLOW_TEST_MODE and
  /// STUDYFLOW_CORPUS.
  static ServerConfig from_environment();
};

/// A running service: storage, clock, gateway, business logic and HTTP server.
class ServiceHost {
 public:
  explicit ServiceHost(ServerConfig config);
  ~ServiceHost();

  ServiceHost(const ServiceHost&) = delete;
  ServiceHost& operator=(const ServiceHost&) = delete;

  /// Binds and serves on a background thread; returns the bound port. Throws
  /// StorageFailure when the address cannot be bound.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();

  int port() const { return port_; }
  std::string base_url() const;
  StudyService& service() { return *service_; }
  Store& store() { return *store_; }
  VirtualClock* virtual_clock() { return virtual_clock_.get(); }

 private:
  int bind();

  ServerConfig config_;
  std::unique_ptr<Store> store_;
  std::unique_ptr<VirtualClock> virtual_clock_;
  std::unique_ptr<SystemClock> system_clock_;
  std::unique_ptr<CredentialStore> credentials_;
  std::unique_ptr<ProviderGateway> gateway_;
  std::unique_ptr<StudyService> service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace studyflow
