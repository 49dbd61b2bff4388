#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace studyflow {

enum class Collection { studies, sessions, responses, admin_accounts, credentials };

std::string_view to_string(Collection collection);

/// Keys are one or more '/'-separated segments of [A-Za-z0-9._-]. A
/// multi-segment key's first segment names the study partition it lives in.
struct DocumentRef {
  Collection collection = Collection::studies;
  std::string key;
};

struct Document {
  std::string value;
  std::uint64_t version = 0;
};

/// Document (read-modify-write with optimistic versions) and append-only
/// stream storage. Every implementation is safe under arbitrary concurrency;
/// writes are durable before the call returns.
class Store {
 public:
  virtual ~Store() = default;

  virtual std::optional<Document> get(const DocumentRef& ref) const = 0;

  /// Writes `value` if the stored version equals `expected_version` (0 for a
  /// document that does not exist yet). Returns the new version. Throws
  /// VersionConflict or StorageFailure.
  virtual std::uint64_t put(const DocumentRef& ref, std::string_view value,
                            std::uint64_t expected_version) = 0;

  /// Deletes the document if its version matches. Throws VersionConflict.
  virtual void erase(const DocumentRef& ref, std::uint64_t expected_version) = 0;

  /// Keys in `collection` starting with `prefix`, sorted.
  virtual std::vector<std::string> list(Collection collection, std::string_view prefix) const = 0;

  /// Appends one record (must not contain '\n'); returns its dense offset.
  virtual std::uint64_t append(const std::string& stream_key, std::string_view record) = 0;

  /// Records with offset >= `from_offset`, in order. Reflects a prefix of the
  /// stream as of the call. Unknown streams are empty.
  virtual std::vector<std::string> scan(const std::string& stream_key,
                                        std::uint64_t from_offset) const = 0;

  /// Stream keys under `prefix`, sorted.
  virtual std::vector<std::string> streams(std::string_view prefix) const = 0;
};

/// Throws StorageFailure unless `key` is a valid document or stream key.
void check_key(std::string_view key);

class MemoryStore final : public Store {
 public:
  std::optional<Document> get(const DocumentRef& ref) const override;
  std::uint64_t put(const DocumentRef& ref, std::string_view value,
                    std::uint64_t expected_version) override;
  void erase(const DocumentRef& ref, std::uint64_t expected_version) override;
  std::vector<std::string> list(Collection collection, std::string_view prefix) const override;
  std::uint64_t append(const std::string& stream_key, std::string_view record) override;
  std::vector<std::string> scan(const std::string& stream_key,
                                std::uint64_t from_offset) const override;
  std::vector<std::string> streams(std::string_view prefix) const override;

 private:
  mutable std::mutex mutex_;
  std::map<std::pair<Collection, std::string>, Document> documents_;
  std::map<std::string, std::vector<std::string>> streams_;
};

/// File-backed store rooted at a directory:
///
///   <root>/<partition>/<collection>/<leaf>.doc   documents ("_global" when
///                                                the key has one segment)
///   <root>/<stream_key>.log                      streams, one record per line
///
/// Documents are replaced atomically (write temp, fsync, rename, fsync dir)
/// and carry their version in a header line. Stream appends are fsync'd; a
/// torn trailing line left by a crash is discarded when the stream is opened.
class FileStore final : public Store {
 public:
  explicit FileStore(std::filesystem::path root);
  ~FileStore() override;

  FileStore(const FileStore&) = delete;
  FileStore& operator=(const FileStore&) = delete;

  std::optional<Document> get(const DocumentRef& ref) const override;
  std::uint64_t put(const DocumentRef& ref, std::string_view value,
                    std::uint64_t expected_version) override;
  void erase(const DocumentRef& ref, std::uint64_t expected_version) override;
  std::vector<std::string> list(Collection collection, std::string_view prefix) const override;
  std::uint64_t append(const std::string& stream_key, std::string_view record) override;
  std::vector<std::string> scan(const std::string& stream_key,
                                std::uint64_t from_offset) const override;
  std::vector<std::string> streams(std::string_view prefix) const override;

  const std::filesystem::path& root() const { return root_; }

 private:
  struct StreamState;

  std::filesystem::path document_path(const DocumentRef& ref) const;
  std::filesystem::path stream_path(const std::string& stream_key) const;
  std::mutex& key_mutex(const std::string& id) const;
  StreamState& stream_state(const std::string& stream_key) const;

  std::filesystem::path root_;
  mutable std::mutex registry_mutex_;
  mutable std::map<std::string, std::unique_ptr<std::mutex>> key_mutexes_;
  mutable std::map<std::string, std::unique_ptr<StreamState>> stream_states_;
};

}  // namespace studyflow
