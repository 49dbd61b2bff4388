#include <algorithm>

#include "studyflow/error.hpp"
#include "studyflow/storage.hpp"

namespace studyflow {

std::string_view to_string(Collection collection) {
  switch (collection) {
    case Collection::studies: return "studies";
    case Collection::sessions: return "sessions";
    case Collection::responses: return "responses";
    case Collection::admin_accounts: return "admin_accounts";
    case Collection::credentials: return "credentials";
  }
  return "unknown";
}

void check_key(std::string_view key) {
  if (key.empty()) throw StorageFailure("empty storage key");
  std::size_t segment_start = 0;
  for (std::size_t i = 0; i <= key.size(); ++i) {
    if (i == key.size() || key[i] == '/') {
      const auto segment = key.substr(segment_start, i - segment_start);
      if (segment.empty() || segment == "." || segment == "..") {
        throw StorageFailure("invalid storage key '" + std::string(key) + "'");
      }
      segment_start = i + 1;
      continue;
    }
    const char c = key[i];
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '.' || c == '_' || c == '-';
    if (!ok) throw StorageFailure("invalid character in storage key '" + std::string(key) + "'");
  }
}

std::optional<Document> MemoryStore::get(const DocumentRef& ref) const {
  std::lock_guard lock(mutex_);
  auto it = documents_.find({ref.collection, ref.key});
  if (it == documents_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t MemoryStore::put(const DocumentRef& ref, std::string_view value,
                               std::uint64_t expected_version) {
  check_key(ref.key);
  std::lock_guard lock(mutex_);
  auto& slot = documents_[{ref.collection, ref.key}];
  if (slot.version != expected_version) {
    throw VersionConflict("expected version " + std::to_string(expected_version) + ", stored " +
                          std::to_string(slot.version));
  }
  slot.value = std::string(value);
  return ++slot.version;
}

void MemoryStore::erase(const DocumentRef& ref, std::uint64_t expected_version) {
  std::lock_guard lock(mutex_);
  auto it = documents_.find({ref.collection, ref.key});
  const std::uint64_t stored = it == documents_.end() ? 0 : it->second.version;
  if (stored != expected_version) throw VersionConflict("stale version on erase");
  if (it != documents_.end()) documents_.erase(it);
}

std::vector<std::string> MemoryStore::list(Collection collection, std::string_view prefix) const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, doc] : documents_) {
    if (id.first == collection && id.second.starts_with(prefix) && doc.version > 0) {
      out.push_back(id.second);
    }
  }
  return out;
}

std::uint64_t MemoryStore::append(const std::string& stream_key, std::string_view record) {
  check_key(stream_key);
  if (record.find('\n') != std::string_view::npos) throw StorageFailure("record contains a newline");
  std::lock_guard lock(mutex_);
  auto& stream = streams_[stream_key];
  stream.emplace_back(record);
  return stream.size() - 1;
}

std::vector<std::string> MemoryStore::scan(const std::string& stream_key,
                                           std::uint64_t from_offset) const {
  std::lock_guard lock(mutex_);
  auto it = streams_.find(stream_key);
  if (it == streams_.end() || from_offset >= it->second.size()) return {};
  return {it->second.begin() + static_cast<std::ptrdiff_t>(from_offset), it->second.end()};
}

std::vector<std::string> MemoryStore::streams(std::string_view prefix) const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [key, records] : streams_) {
    if (key.starts_with(prefix)) out.push_back(key);
  }
  return out;
}

}  // namespace studyflow
