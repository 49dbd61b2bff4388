#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "studyflow/error.hpp"
#include "studyflow/storage.hpp"

namespace studyflow {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kDocMagic = "studyflow-doc 1";
constexpr std::string_view kGlobalPartition = "_global";

[[noreturn]] void fail_errno(const std::string& what, const fs::path& path) {
  throw StorageFailure(what + " '" + path.string() + "': " + std::strerror(errno));
}

class FileDescriptor {
 public:
  explicit FileDescriptor(int fd) : fd_(fd) {}
  ~FileDescriptor() {
    if (fd_ >= 0) ::close(fd_);
  }
  FileDescriptor(const FileDescriptor&) = delete;
  FileDescriptor& operator=(const FileDescriptor&) = delete;
  int get() const { return fd_; }
  int release() { return std::exchange(fd_, -1); }

 private:
  int fd_;
};

void write_all(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      fail_errno("write failed", path);
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

void fsync_directory(const fs::path& dir) {
  FileDescriptor fd(::open(dir.c_str(), O_RDONLY | O_DIRECTORY));
  if (fd.get() < 0) fail_errno("cannot open directory", dir);
  if (::fsync(fd.get()) != 0) fail_errno("fsync failed", dir);
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw StorageFailure("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_errno("cannot open", path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::optional<Document> parse_document(const fs::path& path) {
  std::error_code ec;
  if (!fs::exists(path, ec)) return std::nullopt;
  const std::string raw = read_file(path);
  const auto first_newline = raw.find('\n');
  const auto second_newline = first_newline == std::string::npos ? std::string::npos
                                                                 : raw.find('\n', first_newline + 1);
  if (second_newline == std::string::npos || std::string_view(raw).substr(0, first_newline) != kDocMagic) {
    throw StorageFailure("corrupt document header in '" + path.string() + "'");
  }
  const std::string version_line = raw.substr(first_newline + 1, second_newline - first_newline - 1);
  constexpr std::string_view kVersionPrefix = "version ";
  if (!version_line.starts_with(kVersionPrefix)) {
    throw StorageFailure("corrupt version line in '" + path.string() + "'");
  }
  Document doc;
  doc.version = std::stoull(version_line.substr(kVersionPrefix.size()));
  doc.value = raw.substr(second_newline + 1);
  return doc;
}

}  // namespace

struct FileStore::StreamState {
  std::mutex mutex;
  int fd = -1;
  std::uint64_t count = 0;
  std::uint64_t bytes = 0;
  fs::path path;

  ~StreamState() {
    if (fd >= 0) ::close(fd);
  }
};

FileStore::FileStore(fs::path root) : root_(std::move(root)) { ensure_directory(root_); }

FileStore::~FileStore() = default;

fs::path FileStore::document_path(const DocumentRef& ref) const {
  check_key(ref.key);
  const auto slash = ref.key.find('/');
  const std::string partition =
      slash == std::string::npos ? std::string(kGlobalPartition) : ref.key.substr(0, slash);
  const std::string leaf = slash == std::string::npos ? ref.key : ref.key.substr(slash + 1);
  return root_ / partition / std::string(to_string(ref.collection)) / (leaf + ".doc");
}

fs::path FileStore::stream_path(const std::string& stream_key) const {
  check_key(stream_key);
  return root_ / (stream_key + ".log");
}

std::mutex& FileStore::key_mutex(const std::string& id) const {
  std::lock_guard lock(registry_mutex_);
  auto& slot = key_mutexes_[id];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

FileStore::StreamState& FileStore::stream_state(const std::string& stream_key) const {
  const fs::path path = stream_path(stream_key);
  std::lock_guard lock(registry_mutex_);
  auto& slot = stream_states_[stream_key];
  if (slot) return *slot;

  auto state = std::make_unique<StreamState>();
  state->path = path;
  ensure_directory(path.parent_path());
  FileDescriptor fd(::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644));
  if (fd.get() < 0) fail_errno("cannot open stream", path);

  // Recover: count complete lines, drop a torn tail left by a crash mid-append.
  std::string contents = read_file(path);
  const auto last_newline = contents.rfind('\n');
  const std::uint64_t valid_bytes = last_newline == std::string::npos ? 0 : last_newline + 1;
  if (valid_bytes != contents.size()) {
    if (::ftruncate(fd.get(), static_cast<off_t>(valid_bytes)) != 0) fail_errno("ftruncate failed", path);
    if (::fsync(fd.get()) != 0) fail_errno("fsync failed", path);
  }
  state->count = static_cast<std::uint64_t>(
      std::count(contents.begin(), contents.begin() + static_cast<std::ptrdiff_t>(valid_bytes), '\n'));
  state->bytes = valid_bytes;
  state->fd = fd.release();
  slot = std::move(state);
  return *slot;
}

std::optional<Document> FileStore::get(const DocumentRef& ref) const {
  const fs::path path = document_path(ref);
  std::lock_guard lock(key_mutex(path.string()));
  return parse_document(path);
}

std::uint64_t FileStore::put(const DocumentRef& ref, std::string_view value,
                             std::uint64_t expected_version) {
  const fs::path path = document_path(ref);
  std::lock_guard lock(key_mutex(path.string()));
  const auto current = parse_document(path);
  const std::uint64_t stored = current ? current->version : 0;
  if (stored != expected_version) {
    throw VersionConflict("expected version " + std::to_string(expected_version) + ", stored " +
                          std::to_string(stored) + " for '" + ref.key + "'");
  }
  const std::uint64_t next = stored + 1;
  ensure_directory(path.parent_path());
  const fs::path temp = path.string() + ".tmp";
  {
    FileDescriptor fd(::open(temp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644));
    if (fd.get() < 0) fail_errno("cannot create", temp);
    std::string header(kDocMagic);
    header += "\nversion " + std::to_string(next) + "\n";
    write_all(fd.get(), header, temp);
    write_all(fd.get(), value, temp);
    if (::fsync(fd.get()) != 0) fail_errno("fsync failed", temp);
  }
  if (::rename(temp.c_str(), path.c_str()) != 0) fail_errno("rename failed", path);
  fsync_directory(path.parent_path());
  return next;
}

void FileStore::erase(const DocumentRef& ref, std::uint64_t expected_version) {
  const fs::path path = document_path(ref);
  std::lock_guard lock(key_mutex(path.string()));
  const auto current = parse_document(path);
  const std::uint64_t stored = current ? current->version : 0;
  if (stored != expected_version) throw VersionConflict("stale version on erase of '" + ref.key + "'");
  if (!current) return;
  if (::unlink(path.c_str()) != 0) fail_errno("unlink failed", path);
  fsync_directory(path.parent_path());
}

std::vector<std::string> FileStore::list(Collection collection, std::string_view prefix) const {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& partition : fs::directory_iterator(root_, ec)) {
    if (!partition.is_directory()) continue;
    const fs::path dir = partition.path() / std::string(to_string(collection));
    if (!fs::is_directory(dir, ec)) continue;
    const std::string partition_name = partition.path().filename().string();
    for (const auto& entry : fs::recursive_directory_iterator(dir, ec)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".doc") continue;
      std::string leaf = fs::relative(entry.path(), dir).replace_extension().generic_string();
      std::string key = partition_name == kGlobalPartition ? leaf : partition_name + "/" + leaf;
      if (key.starts_with(prefix)) out.push_back(std::move(key));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t FileStore::append(const std::string& stream_key, std::string_view record) {
  if (record.find('\n') != std::string_view::npos) throw StorageFailure("record contains a newline");
  StreamState& state = stream_state(stream_key);
  std::lock_guard lock(state.mutex);
  std::string line(record);
  line.push_back('\n');
  write_all(state.fd, line, state.path);
  if (::fdatasync(state.fd) != 0) fail_errno("fdatasync failed", state.path);
  state.bytes += line.size();
  return state.count++;
}

std::vector<std::string> FileStore::scan(const std::string& stream_key,
                                         std::uint64_t from_offset) const {
  std::error_code ec;
  if (!fs::exists(stream_path(stream_key), ec)) return {};
  StreamState& state = stream_state(stream_key);
  std::uint64_t count = 0;
  std::uint64_t bytes = 0;
  {
    std::lock_guard lock(state.mutex);
    count = state.count;
    bytes = state.bytes;
  }
  std::vector<std::string> out;
  if (from_offset >= count) return out;
  std::ifstream in(state.path, std::ios::binary);
  if (!in) fail_errno("cannot open stream", state.path);
  std::string line;
  std::uint64_t offset = 0;
  std::uint64_t consumed = 0;
  while (offset < count && consumed < bytes && std::getline(in, line)) {
    consumed += line.size() + 1;
    if (offset >= from_offset) out.push_back(line);
    ++offset;
  }
  return out;
}

std::vector<std::string> FileStore::streams(std::string_view prefix) const {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& entry : fs::recursive_directory_iterator(root_, ec)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".log") continue;
    std::string key = fs::relative(entry.path(), root_).replace_extension().generic_string();
    if (key.starts_with(prefix)) out.push_back(std::move(key));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace studyflow
