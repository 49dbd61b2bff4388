#pragma once

#include <atomic>
#include <cstdint>
#include <string>

namespace studyflow {

/// Milliseconds since the Unix epoch.
using TimestampMs = std::int64_t;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual TimestampMs now_ms() const = 0;
};

class SystemClock final : public Clock {
 public:
  TimestampMs now_ms() const override;
};

/// Manually driven clock for tests and the headless harness. Never moves
/// backwards.
class VirtualClock final : public Clock {
 public:
  explicit VirtualClock(TimestampMs start = 0) : now_(start) {}

  TimestampMs now_ms() const override { return now_.load(); }
  void advance_ms(TimestampMs delta);
  void set_ms(TimestampMs value);

 private:
  std::atomic<TimestampMs> now_;
};

/// "2024-01-02T03:04:05.678Z"
std::string to_iso8601(TimestampMs ms);

/// Random lowercase hex identifier with `bytes` bytes of entropy.
std::string random_id(std::size_t bytes = 12);

}  // namespace studyflow
