#include "studyflow/clock.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <random>
#include <stdexcept>

#include "studyflow/error.hpp"

namespace studyflow {

TimestampMs SystemClock::now_ms() const {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

void VirtualClock::advance_ms(TimestampMs delta) {
  if (delta < 0) throw std::invalid_argument("virtual clock cannot move backwards");
  now_.fetch_add(delta);
}

void VirtualClock::set_ms(TimestampMs value) {
  TimestampMs current = now_.load();
  while (value > current && !now_.compare_exchange_weak(current, value)) {
  }
  if (value < current) throw std::invalid_argument("virtual clock cannot move backwards");
}

std::string to_iso8601(TimestampMs ms) {
  std::time_t seconds = static_cast<std::time_t>(ms / 1000);
  int millis = static_cast<int>(ms % 1000);
  if (millis < 0) {
    millis += 1000;
    seconds -= 1;
  }
  std::tm tm{};
  gmtime_r(&seconds, &tm);
  std::array<char, 64> buf{};
  std::snprintf(buf.data(), buf.size(), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, millis);
  return buf.data();
}

std::string random_id(std::size_t bytes) {
  thread_local std::mt19937_64 engine{std::random_device{}()};
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes * 2);
  std::uniform_int_distribution<int> dist(0, 255);
  for (std::size_t i = 0; i < bytes; ++i) {
    const int b = dist(engine);
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xF]);
  }
  return out;
}

std::string_view to_string(GateReason reason) {
  switch (reason) {
    case GateReason::consent_incomplete: return "consent_incomplete";
    case GateReason::missing_required: return "missing_required";
    case GateReason::below_min_interactions: return "below_min_interactions";
    case GateReason::attention_failed: return "attention_failed";
    case GateReason::pending_trigger: return "pending_trigger";
  }
  return "unknown";
}

}  // namespace studyflow
