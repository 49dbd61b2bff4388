#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace studyflow {

/// One server-sent event: the optional `event:` name and the joined `data:`
/// lines.
struct SseEvent {
  std::string event;
  std::string data;
};

/// Incremental text/event-stream parser. Feed arbitrary byte slices; complete
/// events come back as soon as their blank-line terminator arrives.
class SseParser {
 public:
  std::vector<SseEvent> feed(std::string_view bytes);

 private:
  std::string buffer_;
};

/// "data: <payload>\n\n", with multi-line payloads split across data lines.
std::string sse_frame(std::string_view data, std::string_view event = {});

}  // namespace studyflow
