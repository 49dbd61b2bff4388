#include "studyflow/sse.hpp"

namespace studyflow {

std::vector<SseEvent> SseParser::feed(std::string_view bytes) {
  buffer_.append(bytes);
  std::vector<SseEvent> out;
  for (;;) {
    // Normalize CRLF lazily: look for either terminator.
    std::size_t end = std::string::npos;
    std::size_t sep_len = 0;
    for (std::size_t i = 0; i + 1 < buffer_.size(); ++i) {
      if (buffer_[i] == '\n' && buffer_[i + 1] == '\n') {
        end = i;
        sep_len = 2;
        break;
      }
      if (i + 3 < buffer_.size() && buffer_.compare(i, 4, "\r\n\r\n") == 0) {
        end = i;
        sep_len = 4;
        break;
      }
    }
    if (end == std::string::npos) break;
    const std::string block = buffer_.substr(0, end);
    buffer_.erase(0, end + sep_len);

    SseEvent event;
    bool has_data = false;
    std::size_t pos = 0;
    while (pos <= block.size()) {
      std::size_t nl = block.find('\n', pos);
      if (nl == std::string::npos) nl = block.size();
      std::string line = block.substr(pos, nl - pos);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      pos = nl + 1;
      if (line.empty() || line.front() == ':') continue;
      const auto colon = line.find(':');
      std::string field = line.substr(0, colon);
      std::string value = colon == std::string::npos ? "" : line.substr(colon + 1);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      if (field == "data") {
        if (has_data) event.data.push_back('\n');
        event.data += value;
        has_data = true;
      } else if (field == "event") {
        event.event = value;
      }
    }
    if (has_data || !event.event.empty()) out.push_back(std::move(event));
  }
  return out;
}

std::string sse_frame(std::string_view data, std::string_view event) {
  std::string out;
  if (!event.empty()) {
    out += "event: ";
    out += event;
    out += "\n";
  }
  std::size_t pos = 0;
  for (;;) {
    const auto nl = data.find('\n', pos);
    out += "data: ";
    out += data.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    out += "\n";
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  out += "\n";
  return out;
}

}  // namespace studyflow
