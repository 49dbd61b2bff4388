#include <algorithm>

#include "studyflow/interaction_log.hpp"

namespace studyflow {

using nlohmann::json;

std::string_view to_string(TurnStatus status) {
  switch (status) {
    case TurnStatus::streaming: return "streaming";
    case TurnStatus::complete: return "complete";
    case TurnStatus::failed: return "failed";
    case TurnStatus::cancelled: return "cancelled";
  }
  return "unknown";
}

std::vector<SerpEntry> serp_from_json(const json& serp) {
  std::vector<SerpEntry> out;
  for (const auto& item : serp) {
    out.push_back({item.at("rank").get<std::int64_t>(), item.value("title", ""), item.at("url").get<std::string>(),
                   item.value("snippet", "")});
  }
  return out;
}

json serp_to_json(std::span<const SerpEntry> serp) {
  json out = json::array();
  for (const auto& entry : serp) {
    out.push_back({{"rank", entry.rank}, {"title", entry.title}, {"url", entry.url}, {"snippet", entry.snippet}});
  }
  return out;
}

std::vector<ChatTurn> fold_chat_turns(std::span<const InteractionEvent> timeline) {
  std::vector<ChatTurn> turns;
  auto find = [&](const json& payload) -> ChatTurn* {
    const auto turn_id = payload.value("turn_id", "");
    auto it = std::find_if(turns.begin(), turns.end(), [&](const ChatTurn& t) { return t.turn_id == turn_id; });
    return it == turns.end() ? nullptr : &*it;
  };
  for (const auto& event : timeline) {
    const json& p = event.payload;
    switch (event.kind) {
      case EventKind::prompt: {
        ChatTurn turn;
        turn.turn_id = p.at("turn_id").get<std::string>();
        turn.task_id = p.at("task_id").get<std::string>();
        turn.turn_index = p.at("turn_index").get<std::int64_t>();
        turn.prompt_text = p.at("text").get<std::string>();
        turn.typing_start_ms = p.value("typing_start_ms", TimestampMs{0});
        turn.typing_end_ms = p.value("typing_end_ms", TimestampMs{0});
        turn.submitted_ms = p.value("submitted_ms", event.client_ts);
        turns.push_back(std::move(turn));
        break;
      }
      case EventKind::response_chunk:
        if (ChatTurn* turn = find(p)) {
          turn->response_text += p.at("text").get<std::string>();
          ++turn->chunk_count;
        }
        break;
      case EventKind::response_complete:
        if (ChatTurn* turn = find(p)) {
          turn->status = TurnStatus::complete;
          turn->response_completed_ms = event.server_ts;
        }
        break;
      case EventKind::response_error:
        if (ChatTurn* turn = find(p)) turn->status = TurnStatus::failed;
        break;
      case EventKind::response_cancelled:
        if (ChatTurn* turn = find(p)) turn->status = TurnStatus::cancelled;
        break;
      case EventKind::turn_rating:
        if (ChatTurn* turn = find(p)) turn->turn_rating = p.at("rating").get<std::int64_t>();
        break;
      default:
        break;
    }
  }
  return turns;
}

std::vector<SearchQueryRecord> fold_search_queries(std::span<const InteractionEvent> timeline) {
  std::vector<SearchQueryRecord> queries;
  for (const auto& event : timeline) {
    const json& p = event.payload;
    if (event.kind == EventKind::query) {
      SearchQueryRecord record;
      record.query_id = p.at("query_id").get<std::string>();
      record.task_id = p.at("task_id").get<std::string>();
      record.query_text = p.at("text").get<std::string>();
      record.typing_start_ms = p.value("typing_start_ms", TimestampMs{0});
      record.typing_end_ms = p.value("typing_end_ms", TimestampMs{0});
      record.issued_ms = p.value("issued_ms", event.client_ts);
      record.result_count = p.at("result_count").get<std::int64_t>();
      record.serp = serp_from_json(p.at("serp"));
      queries.push_back(std::move(record));
    } else if (event.kind == EventKind::click) {
      const auto query_id = p.at("query_id").get<std::string>();
      auto it = std::find_if(queries.begin(), queries.end(),
                             [&](const SearchQueryRecord& q) { return q.query_id == query_id; });
      if (it != queries.end()) {
        it->clicks.push_back({p.at("url").get<std::string>(), p.at("rank").get<std::int64_t>(),
                              p.value("clicked_ms", event.client_ts)});
      }
    }
  }
  return queries;
}

std::vector<NoteRecord> fold_notes(std::span<const InteractionEvent> timeline) {
  std::map<std::string, NoteRecord> latest;
  for (const auto& event : timeline) {
    if (event.kind != EventKind::note) continue;
    const auto task_id = event.payload.at("task_id").get<std::string>();
    latest[task_id] = {event.session_id, task_id, event.payload.at("text").get<std::string>(), event.server_ts};
  }
  std::vector<NoteRecord> out;
  for (auto& [task, note] : latest) out.push_back(std::move(note));
  return out;
}

std::map<std::string, std::int64_t> fold_trajectory_ratings(std::span<const InteractionEvent> timeline) {
  std::map<std::string, std::int64_t> ratings;
  for (const auto& event : timeline) {
    if (event.kind == EventKind::trajectory_rating) {
      ratings[event.payload.at("task_id").get<std::string>()] = event.payload.at("rating").get<std::int64_t>();
    }
  }
  return ratings;
}

std::vector<std::string> timestamp_warnings(std::span<const InteractionEvent> timeline) {
  std::vector<std::string> warnings;
  for (const auto& turn : fold_chat_turns(timeline)) {
    if (!(turn.typing_start_ms <= turn.typing_end_ms && turn.typing_end_ms <= turn.submitted_ms)) {
      warnings.push_back("turn " + turn.turn_id + ": typing timestamps out of order");
    }
  }
  for (const auto& query : fold_search_queries(timeline)) {
    if (!(query.typing_start_ms <= query.typing_end_ms && query.typing_end_ms <= query.issued_ms)) {
      warnings.push_back("query " + query.query_id + ": typing timestamps out of order");
    }
  }
  return warnings;
}

}  // namespace studyflow
