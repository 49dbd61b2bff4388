// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Everything runs against mock providers.

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>

#include "studyflow/error.hpp"
#include "studyflow/trigger_engine.hpp"
#include "support.hpp"

#ifndef STUDYFLOW_BINARY
#define STUDYFLOW_BINARY "studyflow"
#endif

using namespace studyflow;
using nlohmann::json;
using testsupport::TestServer;

namespace {

/// Thrown by `require` with a description of the first violated expectation.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool condition, const std::string& what) {
  if (!condition) throw CheckFailed(what);
}

std::string script_text(const std::vector<json>& actions) {
  std::string out;
  for (const auto& a : actions) out += a.dump() + "\n";
  return out;
}

std::size_t code_points(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

/// Rows of `file` in the study's export, parsed by Python.
std::vector<std::vector<std::string>> export_rows(ApiClient& admin, const std::string& study, const std::string& file) {
  const auto res = admin.get("/api/admin/studies/" + study + "/export/" + file);
  require(res.status == 200, "export of " + file + " answered " + std::to_string(res.status));
  return testsupport::python_csv_rows(res.raw);
}

std::size_t column(const std::vector<std::vector<std::string>>& rows, const std::string& name) {
  const auto& header = rows.at(0);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw CheckFailed("no column " + name);
}

// ---------------------------------------------------------------------------
// 1. Default flow end to end

std::string default_flow() {
  const auto started = std::chrono::steady_clock::now();
  TestServer server;
  server.seed(testsupport::chat_study("e2e", 5));
  std::vector<json> script = {{{"action", "advance"}}, {{"action", "advance"}}, {{"action", "advance"}}};
  for (int i = 1; i <= 5; ++i) script.push_back({{"action", "chat"}, {"prompt", "prompt number " + std::to_string(i)}});
  script.push_back({{"action", "rate"}, {"target", "turn"}, {"turn", 0}, {"value", 4}});
  script.push_back({{"action", "rate"}, {"target", "turn"}, {"turn", 3}, {"value", 2}});
  script.push_back({{"action", "submit_task"}});
  for (int i = 0; i < 3; ++i) script.push_back({{"action", "advance"}});
  const auto transcript = run_script(server.url(), "e2e", parse_script(script_text(script)), server.harness_options());
  require(transcript.ok(), "harness reported problems: " + transcript.to_json().dump());
  require(transcript.completed, "session did not complete");

  const auto zip = server.admin->get("/api/admin/studies/e2e/export");
  require(zip.status == 200, "export download failed");
  const auto files = testsupport::python_zip_entries(zip.raw);
  require(files.size() == 8, "archive holds " + std::to_string(files.size()) + " files");
  const auto chat = testsupport::python_csv_rows(files.at("chat_history.csv"));
  const auto registration = testsupport::python_csv_rows(files.at("registration.csv"));
  require(chat.size() == 1 + 5, "chat_history has " + std::to_string(chat.size() - 1) + " data rows");
  require(registration.size() == 1 + 1, "registration has " + std::to_string(registration.size() - 1) + " data rows");
  const std::size_t rating = column(chat, "turn_rating");
  require(chat[1][rating] == "4" && chat[4][rating] == "2" && chat[2][rating].empty(), "turn ratings not exported");
  const auto elapsed = std::chrono::steady_clock::now() - started;
  require(elapsed < std::chrono::seconds(30), "took longer than 30 s");
  return "8 files, 5 chat rows, 1 registration row in " +
         std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count()) + " ms";
}

// ---------------------------------------------------------------------------
// 2. Trigger engine against a brute-force re-scan

enum class InKind { prompt, response, query, start, submit, tick, ack, before_submission };

struct Input {
  InKind kind;
  std::string task;
  TimestampMs at = 0;
  std::string instance;  // ack only, filled while running
};

struct Firing {
  std::string rule_id;
  std::string instance_id;
  std::string cause;
  TimestampMs at = 0;
  std::optional<std::string> task;
  auto operator<=>(const Firing&) const = default;
};

bool scope_matches(const TriggerRule& r, const std::string& task) { return !r.scope_task_id || *r.scope_task_id == task; }

std::string event_id(std::size_t i) { return "s:" + std::to_string(i + 1); }

/// Recomputes, from the whole input prefix, what fires at input i.
/// `earlier` holds the re-scan's own firings for inputs before i.
std::vector<Firing> rescan_at(const std::vector<TriggerRule>& rules, const std::vector<Input>& in, std::size_t i,
                              const std::vector<Firing>& earlier, const std::map<std::string, std::size_t>& acked_at) {
  std::vector<Firing> out;
  auto made_by = [&](const std::string& rule_id) {
    std::size_t n = 0;
    for (const auto& f : earlier) n += f.rule_id == rule_id;
    for (const auto& f : out) n += f.rule_id == rule_id;
    return n;
  };
  const Input& now = in[i];
  for (const auto& rule : rules) {
    bool fires = false;
    std::string cause;
    std::optional<std::string> task;
    if (const auto* n = std::get_if<AfterNPrompts>(&rule.condition)) {
      if (now.kind == InKind::prompt && scope_matches(rule, now.task)) {
        std::size_t count = 0;
        for (std::size_t j = 0; j <= i; ++j) count += in[j].kind == InKind::prompt && scope_matches(rule, in[j].task);
        fires = rule.repeat == TriggerRepeat::once ? count == std::size_t(n->n) : count % std::size_t(n->n) == 0;
      }
    } else if (const auto* n = std::get_if<AfterNResponses>(&rule.condition)) {
      if (now.kind == InKind::response && scope_matches(rule, now.task)) {
        std::size_t count = 0;
        for (std::size_t j = 0; j <= i; ++j) count += in[j].kind == InKind::response && scope_matches(rule, in[j].task);
        fires = rule.repeat == TriggerRepeat::once ? count == std::size_t(n->n) : count % std::size_t(n->n) == 0;
      }
    } else if (const auto* n = std::get_if<AfterNQueries>(&rule.condition)) {
      if (now.kind == InKind::query && scope_matches(rule, now.task)) {
        std::size_t count = 0;
        for (std::size_t j = 0; j <= i; ++j) count += in[j].kind == InKind::query && scope_matches(rule, in[j].task);
        fires = rule.repeat == TriggerRepeat::once ? count == std::size_t(n->n) : count % std::size_t(n->n) == 0;
      }
    } else if (const auto* p = std::get_if<Periodic>(&rule.condition)) {
      if (now.kind == InKind::tick) {
        // Latest task start not followed by a submission.
        std::optional<std::size_t> start;
        for (std::size_t j = 0; j < i; ++j) {
          if (in[j].kind == InKind::start) start = j;
          if (in[j].kind == InKind::submit) start.reset();
        }
        if (start && scope_matches(rule, in[*start].task)) {
          const TimestampMs anchor = in[*start].at;
          const TimestampMs period = static_cast<TimestampMs>(p->interval_s) * 1000;
          auto boundary = [&](TimestampMs t) { return t < anchor ? 0 : (t - anchor) / period; };
          // Highest boundary already consumed by an earlier tick or answer.
          TimestampMs consumed = 0;
          for (std::size_t j = *start + 1; j < i; ++j) {
            if (in[j].kind == InKind::tick) consumed = std::max(consumed, boundary(in[j].at));
            if (in[j].kind == InKind::ack && in[j].instance.rfind(rule.rule_id + ".", 0) == 0 &&
                in[j].instance.find('.', rule.rule_id.size() + 1) == std::string::npos) {
              consumed = std::max(consumed, boundary(in[j].at));
            }
          }
          bool pending = false;
          for (const auto& f : earlier) {
            if (f.rule_id != rule.rule_id) continue;
            auto it = acked_at.find(f.instance_id);
            pending = pending || it == acked_at.end() || it->second >= i;
          }
          fires = boundary(now.at) > consumed && !pending;
          cause = "tick";
          // The active task is the last started one, in scope or not.
          task = in[*start].task;
        }
      }
    } else if (std::holds_alternative<BeforeSubmission>(rule.condition)) {
      if (now.kind == InKind::before_submission && scope_matches(rule, now.task)) {
        fires = true;
        for (std::size_t j = 0; j < i; ++j) fires = fires && !(in[j].kind == InKind::before_submission && in[j].task == now.task);
        cause = "before_submission";
        task = now.task;
      }
    }
    if (!fires) continue;
    if (cause.empty()) {
      cause = event_id(i);
      task = now.task;
    }
    out.push_back({rule.rule_id, rule.rule_id + "." + std::to_string(made_by(rule.rule_id) + 1), cause, now.at, task});
  }
  return out;
}

std::string trigger_oracle() {
  std::mt19937_64 rng(20240501);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const std::vector<std::optional<std::string>> scopes = {std::nullopt, "t1", "t2"};
  const auto started = std::chrono::steady_clock::now();
  std::size_t total_firings = 0;
  std::size_t tick_firings = 0;
  std::size_t submission_firings = 0;
  for (int c = 0; c < 1000; ++c) {
    std::vector<TriggerRule> rules(static_cast<std::size_t>(pick(0, 5)));
    for (std::size_t r = 0; r < rules.size(); ++r) {
      rules[r].rule_id = "r" + std::to_string(r);
      rules[r].survey_id = "pop";
      rules[r].scope_task_id = scopes[static_cast<std::size_t>(pick(0, 2))];
      rules[r].repeat = pick(0, 1) ? TriggerRepeat::once : TriggerRepeat::every_multiple;
      switch (pick(0, 4)) {
        case 0: rules[r].condition = AfterNPrompts{pick(1, 5)}; break;
        case 1: rules[r].condition = AfterNResponses{pick(1, 5)}; break;
        case 2: rules[r].condition = AfterNQueries{pick(1, 5)}; break;
        case 3: rules[r].condition = Periodic{pick(1, 5)}; break;
        default: rules[r].condition = BeforeSubmission{}; break;
      }
    }
    std::vector<Input> inputs;
    TriggerState state = make_trigger_state(rules);
    std::vector<Firing> engine;
    std::vector<Firing> oracle;
    std::map<std::string, std::size_t> acked_at;
    TimestampMs clock = 0;
    const int length = pick(0, 200);
    for (int step = 0; step < length; ++step) {
      clock += pick(0, 3000);
      Input input{static_cast<InKind>(pick(0, 7)), pick(0, 1) ? "t1" : "t2", clock, ""};
      std::vector<Firing> pending;
      for (const auto& f : oracle) {
        if (!acked_at.count(f.instance_id)) pending.push_back(f);
      }
      if (input.kind == InKind::ack) {
        if (pending.empty()) {
          input.kind = InKind::tick;
        } else {
          input.instance = pending[static_cast<std::size_t>(pick(0, static_cast<int>(pending.size()) - 1))].instance_id;
        }
      }
      const std::size_t i = inputs.size();
      inputs.push_back(input);

      std::vector<FiredTrigger> fired;
      auto as_event = [&](EventKind kind) {
        InteractionEvent e;
        e.session_id = "s";
        e.seq = i + 1;
        e.event_id = event_id(i);
        e.kind = kind;
        e.payload = {{"task_id", input.task}};
        e.server_ts = input.at;
        auto r = observe(std::move(state), e);
        state = std::move(r.state);
        fired = std::move(r.fired);
      };
      switch (input.kind) {
        case InKind::prompt: as_event(EventKind::prompt); break;
        case InKind::response: as_event(EventKind::response_complete); break;
        case InKind::query: as_event(EventKind::query); break;
        case InKind::start: as_event(EventKind::task_started); break;
        case InKind::submit: as_event(EventKind::task_submitted); break;
        case InKind::tick: {
          auto r = observe(std::move(state), ClockTick{input.at});
          state = std::move(r.state);
          fired = std::move(r.fired);
          break;
        }
        case InKind::ack:
          state = acknowledge(std::move(state), input.instance, "resp", input.at);
          break;
        case InKind::before_submission: {
          const std::size_t before = state.instances.size();
          auto r = pending_before_submission(std::move(state), input.task, input.at);
          state = std::move(r.state);
          fired.assign(state.instances.begin() + static_cast<std::ptrdiff_t>(before), state.instances.end());
          break;
        }
      }
      for (const auto& f : fired) engine.push_back({f.rule_id, f.instance_id, f.cause, f.fired_at, f.task_id});
      const auto expected = rescan_at(rules, inputs, i, oracle, acked_at);
      oracle.insert(oracle.end(), expected.begin(), expected.end());
      if (input.kind == InKind::ack) acked_at[input.instance] = i;
    }
    auto a = engine;
    auto b = oracle;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    require(a == b, "case " + std::to_string(c) + ": engine fired " + std::to_string(a.size()) + ", re-scan " +
                        std::to_string(b.size()));
    // Declaration order within one input is part of the contract too.
    require(engine == oracle, "case " + std::to_string(c) + ": firing order differs");
    total_firings += engine.size();
    for (const auto& f : engine) {
      tick_firings += f.cause == "tick";
      submission_firings += f.cause == "before_submission";
    }
  }
  const auto elapsed = std::chrono::steady_clock::now() - started;
  require(elapsed < std::chrono::seconds(60), "took longer than 60 s");
  return "1000/1000 cases equal, " + std::to_string(total_firings) + " firings (" + std::to_string(tick_firings) +
         " periodic, " + std::to_string(submission_firings) + " before submission)";
}

// ---------------------------------------------------------------------------
// 3. Search logging integrity

std::string search_logging() {
  TestServer server;
  server.seed(testsupport::search_study("srch"));
  std::vector<json> script = {{{"action", "advance"}}, {{"action", "advance"}}, {{"action", "advance"}}};
  script.push_back({{"action", "search"}, {"query", "climate"}});
  script.push_back({{"action", "click"}, {"rank", 1}});
  script.push_back({{"action", "click"}, {"rank", 3}});
  script.push_back({{"action", "search"}, {"query", "bicycle cycling"}});
  script.push_back({{"action", "click"}, {"rank", 1}});
  script.push_back({{"action", "click"}, {"rank", 2}});
  script.push_back({{"action", "search"}, {"query", "coffee"}});
  const auto transcript = run_script(server.url(), "srch", parse_script(script_text(script)), server.harness_options());
  require(transcript.ok(), "harness reported problems: " + transcript.to_json().dump());

  // Stored result pages, straight from the event log.
  const auto timeline = server.admin->get("/api/admin/studies/srch/sessions/" + transcript.session_id + "/timeline");
  std::set<std::tuple<std::string, std::string, std::string>> snapshot;  // (query_id, url, rank)
  for (const auto& e : timeline.body.at("events")) {
    if (e.at("kind") != "query") continue;
    for (const auto& r : e.at("payload").at("serp")) {
      snapshot.insert({e.at("payload").at("query_id"), r.at("url"), std::to_string(r.at("rank").get<int>())});
    }
  }

  const auto rows = export_rows(*server.admin, "srch", "search_log.csv");
  const std::size_t qid = column(rows, "query_id");
  const std::size_t url = column(rows, "clicked_url");
  const std::size_t rank = column(rows, "clicked_rank");
  int clicked = 0;
  int clickless = 0;
  std::set<std::string> queries_with_clicks;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][url].empty()) {
      ++clickless;
      require(rows[i][rank].empty(), "click-less row has a rank");
      continue;
    }
    ++clicked;
    queries_with_clicks.insert(rows[i][qid]);
    require(snapshot.count({rows[i][qid], rows[i][url], rows[i][rank]}) == 1,
            "click " + rows[i][url] + " at rank " + rows[i][rank] + " is not in the stored page");
  }
  require(clicked == 4, std::to_string(clicked) + " click rows");
  require(clickless == 1, std::to_string(clickless) + " click-less rows");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    require(!(rows[i][url].empty() && queries_with_clicks.count(rows[i][qid])), "clicked query also has an empty row");
  }
  return "4 click rows matched stored pages, 1 click-less row";
}

// ---------------------------------------------------------------------------
// 4. Stream fidelity and fault handling

std::string stream_fidelity() {
  TestServer server;
  auto config = testsupport::chat_study("fid");
  config.provider_config_ref = "fid";
  json reg;
  const std::string invite = server.seed(config);
  ApiClient p = server.participant("fid", invite, &reg);
  testsupport::walk_to_task(p);

  std::mt19937_64 rng(77);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const std::vector<std::string> alphabet = {"a", "b", "z", " ", ",", "\"", "\n", "\xc3\xa9", "\xe2\x9c\x93",
                                             "\xf0\x9d\x84\x9e"};
  struct Case {
    std::string turn_id;
    std::string expected;  // stored text
    bool failed = false;
  };
  std::vector<Case> cases;
  std::set<std::size_t> chunk_counts;
  int faults = 0;
  for (int c = 0; c < 200; ++c) {
    std::string prompt = "q";
    const int extra = c == 1 ? 43 : pick(0, 43);
    for (int i = 0; i < extra; ++i) prompt += alphabet[static_cast<std::size_t>(pick(0, static_cast<int>(alphabet.size()) - 1))];
    const std::string full = "echo: " + prompt;
    const std::size_t n = code_points(full);
    const std::size_t chunk_chars = c == 0 ? n : c == 1 ? 1 : static_cast<std::size_t>(pick(1, static_cast<int>(n)));
    const std::size_t k = (n + chunk_chars - 1) / chunk_chars;
    const bool inject = c % 10 == 9 && k >= 2;
    const std::size_t fail_after = inject ? static_cast<std::size_t>(pick(1, static_cast<int>(k) - 1)) : 0;
    json provider = {{"llm", {{"provider", "mock-echo"}, {"mock", {{"chunk_chars", chunk_chars}}}}}};
    if (inject) provider["llm"]["mock"]["fail_after_chunks"] = fail_after;
    require(server.admin->put("/api/admin/credentials/providers/fid", provider).ok(), "provider update failed");

    const auto stream = p.chat({{"prompt", prompt}});
    require(stream.ok(), "chat " + std::to_string(c) + " refused: " + stream.error.dump());
    const json* last = stream.terminal();
    require(last != nullptr, "chat " + std::to_string(c) + " has no terminal frame");
    std::string text;
    std::size_t text_frames = 0;
    for (const auto& f : stream.frames) {
      if (f.contains("text")) {
        text += f.at("text").get<std::string>();
        ++text_frames;
      }
    }
    if (inject) {
      ++faults;
      require(last->contains("error"), "fault " + std::to_string(c) + " not reported");
      require(text_frames == fail_after, "fault " + std::to_string(c) + " delivered " + std::to_string(text_frames));
      require(last->at("partial_text") == text, "partial text differs from the streamed prefix");
      require(full.rfind(text, 0) == 0, "partial text is not a prefix of the reply");
    } else {
      require(!last->contains("error"), "chat " + std::to_string(c) + " failed: " + last->dump());
      require(text == full, "chat " + std::to_string(c) + " streamed the wrong text");
      require(text_frames == k, "chat " + std::to_string(c) + ": " + std::to_string(text_frames) + " frames, expected " +
                                    std::to_string(k));
      chunk_counts.insert(k);
    }
    cases.push_back({inject ? "" : last->at("turn_id").get<std::string>(), text, inject});
  }

  // Stored chunks, per turn, as the timeline reports them.
  const auto timeline = server.admin->get("/api/admin/studies/fid/sessions/" + reg.at("session_id").get<std::string>() + "/timeline");
  std::vector<std::string> turn_order;
  std::map<std::string, std::string> stored;
  for (const auto& e : timeline.body.at("events")) {
    const json& payload = e.at("payload");
    if (e.at("kind") == "prompt") turn_order.push_back(payload.at("turn_id"));
    if (e.at("kind") == "response_chunk") stored[payload.at("turn_id")] += payload.at("text").get<std::string>();
  }
  require(turn_order.size() == cases.size(), "timeline holds " + std::to_string(turn_order.size()) + " prompts");
  const auto rows = export_rows(*server.admin, "fid", "chat_history.csv");
  require(rows.size() == cases.size() + 1, "chat_history holds " + std::to_string(rows.size() - 1) + " rows");
  const std::size_t response = column(rows, "response_text");
  const std::size_t status = column(rows, "response_status");
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::string& turn = turn_order[i];
    require(cases[i].turn_id.empty() || cases[i].turn_id == turn, "turn order differs at " + std::to_string(i));
    require(stored[turn] == cases[i].expected, "stored reply differs for case " + std::to_string(i));
    require(rows[i + 1][response] == cases[i].expected, "exported reply differs for case " + std::to_string(i));
    require((rows[i + 1][status] == "failed") == cases[i].failed, "status column wrong for case " + std::to_string(i));
  }
  return "200/200 replies intact (" + std::to_string(chunk_counts.size()) + " distinct chunk counts, " +
         std::to_string(*chunk_counts.begin()) + ".." + std::to_string(*chunk_counts.rbegin()) + "), " +
         std::to_string(faults) + " faults kept their prefix";
}

// ---------------------------------------------------------------------------
// 5. Survey JSON round trip

std::string random_text(std::mt19937_64& rng, int max_len) {
  static const std::vector<std::string> pieces = {"a", "Q", "7", " ", "?", "\"", "\\", "\n", "\t", "/", "\xc3\xb1",
                                                  "\xe4\xb8\xad", "\xf0\x9f\x98\x80"};
  std::string out;
  const int n = std::uniform_int_distribution<int>(0, max_len)(rng);
  for (int i = 0; i < n; ++i) out += pieces[std::uniform_int_distribution<std::size_t>(0, pieces.size() - 1)(rng)];
  return out;
}

SurveyInstrument random_instrument(std::mt19937_64& rng, int index) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  SurveyInstrument s;
  s.survey_id = "rand-" + std::to_string(index);
  s.title = random_text(rng, 12);
  const int count = pick(1, 8);
  for (int q = 0; q < count; ++q) {
    Question question;
    question.question_id = "q" + std::to_string(q) + random_text(rng, 3);
    question.prompt = random_text(rng, 30);
    question.required = pick(0, 1) == 1;
    const int kind = pick(0, 2);
    if (kind == 0) {
      Likert l{pick(2, 11), random_text(rng, 6), random_text(rng, 6)};
      if (pick(0, 3) == 0) question.attention_check = AttentionCheck{std::int64_t{pick(1, l.points)}};
      question.answer_type = l;
    } else if (kind == 1) {
      MultipleChoice m;
      const int options = pick(2, 6);
      for (int o = 0; o < options; ++o) m.options.push_back("opt" + std::to_string(o) + random_text(rng, 5));
      m.allow_multiple = pick(0, 1) == 1;
      if (pick(0, 3) == 0) {
        const std::string chosen = m.options[static_cast<std::size_t>(pick(0, options - 1))];
        question.attention_check = m.allow_multiple ? AttentionCheck{std::vector<std::string>{chosen}} : AttentionCheck{chosen};
      }
      question.answer_type = m;
    } else {
      OpenEnded o;
      if (pick(0, 1)) o.max_length = static_cast<std::size_t>(pick(1, 5000));
      if (pick(0, 4) == 0) question.attention_check = AttentionCheck{std::string("blue")};
      if (o.max_length && question.attention_check && *o.max_length < 4) o.max_length = 4;
      question.answer_type = o;
    }
    s.questions.push_back(std::move(question));
  }
  return s;
}

std::string survey_round_trip() {
  TestServer server;
  server.seed(testsupport::chat_study("svy"));
  std::mt19937_64 rng(4242);
  for (int i = 0; i < 500; ++i) {
    const SurveyInstrument s = random_instrument(rng, i);
    require(validate_instrument(s).empty(), "generator produced an invalid instrument at " + std::to_string(i));
    const std::string text = export_survey_json(s);
    require(import_survey_json(text) == s, "in-process round trip differs at " + std::to_string(i));
    // Same through the admin import and export endpoints.
    const auto imported = server.admin->send_raw("POST", "/api/admin/studies/svy/surveys/scratch/import", text,
                                                 "application/json");
    require(imported.ok(), "import endpoint refused case " + std::to_string(i) + ": " + imported.raw);
    const auto exported = server.admin->get("/api/admin/studies/svy/surveys/scratch/export");
    require(import_survey_json(exported.raw) == s, "endpoint round trip differs at " + std::to_string(i));
  }
  return "500/500 instruments identical after import of export";
}

// ---------------------------------------------------------------------------
// 6. Export determinism

std::string export_determinism() {
  TestServer server;
  const std::string invite = server.seed(testsupport::chat_study("det"));
  ApiClient p = server.participant("det", invite);
  testsupport::walk_to_task(p);
  const std::string tricky = "commas, \"quotes\" and\nnew\r\nlines";
  require(p.chat({{"prompt", tricky}}).ok(), "chat failed");
  require(p.put("/api/participant/note", {{"text", tricky}}).ok(), "note failed");

  const auto first = server.admin->get("/api/admin/studies/det/export");
  const auto second = server.admin->get("/api/admin/studies/det/export");
  require(first.status == 200 && second.status == 200, "export download failed");
  require(first.raw == second.raw, "consecutive exports differ");

  const auto files = testsupport::python_zip_entries(first.raw);
  const auto notes = testsupport::python_csv_rows(files.at("notes.csv"));
  require(notes.size() == 2 && notes[1][column(notes, "note_text")] == tricky, "note text did not survive");
  const auto chat = testsupport::python_csv_rows(files.at("chat_history.csv"));
  require(chat.size() == 2 && chat[1][column(chat, "prompt_text")] == tricky, "prompt text did not survive");
  require(chat[1][column(chat, "response_text")] == "echo: " + tricky, "response text did not survive");

  // Encoder against the independent parser on random fields.
  std::mt19937_64 rng(99);
  const std::vector<std::string> pieces = {"x", ",", "\"", "\n", "\r\n", " ", "\xc3\xa9", ""};
  const CsvRow header = {"a", "b", "c"};
  std::vector<CsvRow> rows;
  for (int r = 0; r < 300; ++r) {
    CsvRow row;
    for (int f = 0; f < 3; ++f) {
      std::string field;
      const int n = std::uniform_int_distribution<int>(0, 8)(rng);
      for (int i = 0; i < n; ++i) field += pieces[std::uniform_int_distribution<std::size_t>(0, pieces.size() - 1)(rng)];
      row.push_back(field);
    }
    rows.push_back(row);
  }
  const auto parsed = testsupport::python_csv_rows(csv_encode(header, rows));
  require(parsed.size() == rows.size() + 1, "parser saw " + std::to_string(parsed.size()) + " records");
  for (std::size_t i = 0; i < rows.size(); ++i) require(parsed[i + 1] == rows[i], "row " + std::to_string(i) + " differs");
  return "byte-identical archives; 300 random rows and live text round-trip through Python csv";
}

// ---------------------------------------------------------------------------
// 7. Gate soundness

std::string gate_soundness() {
  TestServer server;
  std::map<int, std::string> invites;
  for (int t = 0; t <= 10; ++t) invites[t] = server.seed(testsupport::chat_study("gate" + std::to_string(t), t));
  std::vector<std::pair<int, int>> combos;
  for (int t = 0; t <= 10; ++t) {
    for (int n = 0; n <= 10; ++n) combos.emplace_back(t, n);
  }
  std::shuffle(combos.begin(), combos.end(), std::mt19937_64(5));
  int agree = 0;
  for (const auto& [threshold, prompts] : combos) {
    const std::string study = "gate" + std::to_string(threshold);
    ApiClient p = server.participant(study, invites[threshold]);
    testsupport::walk_to_task(p);
    for (int i = 0; i < prompts; ++i) require(p.chat({{"prompt", "p" + std::to_string(i)}}).ok(), "chat failed");
    const auto res = p.post("/api/participant/submit-task", json::object());
    const bool expected = prompts >= threshold;
    const bool accepted = res.status == 200;
    require(accepted == expected, "threshold " + std::to_string(threshold) + ", prompts " + std::to_string(prompts) +
                                      ": status " + std::to_string(res.status));
    if (!accepted) require(res.body.value("reason", "") == "below_min_interactions", "wrong refusal reason");
    ++agree;
  }
  return std::to_string(agree) + "/121 combinations";
}

// ---------------------------------------------------------------------------
// 8. Crash durability

struct Process {
  pid_t pid = -1;
  FILE* out = nullptr;
  int port = 0;
};

Process spawn_service(const std::string& storage) {
  int fds[2];
  require(::pipe(fds) == 0, "pipe failed");
  const pid_t pid = ::fork();
  require(pid >= 0, "fork failed");
  if (pid == 0) {
    ::dup2(fds[1], STDOUT_FILENO);
    ::close(fds[0]);
    ::close(fds[1]);
    ::execl(STUDYFLOW_BINARY, STUDYFLOW_BINARY, "serve", "--bind", "127.0.0.1", "--port", "0", "--storage",
            storage.c_str(), "--secret", "durability", static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(fds[1]);
  Process p{pid, ::fdopen(fds[0], "r"), 0};
  char line[256] = {0};
  require(std::fgets(line, sizeof line, p.out) != nullptr, "service printed nothing");
  const std::string text(line);
  p.port = std::stoi(text.substr(text.rfind(':') + 1));
  return p;
}

void kill_service(Process& p) {
  ::kill(p.pid, SIGKILL);
  ::waitpid(p.pid, nullptr, 0);
  std::fclose(p.out);
}

std::string crash_durability() {
  const auto dir = testsupport::temp_dir("crash");
  Process proc = spawn_service(dir.string());
  auto url = [&] { return "http://127.0.0.1:" + std::to_string(proc.port); };
  ApiClient admin(url());
  admin.admin_session("admin", "durable password");
  auto config = testsupport::chat_study("dur");
  const auto seeded = admin.post("/api/admin/studies", study_to_json(config));
  require(seeded.ok(), "seeding failed: " + seeded.raw);
  ApiClient p(url());
  const auto reg = p.post("/api/participant/register",
                          {{"study_id", "dur"}, {"invite_code", seeded.body.at("invite_code")}});
  require(reg.ok(), "registration failed");
  p.set_token(reg.body.at("token"));
  const std::string timeline_path = "/api/admin/studies/dur/sessions/" + reg.body.at("session_id").get<std::string>() + "/timeline";

  // The 50 acknowledged actions.
  std::vector<std::function<ApiResult()>> actions;
  auto survey_step = [&] {
    return [&] {
      const json step = p.get("/api/participant/state").body.at("step");
      if (step.at("kind") == "consent") return p.post("/api/participant/consent", {{"checked", json::array({true, true})}});
      return p.post("/api/participant/survey", {{"answers", auto_answers(survey_from_json(step.at("survey")))}});
    };
  };
  for (int i = 0; i < 3; ++i) actions.push_back(survey_step());
  std::string last_turn;
  for (int i = 0; i < 15; ++i) {
    actions.push_back([&, i] {
      const auto stream = p.chat({{"prompt", "durable " + std::to_string(i)}});
      ApiResult r;
      r.status = stream.ok() && stream.terminal() && !stream.terminal()->contains("error") ? 200 : 500;
      if (r.status == 200) last_turn = stream.terminal()->at("turn_id");
      return r;
    });
    actions.push_back([&] { return p.post("/api/participant/rate-turn", {{"turn_id", last_turn}, {"rating", 3}}); });
    actions.push_back([&, i] { return p.put("/api/participant/note", {{"text", "note " + std::to_string(i)}}); });
  }
  actions.push_back([&] { return p.post("/api/participant/submit-task", json::object()); });
  actions.push_back(survey_step());
  require(actions.size() == 50, "script has " + std::to_string(actions.size()) + " actions");

  json previous = json::array();
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const auto ack = actions[i]();
    require(ack.status >= 200 && ack.status < 300, "action " + std::to_string(i) + " refused: " + ack.raw);
    const json acknowledged = admin.get(timeline_path).body.at("events");
    require(acknowledged.size() > previous.size(), "action " + std::to_string(i) + " appended nothing");
    for (std::size_t e = 0; e < previous.size(); ++e) {
      require(acknowledged[e] == previous[e], "history rewritten before action " + std::to_string(i));
    }

    kill_service(proc);
    proc = spawn_service(dir.string());
    admin = ApiClient(url());
    admin.admin_session("admin", "durable password");
    p = ApiClient(url());
    const auto login = p.post("/api/participant/login", {{"study_id", "dur"},
                                                         {"participant_id", reg.body.at("participant_id")},
                                                         {"access_key", reg.body.at("access_key")}});
    require(login.ok(), "participant login after restart failed: " + login.raw);
    p.set_token(login.body.at("token"));
    const json recovered = admin.get(timeline_path).body.at("events");
    require(recovered == acknowledged, "after kill " + std::to_string(i) + ": " + std::to_string(recovered.size()) +
                                           " events recovered, " + std::to_string(acknowledged.size()) + " acknowledged");
    previous = recovered;
  }
  kill_service(proc);
  std::filesystem::remove_all(dir);
  return "50/50 restarts recovered exactly the acknowledged events (" + std::to_string(previous.size()) + " total)";
}

}  // namespace

int main() {
  ::signal(SIGPIPE, SIG_IGN);
  const std::vector<std::pair<std::string, std::function<std::string()>>> criteria = {
      {"default-flow end-to-end", default_flow},
      {"trigger oracle equivalence", trigger_oracle},
      {"search logging integrity", search_logging},
      {"stream fidelity and fault handling", stream_fidelity},
      {"survey JSON round-trip", survey_round_trip},
      {"export determinism", export_determinism},
      {"gate soundness", gate_soundness},
      {"crash durability", crash_durability},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto started = std::chrono::steady_clock::now();
    std::string verdict;
    std::string detail;
    try {
      detail = run();
      verdict = "PASS";
    } catch (const std::exception& e) {
      detail = e.what();
      verdict = "FAIL";
      ++failed;
    }
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
    std::cout << verdict << "  " << name << "  (" << ms.count() << " ms)  " << detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
