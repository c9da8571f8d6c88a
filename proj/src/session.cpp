#include "studyrig/session.hpp"

#include <algorithm>

#include "studyrig/error.hpp"

namespace studyrig {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

const ProcedureElement& current(const ParticipantSession& s, const Study& study) {
  const std::string* id = s.current_element_id();
  if (id == nullptr) throw errors::conflict("session_completed", "session is already completed");
  const ProcedureElement* e = find_element(study, *id);
  if (e == nullptr) throw Error("internal_error", "path element '" + *id + "' not in study", 500);
  return *e;
}

std::int64_t ceil_seconds(Millis ms) { return (ms.count() + 999) / 1000; }

json opt_time(const std::optional<TimePoint>& t) {
  return t ? json(to_iso8601(*t)) : json(nullptr);
}

// Timing + element_shown for path[cursor], entering a pause if needed.
void enter_current(ParticipantSession& s, const Study& study, TimePoint now,
                   std::vector<EventDraft>& out) {
  const ProcedureElement& e = current(s, study);
  const std::string& id = element_id(e);
  s.element_timing[id].started_at = now;
  out.push_back({id, Actor::system, EventType::element_shown,
                 json{{"element_type", element_type(e)}, {"cursor", s.cursor}}});
  if (const auto* pause = std::get_if<Pause>(&e)) {
    if (const auto* timed = std::get_if<TimedPause>(&pause->mode)) {
      s.status = SessionStatus::paused;
      s.paused_until = now + std::chrono::seconds(timed->duration_s);
      out.push_back({id, Actor::system, EventType::pause_started,
                     json{{"mode", "timed"},
                          {"duration_s", timed->duration_s},
                          {"resume_at", to_iso8601(*s.paused_until)}}});
    } else {
      s.status = SessionStatus::awaiting_approval;
      out.push_back({id, Actor::system, EventType::pause_started,
                     json{{"mode", "manual_approval"}}});
    }
  }
}

void require_current(const ParticipantSession& s, const std::string& element_id) {
  const std::string* cur = s.current_element_id();
  if (cur == nullptr) throw errors::conflict("session_completed", "session is already completed");
  if (*cur != element_id) {
    throw Error("element_mismatch",
                "element '" + element_id + "' is not the current element", 409,
                json{{"current_element_id", *cur}});
  }
}

json validate_answers(const Questionnaire& q, const json& answers) {
  if (!answers.is_object()) throw errors::malformed("answers: expected object");
  json stored = json::object();
  for (const auto& [key, value] : answers.items()) {
    auto it = std::find_if(q.items.begin(), q.items.end(),
                           [&key = key](const QuestionItem& i) { return i.item_id == key; });
    if (it == q.items.end()) {
      throw Error("invalid_answer", "unknown item '" + key + "'", 422, json{{"item_id", key}});
    }
    if (value.is_null()) continue;
    switch (it->kind) {
      case ItemKind::likert_1_5: {
        if (!value.is_number_integer() || value.get<std::int64_t>() < 1 ||
            value.get<std::int64_t>() > 5) {
          throw Error("invalid_answer", "item '" + key + "' expects an integer from 1 to 5", 422,
                      json{{"item_id", key}});
        }
        break;
      }
      case ItemKind::free_text:
        if (!value.is_string()) {
          throw Error("invalid_answer", "item '" + key + "' expects text", 422,
                      json{{"item_id", key}});
        }
        if (value.get<std::string>().find_first_not_of(" \t\r\n") == std::string::npos) {
          continue;  // blank counts as unanswered
        }
        break;
      case ItemKind::multiple_choice:
        if (!value.is_string() || std::find(it->choices.begin(), it->choices.end(),
                                            value.get<std::string>()) == it->choices.end()) {
          throw Error("invalid_answer", "item '" + key + "' expects one of its choices", 422,
                      json{{"item_id", key}});
        }
        break;
    }
    stored[key] = value;
  }
  std::vector<std::string> missing;
  for (const auto& item : q.items) {
    if (item.required && !stored.contains(item.item_id)) missing.push_back(item.item_id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error("missing_required", "required item(s) unanswered: " + list, 422,
                json{{"missing", missing}});
  }
  return stored;
}

std::string response_kind_hint(const BackendConfig* b) {
  if (b == nullptr) return "any";
  if (b->connector_kind == connector_kinds::mock_echo) return "answer";
  if (b->connector_kind == connector_kinds::keyword_search) return "results";
  if (b->connector_kind == connector_kinds::agentic_loop) return "agent_trace";
  if (b->connector_kind == connector_kinds::chat_completion) {
    return b->agentic_mode ? "agent_trace" : "answer";
  }
  return "any";
}

}  // namespace

std::string_view to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::active: return "active";
    case SessionStatus::paused: return "paused";
    case SessionStatus::awaiting_approval: return "awaiting_approval";
    case SessionStatus::completed: return "completed";
    case SessionStatus::abandoned: return "abandoned";
  }
  return "active";
}

SessionStatus parse_session_status(std::string_view s) {
  for (auto st : {SessionStatus::active, SessionStatus::paused, SessionStatus::awaiting_approval,
                  SessionStatus::completed, SessionStatus::abandoned}) {
    if (to_string(st) == s) return st;
  }
  throw errors::malformed("status: unknown session status '" + std::string(s) + "'");
}

json to_json(const ParticipantSession& s) {
  json timing = json::object();
  for (const auto& [id, t] : s.element_timing) {
    timing[id] = {{"started_at", opt_time(t.started_at)},
                  {"completed_at", opt_time(t.completed_at)}};
  }
  json transcripts = json::object();
  for (const auto& [id, turns] : s.transcripts) {
    json arr = json::array();
    for (const auto& t : turns) arr.push_back({{"role", t.role}, {"text", t.text}});
    transcripts[id] = arr;
  }
  return json{{"session_id", s.session_id},
              {"session_token", s.session_token},
              {"study_id", s.study_id},
              {"external_id", s.external_id},
              {"assignment", to_json(s.assignment)},
              {"path", s.path},
              {"cursor", s.cursor},
              {"status", to_string(s.status)},
              {"paused_until", opt_time(s.paused_until)},
              {"element_timing", timing},
              {"completion_code", s.completion_code ? json(*s.completion_code) : json(nullptr)},
              {"acknowledged", s.acknowledged},
              {"answers", s.answers},
              {"timed_out", s.timed_out},
              {"cleared_pauses", s.cleared_pauses},
              {"transcripts", transcripts},
              {"replies", s.replies},
              {"last_activity", to_iso8601(s.last_activity)},
              {"created_at", to_iso8601(s.created_at)}};
}

ParticipantSession session_from_json(const json& j) {
  auto time = [](const json& v) -> std::optional<TimePoint> {
    if (v.is_null()) return std::nullopt;
    return parse_iso8601(v.get<std::string>());
  };
  ParticipantSession s;
  s.session_id = j.at("session_id").get<std::string>();
  s.session_token = j.at("session_token").get<std::string>();
  s.study_id = j.at("study_id").get<std::string>();
  s.external_id = j.at("external_id").get<std::string>();
  s.assignment = assignment_from_json(j.at("assignment"));
  s.path = j.at("path").get<std::vector<std::string>>();
  s.cursor = j.at("cursor").get<std::size_t>();
  s.status = parse_session_status(j.at("status").get<std::string>());
  s.paused_until = time(j.at("paused_until"));
  for (const auto& [id, t] : j.at("element_timing").items()) {
    s.element_timing[id] = {time(t.at("started_at")), time(t.at("completed_at"))};
  }
  if (!j.at("completion_code").is_null()) {
    s.completion_code = j["completion_code"].get<std::string>();
  }
  s.acknowledged = j.at("acknowledged").get<std::set<std::string>>();
  s.answers = j.at("answers").get<std::map<std::string, json>>();
  s.timed_out = j.at("timed_out").get<std::set<std::string>>();
  s.cleared_pauses = j.at("cleared_pauses").get<std::set<std::string>>();
  for (const auto& [id, arr] : j.at("transcripts").items()) {
    auto& turns = s.transcripts[id];
    for (const auto& t : arr) turns.push_back({t.at("role").get<std::string>(),
                                               t.at("text").get<std::string>()});
  }
  s.replies = j.at("replies").get<std::map<std::string, json>>();
  s.last_activity = time(j.at("last_activity")).value_or(TimePoint{});
  s.created_at = time(j.at("created_at")).value_or(TimePoint{});
  return s;
}

namespace machine {

std::vector<EventDraft> start(ParticipantSession& s, const Study& study, TimePoint now) {
  std::vector<EventDraft> out;
  s.cursor = 0;
  s.status = SessionStatus::active;
  s.last_activity = now;
  enter_current(s, study, now, out);
  return out;
}

std::vector<EventDraft> check_timeout(ParticipantSession& s, const Study& study, TimePoint now) {
  const std::string* id = s.current_element_id();
  if (id == nullptr || s.timed_out.count(*id) != 0) return {};
  const auto* task = std::get_if<Task>(find_element(study, *id));
  if (task == nullptr || !task->time_limit_s) return {};
  const auto& started = s.element_timing[*id].started_at;
  if (!started || now < *started + std::chrono::seconds(*task->time_limit_s)) return {};
  s.timed_out.insert(*id);
  return {{*id, Actor::system, EventType::task_timeout,
           json{{"time_limit_s", *task->time_limit_s}}}};
}

bool reactivate(ParticipantSession& s) {
  if (s.status != SessionStatus::abandoned) return false;
  s.status = SessionStatus::active;
  return true;
}

std::vector<EventDraft> submit_response(ParticipantSession& s, const Study& study,
                                        const std::string& element_id, const json& body,
                                        TimePoint now) {
  require_current(s, element_id);
  const ProcedureElement& e = current(s, study);
  reactivate(s);
  s.last_activity = now;
  const std::string request_id = body.is_object() ? body.value("request_id", "") : "";

  return std::visit(
      overloaded{
          [&](const TextPage&) -> std::vector<EventDraft> {
            if (!body.is_object() || !body.value("acknowledge", false)) {
              throw Error("not_answerable", "text pages accept only {\"acknowledge\": true}",
                          409);
            }
            if (!s.acknowledged.insert(element_id).second) return {};
            return {{element_id, Actor::participant, EventType::ack, json::object()}};
          },
          [&](const Questionnaire& q) -> std::vector<EventDraft> {
            if (!body.is_object() || !body.contains("answers")) {
              throw errors::malformed("answers: required");
            }
            json stored = validate_answers(q, body["answers"]);
            s.answers[element_id] = stored;
            return {{element_id, Actor::participant, EventType::questionnaire_response,
                     json{{"answers", stored}, {"request_id", request_id}}}};
          },
          [&](const Task& t) -> std::vector<EventDraft> {
            if (t.completion_rule != CompletionRule::require_answer) {
              throw Error("not_answerable", "task does not collect an answer", 409);
            }
            if (!body.is_object() || !body.contains("answer") || !body["answer"].is_string()) {
              throw errors::malformed("answer: expected string");
            }
            const std::string answer = body["answer"].get<std::string>();
            if (answer.find_first_not_of(" \t\r\n") == std::string::npos) {
              throw Error("missing_required", "answer must not be empty", 422);
            }
            s.answers[element_id] = answer;
            return {{element_id, Actor::participant, EventType::answer_submitted,
                     json{{"answer", answer}, {"request_id", request_id}}}};
          },
          [&](const auto&) -> std::vector<EventDraft> {
            throw Error("not_answerable", "current element does not accept responses", 409);
          },
      },
      e);
}

std::vector<EventDraft> advance(ParticipantSession& s, const Study& study,
                                const std::optional<std::string>& expected_element,
                                TimePoint now, const CodeMinter& mint_code) {
  if (s.completed()) throw errors::conflict("session_completed", "session is already completed");
  if (expected_element) require_current(s, *expected_element);
  reactivate(s);
  s.last_activity = now;

  std::vector<EventDraft> out = check_timeout(s, study, now);
  const ProcedureElement& e = current(s, study);
  const std::string id = element_id(e);

  auto reject = [&](const char* code, std::string detail, json extra = json::object()) {
    extra["reason"] = code;
    return Error(code, std::move(detail), 409, std::move(extra));
  };

  std::visit(
      overloaded{
          [&](const TextPage& p) {
            if (p.require_acknowledge && s.acknowledged.count(id) == 0) {
              throw reject("ack_missing", "page must be acknowledged first");
            }
          },
          [&](const Questionnaire& q) {
            const bool any_required = std::any_of(q.items.begin(), q.items.end(),
                                                  [](const QuestionItem& i) { return i.required; });
            if (any_required && s.answers.count(id) == 0) {
              throw reject("answers_missing", "required questionnaire items are unanswered");
            }
          },
          [&](const Task& t) {
            if (t.completion_rule == CompletionRule::require_answer && s.answers.count(id) == 0 &&
                s.timed_out.count(id) == 0) {
              throw reject("answers_missing", "task requires an answer");
            }
          },
          [&](const Pause& p) {
            if (std::holds_alternative<TimedPause>(p.mode)) {
              if (s.status == SessionStatus::paused && s.paused_until && now < *s.paused_until) {
                const auto remaining = ceil_seconds(*s.paused_until - now);
                throw reject("pause_not_elapsed", "pause has not elapsed yet",
                             json{{"remaining_s", remaining},
                                  {"resume_at", to_iso8601(*s.paused_until)}});
              }
              if (s.cleared_pauses.insert(id).second) {
                out.push_back({id, Actor::system, EventType::pause_resumed,
                               json{{"reason", "elapsed"}}});
              }
              s.status = SessionStatus::active;
              s.paused_until.reset();
            } else if (s.cleared_pauses.count(id) == 0) {
              throw reject("awaiting_approval", "waiting for experimenter approval");
            }
          },
          [](const Block&) {},
      },
      e);

  auto& timing = s.element_timing[id];
  timing.completed_at = std::max(now, timing.started_at.value_or(now));
  const std::size_t from = s.cursor;
  ++s.cursor;
  out.push_back({id, Actor::participant, EventType::advance,
                 json{{"from_cursor", from}, {"to_cursor", s.cursor}}});

  if (s.cursor == s.path.size()) {
    s.status = SessionStatus::completed;
    s.completion_code = mint_code();
    out.push_back({std::nullopt, Actor::system, EventType::session_completed,
                   json{{"completion_code", *s.completion_code}}});
  } else {
    s.status = SessionStatus::active;
    enter_current(s, study, now, out);
  }
  return out;
}

std::vector<EventDraft> approve_resume(ParticipantSession& s, const std::string& approver,
                                       TimePoint now) {
  if (s.status != SessionStatus::awaiting_approval) {
    throw errors::conflict("not_awaiting_approval", "session is not awaiting approval");
  }
  const std::string id = *s.current_element_id();
  s.status = SessionStatus::active;
  s.cleared_pauses.insert(id);
  (void)now;
  return {{id, Actor::experimenter, EventType::pause_resumed,
           json{{"reason", "approved"}, {"approver", approver}}}};
}

std::vector<EventDraft> mark_abandoned(ParticipantSession& s, std::int64_t idle_threshold_s,
                                       TimePoint now) {
  if (s.completed()) throw errors::conflict("session_completed", "session is already completed");
  if (s.status != SessionStatus::active) {
    throw errors::conflict("not_active", "only active sessions can be marked abandoned");
  }
  const auto idle = now - s.last_activity;
  if (idle < std::chrono::seconds(idle_threshold_s)) {
    throw errors::conflict("not_idle", "session was active " +
                                           std::to_string(ceil_seconds(idle)) + " s ago");
  }
  s.status = SessionStatus::abandoned;
  return {{s.current_element_id() ? std::optional<std::string>(*s.current_element_id())
                                  : std::nullopt,
           Actor::system, EventType::session_abandoned,
           json{{"idle_s", std::chrono::duration_cast<std::chrono::seconds>(idle).count()},
                {"threshold_s", idle_threshold_s}}}};
}

json element_payload(const ParticipantSession& s, const Study& study, TimePoint now) {
  json out{{"session_id", s.session_id},
           {"status", to_string(s.status)},
           {"cursor", s.cursor},
           {"total", s.path.size()}};
  if (s.completed()) {
    out["completion_code"] = *s.completion_code;
    return out;
  }
  const ProcedureElement& e = current(s, study);
  const std::string& id = element_id(e);
  json el{{"id", id}, {"type", element_type(e)}};
  std::visit(
      overloaded{
          [&](const TextPage& p) {
            el["title"] = p.title;
            el["body"] = p.body;
            el["require_acknowledge"] = p.require_acknowledge;
            el["acknowledged"] = s.acknowledged.count(id) != 0;
          },
          [&](const Questionnaire& q) {
            el["title"] = q.title;
            json items = json::array();
            for (const auto& item : q.items) items.push_back(to_json(item));
            el["items"] = items;
            el["external_url"] = q.external_url ? json(*q.external_url) : json(nullptr);
            el["answered"] = s.answers.count(id) != 0;
          },
          [&](const Task& t) {
            el["briefing"] = t.briefing;
            el["completion_rule"] = t.completion_rule == CompletionRule::manual_next
                                        ? "manual_next"
                                        : "require_answer";
            const BackendConfig* b = find_backend(study, t.condition_ref);
            el["interaction"] = {{"request_kinds", {"query", "message", "follow_up"}},
                                 {"response_kind", response_kind_hint(b)}};
            el["answered"] = s.answers.count(id) != 0;
            el["timed_out"] = s.timed_out.count(id) != 0;
            if (t.time_limit_s) {
              el["time_limit_s"] = *t.time_limit_s;
              const auto started = s.element_timing.at(id).started_at.value_or(now);
              const auto left = started + std::chrono::seconds(*t.time_limit_s) - now;
              el["time_remaining_s"] = std::max<std::int64_t>(0, ceil_seconds(left));
            }
            json transcript = json::array();
            if (auto it = s.transcripts.find(id); it != s.transcripts.end()) {
              for (const auto& turn : it->second) {
                transcript.push_back({{"role", turn.role}, {"text", turn.text}});
              }
            }
            el["transcript"] = transcript;
          },
          [&](const Pause& p) {
            el["message"] = p.message;
            if (std::holds_alternative<TimedPause>(p.mode)) {
              el["mode"] = "timed";
              const auto until = s.paused_until.value_or(now);
              el["remaining_s"] = std::max<std::int64_t>(0, ceil_seconds(until - now));
            } else {
              el["mode"] = "manual_approval";
              el["waiting"] = s.cleared_pauses.count(id) == 0;
            }
          },
          [](const Block&) {},
      },
      e);
  out["element"] = el;
  return out;
}

}  // namespace machine
}  // namespace studyrig
