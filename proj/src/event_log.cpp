#include "studyrig/event_log.hpp"

#include <array>
#include <cstdio>
#include <set>
#include <utility>

#include "json_fields.hpp"
#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<Actor, std::string_view>, 4> kActors{{
    {Actor::participant, "participant"},
    {Actor::system, "system"},
    {Actor::connector, "connector"},
    {Actor::experimenter, "experimenter"},
}};

constexpr std::array<std::pair<EventType, std::string_view>, 15> kEventTypes{{
    {EventType::element_shown, "element_shown"},
    {EventType::ack, "ack"},
    {EventType::query_submitted, "query_submitted"},
    {EventType::followup_submitted, "followup_submitted"},
    {EventType::response_shown, "response_shown"},
    {EventType::answer_submitted, "answer_submitted"},
    {EventType::questionnaire_response, "questionnaire_response"},
    {EventType::advance, "advance"},
    {EventType::pause_started, "pause_started"},
    {EventType::pause_resumed, "pause_resumed"},
    {EventType::task_timeout, "task_timeout"},
    {EventType::connector_error, "connector_error"},
    {EventType::session_completed, "session_completed"},
    {EventType::session_abandoned, "session_abandoned"},
    {EventType::routing_decision, "routing_decision"},
}};

}  // namespace

std::string_view to_string(Actor a) {
  for (const auto& [k, v] : kActors) {
    if (k == a) return v;
  }
  return "system";
}

std::string_view to_string(EventType t) {
  for (const auto& [k, v] : kEventTypes) {
    if (k == t) return v;
  }
  return "element_shown";
}

Actor parse_actor(std::string_view s) {
  for (const auto& [k, v] : kActors) {
    if (v == s) return k;
  }
  throw errors::malformed("actor: unknown value '" + std::string(s) + "'");
}

EventType parse_event_type(std::string_view s) {
  for (const auto& [k, v] : kEventTypes) {
    if (v == s) return k;
  }
  throw errors::malformed("event_type: unknown value '" + std::string(s) + "'");
}

json to_json(const LogEvent& e) {
  return json{{"event_id", e.event_id},
              {"study_id", e.study_id},
              {"session_id", e.session_id},
              {"element_id", detail::nullable(e.element_id)},
              {"ts", to_iso8601(e.ts)},
              {"seq", e.seq},
              {"actor", to_string(e.actor)},
              {"event_type", to_string(e.type)},
              {"payload", e.payload}};
}

LogEvent log_event_from_json(const json& j) {
  LogEvent e;
  e.event_id = j.at("event_id").get<std::string>();
  e.study_id = j.at("study_id").get<std::string>();
  e.session_id = j.at("session_id").get<std::string>();
  if (!j.at("element_id").is_null()) e.element_id = j["element_id"].get<std::string>();
  auto ts = parse_iso8601(j.at("ts").get<std::string>());
  if (!ts) throw errors::malformed("ts: invalid timestamp");
  e.ts = *ts;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.actor = parse_actor(j.at("actor").get<std::string>());
  e.type = parse_event_type(j.at("event_type").get<std::string>());
  e.payload = j.at("payload");
  return e;
}

// --- EventLog ------------------------------------------------------------------

void EventLog::register_session(const std::string& study_id, const std::string& session_id) {
  std::lock_guard lock(mutex_);
  events_[study_id][session_id];
}

bool EventLog::has_session(const std::string& study_id, const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  auto s = events_.find(study_id);
  return s != events_.end() && s->second.count(session_id) != 0;
}

std::vector<LogEvent> EventLog::append(const std::string& study_id,
                                       const std::string& session_id, TimePoint ts,
                                       std::vector<EventDraft> drafts, const CommitFn& commit) {
  std::lock_guard lock(mutex_);
  auto s = events_.find(study_id);
  if (s == events_.end() || s->second.count(session_id) == 0) {
    throw errors::not_found("session '" + session_id + "' has no event stream");
  }
  auto& stream = s->second[session_id];
  if (!stream.empty() && ts < stream.back().ts) ts = stream.back().ts;
  std::uint64_t seq = stream.empty() ? 0 : stream.back().seq;

  std::vector<LogEvent> finalized;
  finalized.reserve(drafts.size());
  for (auto& d : drafts) {
    LogEvent e;
    e.event_id = new_id();
    e.study_id = study_id;
    e.session_id = session_id;
    e.element_id = std::move(d.element_id);
    e.ts = ts;
    e.seq = ++seq;
    e.actor = d.actor;
    e.type = d.type;
    e.payload = std::move(d.payload);
    finalized.push_back(std::move(e));
  }
  if (commit) commit(finalized);
  stream.insert(stream.end(), finalized.begin(), finalized.end());
  return finalized;
}

void EventLog::restore(const LogEvent& e) {
  std::lock_guard lock(mutex_);
  events_[e.study_id][e.session_id].push_back(e);
}

std::vector<LogEvent> EventLog::snapshot(const std::string& study_id) const {
  std::lock_guard lock(mutex_);
  std::vector<LogEvent> out;
  auto s = events_.find(study_id);
  if (s == events_.end()) return out;
  for (const auto& [_, stream] : s->second) out.insert(out.end(), stream.begin(), stream.end());
  return out;
}

std::vector<LogEvent> EventLog::session_events(const std::string& study_id,
                                               const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  auto s = events_.find(study_id);
  if (s == events_.end()) return {};
  auto it = s->second.find(session_id);
  return it == s->second.end() ? std::vector<LogEvent>{} : it->second;
}

std::size_t EventLog::count(const std::string& study_id) const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  auto s = events_.find(study_id);
  if (s == events_.end()) return 0;
  for (const auto& [_, stream] : s->second) n += stream.size();
  return n;
}

// --- CSV -----------------------------------------------------------------------

std::string format_assigned_order(const BlockOrders& orders) {
  if (orders.empty()) return {};
  return json(orders).dump();
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string export_csv(const std::vector<LogEvent>& events,
                       const std::map<std::string, SessionExportInfo>& sessions) {
  std::string out(kExportHeader);
  out.push_back('\n');
  static const SessionExportInfo kNone{};
  for (const auto& e : events) {
    auto it = sessions.find(e.session_id);
    const SessionExportInfo& info = it == sessions.end() ? kNone : it->second;
    const std::string fields[] = {
        e.study_id,       e.session_id,          info.external_id,
        info.assigned_order, e.element_id.value_or(""), std::to_string(e.seq),
        to_iso8601(e.ts), std::string(to_string(e.actor)), std::string(to_string(e.type)),
        e.payload.dump(-1, ' ', false, json::error_handler_t::replace)};
    for (std::size_t i = 0; i < std::size(fields); ++i) {
      if (i > 0) out.push_back(',');
      out += csv_field(fields[i]);
    }
    out.push_back('\n');
  }
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        quoted = true;
        field_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        row.push_back(std::move(field));
        field.clear();
        rows.push_back(std::move(row));
        row.clear();
        field_started = false;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// --- Metrics -------------------------------------------------------------------

std::string format_seconds(std::int64_t ms) {
  if (ms % 1000 == 0) return std::to_string(ms / 1000);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(ms) / 1000.0);
  std::string s = buf;
  while (!s.empty() && s.back() == '0') s.pop_back();
  return s;
}

std::vector<MetricRow> derive_metrics(const Study& study, const std::vector<LogEvent>& events) {
  std::set<std::string> tasks;
  for (const auto& e : study.procedure) {
    if (std::holds_alternative<Task>(e)) tasks.insert(element_id(e));
  }

  struct Acc {
    std::optional<TimePoint> started;
    std::optional<TimePoint> completed;
    std::int64_t followups = 0;
    std::optional<std::size_t> initial_chars;
  };
  // (session, element) in first-shown order
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, Acc> acc;

  for (const auto& e : events) {
    if (!e.element_id || tasks.count(*e.element_id) == 0) continue;
    const auto key = std::make_pair(e.session_id, *e.element_id);
    auto [it, fresh] = acc.try_emplace(key);
    if (fresh) order.push_back(key);
    Acc& a = it->second;
    switch (e.type) {
      case EventType::element_shown:
        if (!a.started) a.started = e.ts;
        break;
      case EventType::advance:
        if (!a.completed) a.completed = e.ts;
        break;
      case EventType::followup_submitted:
        ++a.followups;
        break;
      case EventType::query_submitted:
        if (!a.initial_chars) {
          a.initial_chars = utf8_length(e.payload.value("text", std::string()));
        }
        break;
      default:
        break;
    }
  }

  std::vector<MetricRow> rows;
  for (const auto& key : order) {
    const Acc& a = acc[key];
    if (!a.started) continue;
    MetricRow row{study.study_id, key.first, key.second, std::nullopt, a.followups,
                  a.initial_chars};
    if (a.completed) row.time_ms = (*a.completed - *a.started).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out(kMetricsHeader);
  out.push_back('\n');
  for (const auto& r : rows) {
    out += csv_field(r.study_id) + "," + csv_field(r.session_id) + "," +
           csv_field(r.element_id) + "," + (r.time_ms ? format_seconds(*r.time_ms) : "") + "," +
           std::to_string(r.followups) + "," +
           (r.initial_query_chars ? std::to_string(*r.initial_query_chars) : "") + "\n";
  }
  return out;
}

// --- Replay --------------------------------------------------------------------

FoldedSession fold_session(const std::vector<LogEvent>& events) {
  FoldedSession f;
  for (const auto& e : events) {
    if (f.status == "abandoned" && e.actor == Actor::participant) f.status = "active";
    switch (e.type) {
      case EventType::element_shown:
        if (e.element_id) f.shown.push_back(*e.element_id);
        break;
      case EventType::advance:
        ++f.cursor;
        break;
      case EventType::pause_started:
        f.status = e.payload.value("mode", std::string()) == "timed" ? "paused"
                                                                     : "awaiting_approval";
        break;
      case EventType::pause_resumed:
        f.status = "active";
        break;
      case EventType::session_completed:
        f.status = "completed";
        break;
      case EventType::session_abandoned:
        f.status = "abandoned";
        break;
      default:
        break;
    }
  }
  return f;
}

}  // namespace studyrig
