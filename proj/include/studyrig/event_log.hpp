#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "studyrig/clock.hpp"
#include "studyrig/study.hpp"

namespace studyrig {

enum class Actor { participant, system, connector, experimenter };

enum class EventType {
  element_shown,
  ack,
  query_submitted,
  followup_submitted,
  response_shown,
  answer_submitted,
  questionnaire_response,
  advance,
  pause_started,
  pause_resumed,
  task_timeout,
  connector_error,
  session_completed,
  session_abandoned,
  routing_decision,
};

std::string_view to_string(Actor a);
std::string_view to_string(EventType t);
Actor parse_actor(std::string_view s);
EventType parse_event_type(std::string_view s);

struct LogEvent {
  std::string event_id;
  std::string study_id;
  std::string session_id;
  std::optional<std::string> element_id;
  TimePoint ts{};
  std::uint64_t seq = 0;
  Actor actor = Actor::system;
  EventType type = EventType::element_shown;
  nlohmann::json payload = nlohmann::json::object();

  bool operator==(const LogEvent&) const = default;
};

nlohmann::json to_json(const LogEvent& e);
LogEvent log_event_from_json(const nlohmann::json& j);

// What a caller hands to the log; the log assigns event_id and seq.
struct EventDraft {
  std::optional<std::string> element_id;
  Actor actor = Actor::system;
  EventType type = EventType::element_shown;
  nlohmann::json payload = nlohmann::json::object();
};

// Session id of the per-study stream that holds routing decisions.
inline constexpr std::string_view kRoutingStream = "";

// Append-only, in-memory event store. Each session's events carry a gapless
// seq starting at 1 and nondecreasing timestamps (a clock that steps back is
// clamped to the previous event's ts).
class EventLog {
 public:
  using CommitFn = std::function<void(const std::vector<LogEvent>&)>;

  void register_session(const std::string& study_id, const std::string& session_id);
  bool has_session(const std::string& study_id, const std::string& session_id) const;

  // Appends `drafts` as one unit. `commit` runs under the log lock with the
  // finalized events before they become visible; if it throws, nothing is
  // appended. Throws not_found for an unregistered session.
  std::vector<LogEvent> append(const std::string& study_id, const std::string& session_id,
                               TimePoint ts, std::vector<EventDraft> drafts,
                               const CommitFn& commit = {});

  // Journal replay: events are taken as-is.
  void restore(const LogEvent& e);

  // Consistent copy ordered by (session_id, seq).
  std::vector<LogEvent> snapshot(const std::string& study_id) const;
  std::vector<LogEvent> session_events(const std::string& study_id,
                                       const std::string& session_id) const;
  std::size_t count(const std::string& study_id) const;

 private:
  mutable std::mutex mutex_;
  // study -> session -> events
  std::map<std::string, std::map<std::string, std::vector<LogEvent>>> events_;
};

// --- CSV ---------------------------------------------------------------------

struct SessionExportInfo {
  std::string external_id;
  std::string assigned_order;  // compact JSON of block_id -> ordering, or ""
};

std::string format_assigned_order(const BlockOrders& orders);

inline constexpr std::string_view kExportHeader =
    "study_id,session_id,external_id,assigned_order,element_id,seq,ts_iso8601,actor,event_type,"
    "payload_json";

// RFC 4180 field quoting: quote when the field holds a comma, quote, CR or LF.
std::string csv_field(std::string_view s);

// Header plus one row per event, events expected in (session_id, seq) order.
// LF line endings.
std::string export_csv(const std::vector<LogEvent>& events,
                       const std::map<std::string, SessionExportInfo>& sessions);

// RFC 4180 reader (accepts LF or CRLF).
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

// --- Metrics -----------------------------------------------------------------

struct MetricRow {
  std::string study_id;
  std::string session_id;
  std::string element_id;
  std::optional<std::int64_t> time_ms;   // completed - started
  std::int64_t followups = 0;
  std::optional<std::size_t> initial_query_chars;
};

inline constexpr std::string_view kMetricsHeader =
    "study_id,session_id,element_id,time_s,followups,initial_query_chars";

// One row per (session, Task element shown to that session).
std::vector<MetricRow> derive_metrics(const Study& study, const std::vector<LogEvent>& events);
std::string metrics_csv(const std::vector<MetricRow>& rows);

// Seconds with up to millisecond precision and no trailing zeros: "45", "45.5".
std::string format_seconds(std::int64_t ms);

// --- Replay ------------------------------------------------------------------

struct FoldedSession {
  std::size_t cursor = 0;
  std::string status = "active";
  std::vector<std::string> shown;  // element_shown ids in order
};

// Reconstructs cursor and status from a session's events.
FoldedSession fold_session(const std::vector<LogEvent>& events);

}  // namespace studyrig
