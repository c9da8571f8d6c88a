#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "studyrig/event_log.hpp"
#include "studyrig/study.hpp"

namespace studyrig {

// --- Behavior scripts ---------------------------------------------------------

struct QuestionnairePolicy {
  std::string mode = "fixed";  // fixed | random
  std::int64_t likert = 4;
  std::string free_text = "No further comments.";
  std::size_t choice_index = 0;
  bool skip_required = false;  // never submit answers
};

struct ScriptedInteraction {
  double delay_s = 0;
  std::string kind = "query";  // query | message | follow_up
  std::string text;
};

struct TaskPolicy {
  std::vector<ScriptedInteraction> interactions;
  // Sent when the task requires an answer.
  std::string answer = "Simulated answer.";
  double advance_delay_s = 0;
};

struct PausePolicy {
  std::string timed = "wait";      // wait | stop
  std::string manual = "approve";  // approve (needs experimenter token) | wait | stop
  std::int64_t poll_interval_ms = 20;
  std::int64_t max_wait_ms = 10000;  // manual "wait" only
};

struct BehaviorScript {
  bool acknowledge = true;
  QuestionnairePolicy questionnaire;
  TaskPolicy task;
  PausePolicy pause;
  // Stop (abandon) before the advance that would leave this cursor.
  std::optional<std::size_t> stop_at_cursor;
};

// Missing fields take the defaults above. Throws malformed_body.
BehaviorScript script_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BehaviorScript& s);

// --- Simulation ---------------------------------------------------------------

struct SimOptions {
  std::string base_url;
  std::string study;  // slug
  std::size_t n = 1;
  BehaviorScript script;
  std::uint64_t seed = 42;
  std::size_t concurrency = 1;
  // Delays and timed pauses advance the server's virtual clock instead of
  // sleeping.
  bool virtual_clock = false;
  // Enables approvals, order derivation and event counts.
  std::string experimenter_token;
  std::string external_id_prefix = "sim-";
};

struct SessionReport {
  std::size_t index = 0;
  std::string external_id;
  std::string session_id;
  std::string status;
  std::vector<std::string> visited;  // element ids in the order shown
  BlockOrders assigned_order;        // derived from `visited`
  std::optional<std::string> completion_code;
  std::size_t connector_errors = 0;
  std::size_t events = 0;
  std::optional<std::string> error;  // protocol error code
  std::string error_detail;
  bool stopped = false;              // scripted stop, not an error
};

struct SimReport {
  std::vector<SessionReport> sessions;  // by index
  // Per counterbalanced block: compact JSON ordering -> sessions.
  std::map<std::string, std::map<std::string, std::size_t>> order_counts;
  std::size_t completed = 0;
  std::size_t total_events = 0;
  bool ok = true;  // no protocol errors
};

nlohmann::json to_json(const SimReport& r);

// Drives `n` participants through the public HTTP API only. Never throws for
// per-session failures; they are reported. Throws when the server is
// unreachable.
SimReport simulate(const SimOptions& options);

// --- Log replay ---------------------------------------------------------------

struct ReplayVerdict {
  std::size_t sessions = 0;
  std::size_t events = 0;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

nlohmann::json to_json(const ReplayVerdict& v);

// Reads an export produced by export_csv. Throws malformed_body.
struct ExportedEvent {
  LogEvent event;
  std::string external_id;
  std::string assigned_order;
};
std::vector<ExportedEvent> parse_export(std::string_view csv);

// Checks one session's events (in seq order) against the path implied by its
// assigned order: seq gapless from 1, nondecreasing ts, element_shown exactly
// path[0..cursor], advances only from the current element, no advance while a
// pause holds, completion only at the end of the path.
std::vector<std::string> check_session_log(const Study& study, const BlockOrders& orders,
                                           const std::vector<LogEvent>& events);

ReplayVerdict replay_check(const Study& study, std::string_view export_csv_text);

// Fetches the study and its export over HTTP, then runs replay_check.
ReplayVerdict replay_check_remote(const std::string& base_url, const std::string& study_id,
                                  const std::string& experimenter_token);

}  // namespace studyrig
