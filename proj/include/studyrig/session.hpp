#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "studyrig/assignment.hpp"
#include "studyrig/clock.hpp"
#include "studyrig/connector.hpp"
#include "studyrig/event_log.hpp"
#include "studyrig/study.hpp"

namespace studyrig {

enum class SessionStatus { active, paused, awaiting_approval, completed, abandoned };

std::string_view to_string(SessionStatus s);
SessionStatus parse_session_status(std::string_view s);

struct ElementTiming {
  std::optional<TimePoint> started_at;
  std::optional<TimePoint> completed_at;

  bool operator==(const ElementTiming&) const = default;
};

struct ParticipantSession {
  std::string session_id;
  std::string session_token;
  std::string study_id;
  std::string external_id;
  Assignment assignment;
  std::vector<std::string> path;
  std::size_t cursor = 0;
  SessionStatus status = SessionStatus::active;
  std::optional<TimePoint> paused_until;  // status == paused
  std::map<std::string, ElementTiming> element_timing;
  std::optional<std::string> completion_code;

  // Per-element progress.
  std::set<std::string> acknowledged;
  std::map<std::string, nlohmann::json> answers;
  std::set<std::string> timed_out;
  std::set<std::string> cleared_pauses;
  std::map<std::string, std::vector<Turn>> transcripts;

  // request_id -> response body, for idempotent retries.
  std::map<std::string, nlohmann::json> replies;
  TimePoint last_activity{};
  TimePoint created_at{};

  bool completed() const { return status == SessionStatus::completed; }
  const std::string* current_element_id() const {
    return cursor < path.size() ? &path[cursor] : nullptr;
  }

  bool operator==(const ParticipantSession&) const = default;
};

nlohmann::json to_json(const ParticipantSession& s);
ParticipantSession session_from_json(const nlohmann::json& j);

// Transitions below mutate `session` and return the events to log, in order.
// They never perform I/O; the caller persists session + events atomically.
// Participant-triggered transitions reactivate an abandoned session first.
namespace machine {

using CodeMinter = std::function<std::string()>;

// cursor 0: element_shown for path[0] plus any pause entry.
std::vector<EventDraft> start(ParticipantSession& session, const Study& study, TimePoint now);

// Logs task_timeout once the current Task's time limit has run out.
std::vector<EventDraft> check_timeout(ParticipantSession& session, const Study& study,
                                      TimePoint now);

// Throws element_mismatch, not_answerable, invalid_answer, missing_required.
std::vector<EventDraft> submit_response(ParticipantSession& session, const Study& study,
                                        const std::string& element_id,
                                        const nlohmann::json& body, TimePoint now);

// `expected_element`, when set, must equal path[cursor]. Throws with code
// pause_not_elapsed, awaiting_approval, answers_missing, ack_missing,
// element_mismatch or session_completed.
std::vector<EventDraft> advance(ParticipantSession& session, const Study& study,
                                const std::optional<std::string>& expected_element,
                                TimePoint now, const CodeMinter& mint_code);

// Throws not_awaiting_approval.
std::vector<EventDraft> approve_resume(ParticipantSession& session, const std::string& approver,
                                       TimePoint now);

// Throws session_completed, not_active or not_idle.
std::vector<EventDraft> mark_abandoned(ParticipantSession& session, std::int64_t idle_threshold_s,
                                       TimePoint now);

// Reactivation after abandonment; returns true when the status changed.
bool reactivate(ParticipantSession& session);

// Participant-facing rendering of path[cursor] (or the completion payload).
// Never includes other elements, prompt templates or credentials.
nlohmann::json element_payload(const ParticipantSession& session, const Study& study,
                               TimePoint now);

}  // namespace machine
}  // namespace studyrig
