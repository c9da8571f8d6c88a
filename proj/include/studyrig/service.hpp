#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "studyrig/clock.hpp"
#include "studyrig/connector.hpp"
#include "studyrig/event_log.hpp"
#include "studyrig/recruitment.hpp"
#include "studyrig/session.hpp"
#include "studyrig/store.hpp"
#include "studyrig/study.hpp"

namespace studyrig {

struct ServiceOptions {
  std::string base_url = "http://127.0.0.1:8080";
  // Chat-backed connectors use the deterministic offline model instead of
  // calling endpoint_url.
  bool offline_models = false;
  std::chrono::milliseconds connector_timeout = std::chrono::seconds(30);
  // Looks up credential_ref values. Defaults to the process environment.
  std::function<std::optional<std::string>(std::string_view)> resolve_secret;
};

struct JoinResult {
  std::string session_id;
  std::string session_token;
  bool resumed = false;
  nlohmann::json element;
};

// Owns every study, session and log stream of one instance. All operations
// are thread-safe. Lock order: catalog, then study, then session; the event
// log and the store lock internally and are always innermost.
class StudyService {
 public:
  StudyService(const Clock& clock, std::unique_ptr<Store> store, ServiceOptions options = {});
  ~StudyService();
  StudyService(const StudyService&) = delete;
  StudyService& operator=(const StudyService&) = delete;

  ConnectorRegistry& registry() { return registry_; }
  const ServiceOptions& options() const { return options_; }
  // Link prefix for study URLs. Not synchronized: call before serving.
  void set_base_url(std::string base_url) { options_.base_url = std::move(base_url); }
  TimePoint now() const { return clock_.now(); }

  // --- Experimenter ---------------------------------------------------------
  // {name, description?, ...definition fields}
  nlohmann::json create_study(const nlohmann::json& body);
  nlohmann::json list_studies() const;
  // Study JSON plus "violations" and, when deployed, "link".
  nlohmann::json get_study(const std::string& study_id) const;
  // Applies a definition; draft studies only.
  nlohmann::json update_study(const std::string& study_id, const nlohmann::json& definition);
  nlohmann::json duplicate_study(const std::string& study_id, const std::string& new_name);
  // Validates, builds order plans, and returns the study with its link.
  // Throws Error("validation_failed", 422) with the violations in `extra`.
  nlohmann::json deploy_study(const std::string& study_id);
  nlohmann::json set_study_status(const std::string& study_id, StudyStatus to);
  std::string export_bundle(const std::string& study_id) const;
  nlohmann::json import_bundle(std::string_view text);
  // Draft studies only. Body is a corpus file (document list or
  // {corpus_id, documents}); `corpus_id` wins when given.
  nlohmann::json upload_corpus(const std::string& study_id, const nlohmann::json& body,
                               std::optional<std::string> corpus_id);
  nlohmann::json monitor(const std::string& study_id) const;
  std::string export_csv(const std::string& study_id) const;
  std::string metrics_csv(const std::string& study_id) const;
  std::size_t event_count(const std::string& study_id) const;
  nlohmann::json approve_resume(const std::string& session_id, const std::string& approver);
  nlohmann::json mark_abandoned(const std::string& session_id, std::int64_t idle_threshold_s);
  // Deterministic between-subject routing; logs a routing_decision in the
  // chosen study's routing stream.
  nlohmann::json split(const std::vector<std::string>& targets, const std::string& external_id);
  std::string study_link(const std::string& study_id) const;

  // --- Participant ----------------------------------------------------------
  JoinResult join(const std::string& slug, const EntryParams& params);
  nlohmann::json current_element(const std::string& token);
  nlohmann::json respond(const std::string& token, const nlohmann::json& body);
  nlohmann::json interact(const std::string& token, const nlohmann::json& body);
  nlohmann::json advance(const std::string& token, const nlohmann::json& body);
  CompletionTarget complete(const std::string& token);

  // Session state for tests and tools (not exposed over HTTP).
  std::optional<ParticipantSession> session_snapshot(const std::string& session_id) const;

 private:
  struct StudySlot;
  struct SessionSlot;
  using Lock = std::unique_lock<std::mutex>;

  std::shared_ptr<StudySlot> study_slot(const std::string& study_id) const;
  std::shared_ptr<SessionSlot> session_by_token(const std::string& token) const;
  std::shared_ptr<SessionSlot> session_by_id(const std::string& session_id) const;

  void persist_study(const StudySlot& slot, std::vector<nlohmann::json> extra = {});
  void register_study(std::shared_ptr<StudySlot> slot);
  nlohmann::json study_view(const StudySlot& slot) const;
  std::set<std::string> corpus_ids(const StudySlot& slot) const;

  TimePoint session_now(const SessionSlot& slot) const;
  // Appends drafts for `next` and persists it; on success `slot.session`
  // becomes `next`. Caller holds the session lock.
  void commit_session(SessionSlot& slot, ParticipantSession next,
                      std::vector<EventDraft> drafts, TimePoint now);
  std::string mint_code(StudySlot& study);
  std::shared_ptr<ChatModel> model_for(const BackendConfig& config) const;

  void restore();

  const Clock& clock_;
  std::unique_ptr<Store> store_;
  ServiceOptions options_;
  ConnectorRegistry registry_;
  EventLog log_;

  mutable std::shared_mutex catalog_mutex_;
  std::map<std::string, std::shared_ptr<StudySlot>> studies_;
  std::map<std::string, std::shared_ptr<SessionSlot>> sessions_by_id_;
  std::map<std::string, std::shared_ptr<SessionSlot>> sessions_by_token_;
};

}  // namespace studyrig
