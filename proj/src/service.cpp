#include "studyrig/service.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <set>

#include "json_fields.hpp"
#include "studyrig/assignment.hpp"
#include "studyrig/bundle.hpp"
#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;
using CorpusMap = std::map<std::string, Corpus>;

struct StudyService::StudySlot {
  mutable std::mutex mutex;
  std::shared_ptr<const Study> study;
  std::shared_ptr<const CorpusMap> corpora = std::make_shared<const CorpusMap>();
  std::vector<OrderPlan> plans;
  std::uint64_t next_index = 0;
  std::map<std::string, std::shared_ptr<SessionSlot>> by_external;
  std::map<std::string, SessionExportInfo> export_info;  // session_id -> columns

  std::mutex codes_mutex;
  std::set<std::string> codes;
};

struct StudyService::SessionSlot {
  std::mutex mutex;
  ParticipantSession session;
  std::shared_ptr<const Study> study;
  std::shared_ptr<const CorpusMap> corpora;
  std::shared_ptr<StudySlot> owner;
  bool busy = false;  // an upstream call is in flight
  TimePoint last_ts{};
};

namespace {

json session_record(const ParticipantSession& s) {
  return json{{"type", "session"}, {"session", to_json(s)}};
}

json events_record(const std::vector<LogEvent>& events) {
  json arr = json::array();
  for (const auto& e : events) arr.push_back(to_json(e));
  return json{{"type", "events"}, {"events", arr}};
}

json plans_record(const std::string& study_id, const std::vector<OrderPlan>& plans,
                  std::uint64_t next_index) {
  json arr = json::array();
  for (const auto& p : plans) arr.push_back(to_json(p));
  return json{{"type", "plans"}, {"study_id", study_id}, {"plans", arr},
              {"next_index", next_index}};
}

json corpus_record(const std::string& study_id, const Corpus& c) {
  return json{{"type", "corpus"},
              {"study_id", study_id},
              {"corpus", {{"corpus_id", c.corpus_id}, {"documents", documents_to_json(c)}}}};
}

std::optional<std::string> env_secret(std::string_view name) {
  const char* v = std::getenv(std::string(name).c_str());
  if (v == nullptr) return std::nullopt;
  return std::string(v);
}

bool is_chat_kind(const std::string& kind) {
  return kind == connector_kinds::chat_completion || kind == connector_kinds::agentic_loop;
}

std::string reply_text(const InteractionResponse& r) {
  if (r.kind != ResponseKind::results) return r.answer_text;
  std::string out;
  for (std::size_t i = 0; i < r.items.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out += std::to_string(i + 1) + ". " + r.items[i].title;
  }
  return out;
}

std::string trimmed(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

StudyService::StudyService(const Clock& clock, std::unique_ptr<Store> store,
                           ServiceOptions options)
    : clock_(clock), store_(std::move(store)), options_(std::move(options)) {
  if (!store_) store_ = std::make_unique<MemoryStore>();
  if (!options_.resolve_secret) options_.resolve_secret = env_secret;
  restore();
}

StudyService::~StudyService() = default;

// --- Lookup -------------------------------------------------------------------

std::shared_ptr<StudyService::StudySlot> StudyService::study_slot(
    const std::string& study_id) const {
  std::shared_lock lock(catalog_mutex_);
  auto it = studies_.find(study_id);
  if (it == studies_.end()) throw errors::not_found("study '" + study_id + "' not found");
  return it->second;
}

std::shared_ptr<StudyService::SessionSlot> StudyService::session_by_token(
    const std::string& token) const {
  if (token.empty()) throw errors::unauthorized("missing session token");
  std::shared_lock lock(catalog_mutex_);
  auto it = sessions_by_token_.find(token);
  if (it == sessions_by_token_.end()) throw errors::unauthorized("unknown session token");
  return it->second;
}

std::shared_ptr<StudyService::SessionSlot> StudyService::session_by_id(
    const std::string& session_id) const {
  std::shared_lock lock(catalog_mutex_);
  auto it = sessions_by_id_.find(session_id);
  if (it == sessions_by_id_.end()) {
    throw errors::not_found("session '" + session_id + "' not found");
  }
  return it->second;
}

std::optional<ParticipantSession> StudyService::session_snapshot(
    const std::string& session_id) const {
  std::shared_ptr<SessionSlot> slot;
  {
    std::shared_lock lock(catalog_mutex_);
    auto it = sessions_by_id_.find(session_id);
    if (it == sessions_by_id_.end()) return std::nullopt;
    slot = it->second;
  }
  std::lock_guard lock(slot->mutex);
  return slot->session;
}

// --- Persistence helpers ------------------------------------------------------

void StudyService::persist_study(const StudySlot& slot, std::vector<json> extra) {
  std::vector<json> records{json{{"type", "study"}, {"study", to_json(*slot.study)}}};
  for (auto& r : extra) records.push_back(std::move(r));
  store_->commit(records);
}

void StudyService::register_study(std::shared_ptr<StudySlot> slot) {
  log_.register_session(slot->study->study_id, std::string(kRoutingStream));
  std::unique_lock lock(catalog_mutex_);
  studies_[slot->study->study_id] = std::move(slot);
}

std::set<std::string> StudyService::corpus_ids(const StudySlot& slot) const {
  std::set<std::string> ids;
  for (const auto& [id, _] : *slot.corpora) ids.insert(id);
  return ids;
}

json StudyService::study_view(const StudySlot& slot) const {
  json view = to_json(*slot.study);
  ValidationContext ctx;
  ctx.connector_kinds = registry_.kinds();
  ctx.corpus_ids = corpus_ids(slot);
  json violations = json::array();
  for (const auto& v : validate_study(*slot.study, ctx)) violations.push_back(to_json(v));
  view["violations"] = violations;
  json corpora = json::array();
  for (const auto& [id, c] : *slot.corpora) {
    corpora.push_back({{"corpus_id", id}, {"documents", c.documents.size()}});
  }
  view["corpora"] = corpora;
  view["sessions"] = slot.by_external.size();
  view["link"] = slot.study->status == StudyStatus::deployed
                     ? json(make_study_link(*slot.study, options_.base_url))
                     : json(nullptr);
  return view;
}

TimePoint StudyService::session_now(const SessionSlot& slot) const {
  return std::max(clock_.now(), slot.last_ts);
}

void StudyService::commit_session(SessionSlot& slot, ParticipantSession next,
                                  std::vector<EventDraft> drafts, TimePoint now) {
  // Replay reactivates an abandoned session on its next participant event, so
  // an action that logs nothing (a repeated acknowledgement) must not either.
  if (slot.session.status == SessionStatus::abandoned && next.status == SessionStatus::active &&
      std::none_of(drafts.begin(), drafts.end(),
                   [](const EventDraft& d) { return d.actor == Actor::participant; })) {
    next.status = SessionStatus::abandoned;
  }
  auto events = log_.append(next.study_id, next.session_id, now, std::move(drafts),
                            [&](const std::vector<LogEvent>& finalized) {
                              store_->commit({session_record(next), events_record(finalized)});
                            });
  slot.session = std::move(next);
  if (!events.empty()) slot.last_ts = events.back().ts;
}

std::string StudyService::mint_code(StudySlot& study) {
  std::lock_guard lock(study.codes_mutex);
  for (;;) {
    std::string code = new_completion_code();
    if (study.codes.insert(code).second) return code;
  }
}

std::shared_ptr<ChatModel> StudyService::model_for(const BackendConfig& config) const {
  if (!is_chat_kind(config.connector_kind)) return nullptr;
  if (options_.offline_models || !config.endpoint_url || config.endpoint_url->empty()) {
    return std::make_shared<OfflineChatModel>();
  }
  std::optional<std::string> key;
  if (config.credential_ref) key = options_.resolve_secret(*config.credential_ref);
  return std::make_shared<HttpChatModel>(*config.endpoint_url, key, options_.connector_timeout);
}

void StudyService::restore() {
  std::map<std::string, std::shared_ptr<StudySlot>> studies;
  std::map<std::string, ParticipantSession> sessions;
  std::map<std::string, TimePoint> last_ts;
  auto slot_for = [&studies](const std::string& id) -> std::shared_ptr<StudySlot>& {
    auto& s = studies[id];
    if (!s) s = std::make_shared<StudySlot>();
    return s;
  };

  for (const auto& r : store_->load()) {
    const std::string type = r.at("type").get<std::string>();
    if (type == "study") {
      auto study = std::make_shared<const Study>(study_from_json(r.at("study")));
      slot_for(study->study_id)->study = std::move(study);
    } else if (type == "corpus") {
      auto& slot = slot_for(r.at("study_id").get<std::string>());
      auto corpora = std::make_shared<CorpusMap>(*slot->corpora);
      Corpus c = corpus_from_json(r.at("corpus"), r["corpus"].at("corpus_id").get<std::string>());
      (*corpora)[c.corpus_id] = std::move(c);
      slot->corpora = std::move(corpora);
    } else if (type == "plans") {
      auto& slot = slot_for(r.at("study_id").get<std::string>());
      slot->plans.clear();
      for (const auto& p : r.at("plans")) slot->plans.push_back(order_plan_from_json(p));
      slot->next_index = r.at("next_index").get<std::uint64_t>();
    } else if (type == "session") {
      ParticipantSession s = session_from_json(r.at("session"));
      sessions[s.session_id] = std::move(s);
    } else if (type == "events") {
      for (const auto& e : r.at("events")) {
        LogEvent ev = log_event_from_json(e);
        last_ts[ev.session_id] = ev.ts;
        log_.restore(ev);
      }
    }
  }

  for (auto& [id, slot] : studies) {
    if (!slot->study) continue;  // orphan records
    register_study(slot);
  }
  std::unique_lock lock(catalog_mutex_);
  for (auto& [id, s] : sessions) {
    auto it = studies_.find(s.study_id);
    if (it == studies_.end()) continue;
    auto owner = it->second;
    auto slot = std::make_shared<SessionSlot>();
    slot->study = owner->study;
    slot->corpora = owner->corpora;
    slot->owner = owner;
    slot->last_ts = last_ts.count(id) ? last_ts[id] : s.last_activity;
    owner->by_external[s.external_id] = slot;
    owner->export_info[id] = {s.external_id, format_assigned_order(s.assignment.orders)};
    if (s.completion_code) owner->codes.insert(*s.completion_code);
    sessions_by_token_[s.session_token] = slot;
    sessions_by_id_[id] = slot;
    slot->session = std::move(s);
  }
}

// --- Experimenter operations --------------------------------------------------

json StudyService::create_study(const json& body) {
  detail::require_object(body, "");
  Study study = studyrig::create_study(detail::req_string(body, "name", ""), clock_.now());
  json def = body;
  def.erase("name");
  apply_definition(study, def);
  auto slot = std::make_shared<StudySlot>();
  slot->study = std::make_shared<const Study>(std::move(study));
  persist_study(*slot);
  register_study(slot);
  std::lock_guard lock(slot->mutex);
  return study_view(*slot);
}

json StudyService::list_studies() const {
  std::vector<std::shared_ptr<StudySlot>> slots;
  {
    std::shared_lock lock(catalog_mutex_);
    for (const auto& [_, s] : studies_) slots.push_back(s);
  }
  json out = json::array();
  for (const auto& slot : slots) {
    std::lock_guard lock(slot->mutex);
    const Study& s = *slot->study;
    out.push_back({{"study_id", s.study_id},
                   {"name", s.name},
                   {"status", to_string(s.status)},
                   {"created_at", to_iso8601(s.created_at)},
                   {"updated_at", to_iso8601(s.updated_at)},
                   {"sessions", slot->by_external.size()}});
  }
  return out;
}

json StudyService::get_study(const std::string& study_id) const {
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  return study_view(*slot);
}

json StudyService::update_study(const std::string& study_id, const json& definition) {
  detail::require_object(definition, "");
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  if (slot->study->status != StudyStatus::draft) {
    throw errors::conflict("study_not_draft", "only draft studies can be edited");
  }
  Study next = *slot->study;
  apply_definition(next, definition);
  next.updated_at = clock_.now();
  auto previous = slot->study;
  slot->study = std::make_shared<const Study>(std::move(next));
  try {
    persist_study(*slot);
  } catch (...) {
    slot->study = previous;
    throw;
  }
  return study_view(*slot);
}

json StudyService::duplicate_study(const std::string& study_id, const std::string& new_name) {
  auto source = study_slot(study_id);
  auto slot = std::make_shared<StudySlot>();
  {
    std::lock_guard lock(source->mutex);
    const std::string name = trimmed(new_name).empty() ? source->study->name + " (copy)" : new_name;
    slot->study = std::make_shared<const Study>(
        duplicate_definition(*source->study, name, clock_.now()));
    slot->corpora = source->corpora;
  }
  std::vector<json> extra;
  for (const auto& [_, c] : *slot->corpora) extra.push_back(corpus_record(slot->study->study_id, c));
  persist_study(*slot, std::move(extra));
  register_study(slot);
  std::lock_guard lock(slot->mutex);
  return study_view(*slot);
}

json StudyService::deploy_study(const std::string& study_id) {
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  check_status_transition(slot->study->status, StudyStatus::deployed);
  if (slot->study->status == StudyStatus::draft) {
    ValidationContext ctx;
    ctx.connector_kinds = registry_.kinds();
    ctx.corpus_ids = corpus_ids(*slot);
    const auto violations = validate_study(*slot->study, ctx);
    if (!violations.empty()) {
      json list = json::array();
      for (const auto& v : violations) list.push_back(to_json(v));
      throw Error("validation_failed",
                  std::to_string(violations.size()) + " validation violation(s)", 422,
                  json{{"violations", list}});
    }
  }
  Study next = *slot->study;
  const bool first_deploy = next.status == StudyStatus::draft;
  next.status = StudyStatus::deployed;
  next.updated_at = clock_.now();
  auto plans = first_deploy ? make_order_plans(next) : slot->plans;
  std::vector<json> extra;
  if (first_deploy) extra.push_back(plans_record(next.study_id, plans, 0));
  auto previous = slot->study;
  slot->study = std::make_shared<const Study>(std::move(next));
  try {
    persist_study(*slot, std::move(extra));
  } catch (...) {
    slot->study = previous;
    throw;
  }
  slot->plans = std::move(plans);
  return study_view(*slot);
}

json StudyService::set_study_status(const std::string& study_id, StudyStatus to) {
  if (to == StudyStatus::deployed) return deploy_study(study_id);
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  check_status_transition(slot->study->status, to);
  Study next = *slot->study;
  next.status = to;
  next.updated_at = clock_.now();
  auto previous = slot->study;
  slot->study = std::make_shared<const Study>(std::move(next));
  try {
    persist_study(*slot);
  } catch (...) {
    slot->study = previous;
    throw;
  }
  return study_view(*slot);
}

std::string StudyService::export_bundle(const std::string& study_id) const {
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  std::vector<Corpus> corpora;
  for (const auto& [_, c] : *slot->corpora) corpora.push_back(c);
  return serialize_bundle(make_bundle(*slot->study, corpora));
}

json StudyService::import_bundle(std::string_view text) {
  StudyBundle bundle = parse_bundle(text, registry_.kinds());
  Study study = remap_ids(bundle.study, [](IdRole, std::size_t) { return new_id(); });
  study.study_id = new_id();
  study.status = StudyStatus::draft;
  study.created_at = study.updated_at = clock_.now();

  auto slot = std::make_shared<StudySlot>();
  auto corpora = std::make_shared<CorpusMap>();
  std::vector<json> extra;
  for (auto& c : bundle.corpora) {
    extra.push_back(corpus_record(study.study_id, c));
    (*corpora)[c.corpus_id] = std::move(c);
  }
  slot->corpora = std::move(corpora);
  slot->study = std::make_shared<const Study>(std::move(study));
  persist_study(*slot, std::move(extra));
  register_study(slot);
  std::lock_guard lock(slot->mutex);
  return study_view(*slot);
}

json StudyService::upload_corpus(const std::string& study_id, const json& body,
                                 std::optional<std::string> corpus_id) {
  if (!corpus_id && body.is_object()) corpus_id = detail::opt_string(body, "corpus_id", "");
  if (!corpus_id || trimmed(*corpus_id).empty()) {
    throw errors::malformed("corpus_id: required (query parameter or body field)");
  }
  Corpus corpus = corpus_from_json(body, *corpus_id);
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  if (slot->study->status != StudyStatus::draft) {
    throw errors::conflict("study_not_draft", "corpora can only be changed on draft studies");
  }
  store_->commit({corpus_record(study_id, corpus)});
  auto corpora = std::make_shared<CorpusMap>(*slot->corpora);
  const std::size_t n = corpus.documents.size();
  (*corpora)[corpus.corpus_id] = std::move(corpus);
  slot->corpora = std::move(corpora);
  return json{{"study_id", study_id}, {"corpus_id", *corpus_id}, {"documents", n}};
}

json StudyService::monitor(const std::string& study_id) const {
  auto slot = study_slot(study_id);
  std::vector<std::shared_ptr<SessionSlot>> sessions;
  std::string status;
  {
    std::lock_guard lock(slot->mutex);
    status = std::string(to_string(slot->study->status));
    for (const auto& [_, s] : slot->by_external) sessions.push_back(s);
  }
  // Every session locked at once in a fixed order gives one consistent cut.
  std::sort(sessions.begin(), sessions.end());
  std::vector<std::unique_lock<std::mutex>> locks;
  locks.reserve(sessions.size());
  for (const auto& s : sessions) locks.emplace_back(s->mutex);

  json by_status = json::object();
  for (auto st : {SessionStatus::active, SessionStatus::paused, SessionStatus::awaiting_approval,
                  SessionStatus::completed, SessionStatus::abandoned}) {
    by_status[std::string(to_string(st))] = 0;
  }
  json occupancy = json::object();
  json awaiting = json::array();
  json rows = json::array();
  std::vector<const ParticipantSession*> ordered;
  for (const auto& s : sessions) ordered.push_back(&s->session);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->session_id < b->session_id; });
  for (const ParticipantSession* s : ordered) {
    by_status[std::string(to_string(s->status))] =
        by_status[std::string(to_string(s->status))].get<int>() + 1;
    const std::string* cur = s->current_element_id();
    if (cur != nullptr) {
      occupancy[*cur] = occupancy.value(*cur, 0) + 1;
    }
    if (s->status == SessionStatus::awaiting_approval) {
      awaiting.push_back({{"session_id", s->session_id},
                          {"external_id", s->external_id},
                          {"element_id", *cur}});
    }
    rows.push_back({{"session_id", s->session_id},
                    {"external_id", s->external_id},
                    {"status", to_string(s->status)},
                    {"cursor", s->cursor},
                    {"total", s->path.size()},
                    {"current_element_id", cur ? json(*cur) : json(nullptr)},
                    {"assigned_order", s->assignment.orders},
                    {"last_activity", to_iso8601(s->last_activity)}});
  }
  return json{{"study_id", study_id},
              {"study_status", status},
              {"total", sessions.size()},
              {"by_status", by_status},
              {"occupancy", occupancy},
              {"awaiting_approval", awaiting},
              {"sessions", rows}};
}

std::string StudyService::export_csv(const std::string& study_id) const {
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  return studyrig::export_csv(log_.snapshot(study_id), slot->export_info);
}

std::string StudyService::metrics_csv(const std::string& study_id) const {
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  return studyrig::metrics_csv(derive_metrics(*slot->study, log_.snapshot(study_id)));
}

std::size_t StudyService::event_count(const std::string& study_id) const {
  study_slot(study_id);
  return log_.count(study_id);
}

json StudyService::approve_resume(const std::string& session_id, const std::string& approver) {
  auto slot = session_by_id(session_id);
  std::lock_guard lock(slot->mutex);
  const TimePoint now = session_now(*slot);
  ParticipantSession next = slot->session;
  auto drafts = machine::approve_resume(next, approver, now);
  commit_session(*slot, std::move(next), std::move(drafts), now);
  return json{{"session_id", session_id}, {"status", to_string(slot->session.status)}};
}

json StudyService::mark_abandoned(const std::string& session_id, std::int64_t idle_threshold_s) {
  if (idle_threshold_s < 0) throw errors::validation("idle_threshold_s must be >= 0");
  auto slot = session_by_id(session_id);
  std::lock_guard lock(slot->mutex);
  const TimePoint now = session_now(*slot);
  ParticipantSession next = slot->session;
  auto drafts = machine::mark_abandoned(next, idle_threshold_s, now);
  commit_session(*slot, std::move(next), std::move(drafts), now);
  return json{{"session_id", session_id}, {"status", to_string(slot->session.status)}};
}

json StudyService::split(const std::vector<std::string>& targets, const std::string& external_id) {
  if (trimmed(external_id).empty()) throw errors::validation("external_id must not be empty");
  for (const auto& t : targets) study_slot(t);
  const std::string chosen = split_link(targets, external_id);
  const std::string link = study_link(chosen);
  log_.append(chosen, std::string(kRoutingStream), clock_.now(),
              {{std::nullopt, Actor::system, EventType::routing_decision,
                json{{"targets", targets}, {"external_id", external_id},
                     {"chosen_study_id", chosen}}}},
              [&](const std::vector<LogEvent>& events) {
                store_->commit({events_record(events)});
              });
  return json{{"study_id", chosen}, {"link", link}};
}

std::string StudyService::study_link(const std::string& study_id) const {
  auto slot = study_slot(study_id);
  std::lock_guard lock(slot->mutex);
  return make_study_link(*slot->study, options_.base_url);
}

// --- Participant operations ---------------------------------------------------

JoinResult StudyService::join(const std::string& slug, const EntryParams& params) {
  auto owner = study_slot(slug);
  std::shared_ptr<SessionSlot> created;
  JoinResult result;
  {
    std::lock_guard study_lock(owner->mutex);
    const auto study = owner->study;
    if (study->status == StudyStatus::archived) {
      throw errors::conflict("study_archived", "study is archived");
    }
    const std::string external_id = extract_external_id(params, study->recruitment);

    if (auto it = owner->by_external.find(external_id); it != owner->by_external.end()) {
      auto& slot = *it->second;
      std::lock_guard lock(slot.mutex);
      result.session_id = slot.session.session_id;
      result.session_token = slot.session.session_token;
      result.resumed = true;
      result.element = machine::element_payload(slot.session, *slot.study, session_now(slot));
      return result;
    }
    if (study->status != StudyStatus::deployed) {
      throw errors::conflict("not_deployed", "study is not accepting participants");
    }

    const TimePoint now = clock_.now();
    auto plans = owner->plans;
    const std::uint64_t index = owner->next_index;
    ParticipantSession s;
    s.session_id = new_id();
    s.session_token = new_token();
    s.study_id = study->study_id;
    s.external_id = external_id;
    s.assignment = assign_from_plans(plans, s.session_id, index);
    s.path = flatten_procedure(*study, s.assignment.orders);
    s.created_at = now;
    auto drafts = machine::start(s, *study, now);

    log_.register_session(s.study_id, s.session_id);
    auto events = log_.append(
        s.study_id, s.session_id, now, std::move(drafts),
        [&](const std::vector<LogEvent>& finalized) {
          store_->commit({plans_record(s.study_id, plans, index + 1), session_record(s),
                          events_record(finalized)});
        });

    owner->plans = std::move(plans);
    owner->next_index = index + 1;
    owner->export_info[s.session_id] = {s.external_id,
                                        format_assigned_order(s.assignment.orders)};
    created = std::make_shared<SessionSlot>();
    created->study = study;
    created->corpora = owner->corpora;
    created->owner = owner;
    created->last_ts = events.empty() ? now : events.back().ts;
    result.session_id = s.session_id;
    result.session_token = s.session_token;
    result.element = machine::element_payload(s, *study, now);
    created->session = std::move(s);
    owner->by_external[external_id] = created;
  }
  std::unique_lock lock(catalog_mutex_);
  sessions_by_id_[result.session_id] = created;
  sessions_by_token_[result.session_token] = created;
  return result;
}

json StudyService::current_element(const std::string& token) {
  auto slot = session_by_token(token);
  std::lock_guard lock(slot->mutex);
  const TimePoint now = session_now(*slot);
  ParticipantSession next = slot->session;
  auto drafts = machine::check_timeout(next, *slot->study, now);
  if (!drafts.empty()) commit_session(*slot, std::move(next), std::move(drafts), now);
  return machine::element_payload(slot->session, *slot->study, now);
}

json StudyService::respond(const std::string& token, const json& body) {
  detail::require_object(body, "");
  const std::string request_id = detail::string_or(body, "request_id", "", "");
  const std::string element_id = detail::req_string(body, "element_id", "");
  auto slot = session_by_token(token);
  std::lock_guard lock(slot->mutex);
  if (!request_id.empty()) {
    if (auto it = slot->session.replies.find(request_id); it != slot->session.replies.end()) {
      return it->second;
    }
  }
  if (slot->busy) throw errors::conflict("busy", "a request for this task is still pending");
  const TimePoint now = session_now(*slot);
  ParticipantSession next = slot->session;
  auto drafts = machine::check_timeout(next, *slot->study, now);
  auto more = machine::submit_response(next, *slot->study, element_id, body, now);
  drafts.insert(drafts.end(), more.begin(), more.end());
  json reply{{"ok", true}, {"element_id", element_id}, {"status", to_string(next.status)}};
  if (!request_id.empty()) next.replies[request_id] = reply;
  commit_session(*slot, std::move(next), std::move(drafts), now);
  return reply;
}

json StudyService::advance(const std::string& token, const json& body) {
  if (!body.is_null()) detail::require_object(body, "");
  const json& b = body.is_null() ? json::object() : body;
  const std::string request_id = detail::string_or(b, "request_id", "", "");
  const auto expected = detail::opt_string(b, "element_id", "");
  auto slot = session_by_token(token);
  std::lock_guard lock(slot->mutex);
  if (!request_id.empty()) {
    if (auto it = slot->session.replies.find(request_id); it != slot->session.replies.end()) {
      return it->second;
    }
  }
  if (slot->busy) {
    throw Error("busy", "a request for this task is still pending", 409,
                json{{"reason", "busy"}});
  }
  const TimePoint now = session_now(*slot);
  ParticipantSession next = slot->session;
  auto drafts = machine::advance(next, *slot->study, expected, now,
                                 [this, &slot] { return mint_code(*slot->owner); });
  json reply = machine::element_payload(next, *slot->study, now);
  if (!request_id.empty()) next.replies[request_id] = reply;
  commit_session(*slot, std::move(next), std::move(drafts), now);
  return reply;
}

json StudyService::interact(const std::string& token, const json& body) {
  detail::require_object(body, "");
  const RequestKind kind =
      parse_request_kind(detail::string_or(body, "kind", "", "query"));
  const std::string text = detail::req_string(body, "text", "");
  if (trimmed(text).empty()) throw errors::validation("text must not be empty");
  std::string request_id = detail::string_or(body, "request_id", "", "");
  const auto element_hint = detail::opt_string(body, "element_id", "");
  const auto backend_hint = detail::opt_string(body, "backend_id", "");

  auto slot = session_by_token(token);
  InteractionRequest request;
  const BackendConfig* backend = nullptr;
  std::string briefing;
  {
    std::lock_guard lock(slot->mutex);
    if (!request_id.empty()) {
      if (auto it = slot->session.replies.find(request_id); it != slot->session.replies.end()) {
        return it->second;
      }
    } else {
      request_id = new_id();
    }
    if (slot->session.completed()) {
      throw errors::conflict("session_completed", "session is already completed");
    }
    const std::string element_id = *slot->session.current_element_id();
    if (element_hint && *element_hint != element_id) {
      throw Error("element_mismatch", "element '" + *element_hint + "' is not the current element",
                  409, json{{"current_element_id", element_id}});
    }
    const auto* task = std::get_if<Task>(find_element(*slot->study, element_id));
    if (task == nullptr) {
      throw Error("not_a_task", "current element does not accept interactions", 409);
    }
    backend = find_backend(*slot->study, task->condition_ref);
    if (backend == nullptr || (backend_hint && *backend_hint != backend->backend_id)) {
      throw Error("unknown_backend",
                  "backend '" + backend_hint.value_or(task->condition_ref) +
                      "' is not the condition of this task",
                  422);
    }
    if (slot->busy) throw errors::conflict("busy", "a request for this task is still pending");

    const TimePoint now = session_now(*slot);
    ParticipantSession next = slot->session;
    auto drafts = machine::check_timeout(next, *slot->study, now);
    if (next.timed_out.count(element_id) != 0) {
      if (!drafts.empty()) commit_session(*slot, std::move(next), std::move(drafts), now);
      throw errors::conflict("task_timed_out", "the time limit for this task has run out");
    }
    const auto& transcript = next.transcripts[element_id];
    if (kind == RequestKind::follow_up && transcript.empty()) {
      throw errors::validation("follow_up requires a prior turn in this task");
    }
    machine::reactivate(next);
    next.last_activity = now;
    request.request_id = request_id;
    request.session_id = next.session_id;
    request.element_id = element_id;
    request.backend_id = backend->backend_id;
    request.kind = kind;
    request.text = text;
    request.history = transcript;
    request.issued_at = now;
    briefing = task->briefing;
    drafts.push_back({element_id, Actor::participant,
                      kind == RequestKind::follow_up ? EventType::followup_submitted
                                                     : EventType::query_submitted,
                      json{{"request_id", request_id},
                           {"kind", to_string(kind)},
                           {"text", text},
                           {"backend_id", backend->backend_id}}});
    commit_session(*slot, std::move(next), std::move(drafts), now);
    slot->busy = true;
  }

  struct BusyReset {
    SessionSlot& slot;
    bool armed = true;
    ~BusyReset() {
      if (!armed) return;
      std::lock_guard lock(slot.mutex);
      slot.busy = false;
    }
  } busy_guard{*slot};

  std::optional<InteractionResponse> response;
  std::optional<Error> failure;
  try {
    auto model = model_for(*backend);
    const Corpus* corpus = nullptr;
    if (backend->corpus_ref) {
      auto it = slot->corpora->find(*backend->corpus_ref);
      if (it != slot->corpora->end()) corpus = &it->second;
    }
    ConnectorContext ctx{*backend, corpus, model.get(), briefing, request.issued_at,
                         options_.resolve_secret};
    response = registry_.route(request, ctx);
  } catch (const Error& e) {
    failure = e;
  } catch (const std::exception& e) {
    failure = Error("connector_error", e.what(), 502);
  }

  std::lock_guard lock(slot->mutex);
  busy_guard.armed = false;
  slot->busy = false;
  const TimePoint now = session_now(*slot);
  ParticipantSession next = slot->session;
  if (failure) {
    json payload = failure->extra().is_object() ? failure->extra() : json::object();
    payload["request_id"] = request_id;
    payload["error"] = failure->code();
    payload["detail"] = failure->detail();
    commit_session(*slot, std::move(next),
                   {{request.element_id, Actor::connector, EventType::connector_error, payload}},
                   now);
    json extra{{"request_id", request_id}, {"retryable", true}};
    throw Error(failure->code(), failure->detail(), failure->http_status(), extra);
  }
  json envelope = to_json(*response);
  auto& transcript = next.transcripts[request.element_id];
  transcript.push_back({"participant", text});
  transcript.push_back({"system", reply_text(*response)});
  next.replies[request_id] = envelope;
  commit_session(*slot, std::move(next),
                 {{request.element_id, Actor::connector, EventType::response_shown,
                   json{{"request_id", request_id}, {"response", envelope}}}},
                 now);
  return envelope;
}

CompletionTarget StudyService::complete(const std::string& token) {
  auto slot = session_by_token(token);
  std::lock_guard lock(slot->mutex);
  return completion_redirect(slot->session.completion_code, slot->study->recruitment);
}

}  // namespace studyrig
