#include "studyrig/sim.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include "json_fields.hpp"
#include "studyrig/assignment.hpp"
#include "studyrig/error.hpp"
#include "studyrig/http_transport.hpp"

namespace studyrig {

using nlohmann::json;

// --- Script JSON --------------------------------------------------------------

BehaviorScript script_from_json(const json& j) {
  using namespace detail;
  require_object(j, "");
  BehaviorScript s;
  s.acknowledge = bool_or(j, "acknowledge", "", s.acknowledge);
  if (const json* q = find_field(j, "questionnaire")) {
    require_object(*q, "questionnaire");
    auto& p = s.questionnaire;
    p.mode = string_or(*q, "mode", "questionnaire", p.mode);
    if (p.mode != "fixed" && p.mode != "random") {
      throw errors::malformed("questionnaire.mode: expected fixed or random");
    }
    p.likert = opt_int(*q, "likert", "questionnaire").value_or(p.likert);
    p.free_text = string_or(*q, "free_text", "questionnaire", p.free_text);
    p.choice_index = static_cast<std::size_t>(
        opt_int(*q, "choice_index", "questionnaire").value_or(static_cast<std::int64_t>(p.choice_index)));
    p.skip_required = bool_or(*q, "skip_required", "questionnaire", p.skip_required);
  }
  if (const json* t = find_field(j, "task")) {
    require_object(*t, "task");
    auto& p = s.task;
    const json& list = array_or_empty(*t, "interactions", "task");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string path = index_path("task.interactions", i);
      require_object(list[i], path);
      ScriptedInteraction it;
      it.delay_s = opt_number(list[i], "delay_s", path).value_or(0);
      it.kind = string_or(list[i], "kind", path, "query");
      it.text = req_string(list[i], "text", path);
      if (it.kind != "query" && it.kind != "message" && it.kind != "follow_up") {
        throw errors::malformed(path + ".kind: expected query, message or follow_up");
      }
      if (it.delay_s < 0) throw errors::malformed(path + ".delay_s: must be >= 0");
      p.interactions.push_back(std::move(it));
    }
    p.answer = string_or(*t, "answer", "task", p.answer);
    p.advance_delay_s = opt_number(*t, "advance_delay_s", "task").value_or(0);
    if (p.advance_delay_s < 0) throw errors::malformed("task.advance_delay_s: must be >= 0");
  }
  if (const json* p = find_field(j, "pause")) {
    require_object(*p, "pause");
    auto& q = s.pause;
    q.timed = string_or(*p, "timed", "pause", q.timed);
    q.manual = string_or(*p, "manual", "pause", q.manual);
    if (q.timed != "wait" && q.timed != "stop") {
      throw errors::malformed("pause.timed: expected wait or stop");
    }
    if (q.manual != "approve" && q.manual != "wait" && q.manual != "stop") {
      throw errors::malformed("pause.manual: expected approve, wait or stop");
    }
    q.poll_interval_ms = opt_int(*p, "poll_interval_ms", "pause").value_or(q.poll_interval_ms);
    q.max_wait_ms = opt_int(*p, "max_wait_ms", "pause").value_or(q.max_wait_ms);
  }
  if (auto stop = opt_int(j, "stop_at_cursor", "")) {
    if (*stop < 0) throw errors::malformed("stop_at_cursor: must be >= 0");
    s.stop_at_cursor = static_cast<std::size_t>(*stop);
  }
  return s;
}

json to_json(const BehaviorScript& s) {
  json interactions = json::array();
  for (const auto& i : s.task.interactions) {
    interactions.push_back({{"delay_s", i.delay_s}, {"kind", i.kind}, {"text", i.text}});
  }
  return json{
      {"acknowledge", s.acknowledge},
      {"questionnaire",
       {{"mode", s.questionnaire.mode},
        {"likert", s.questionnaire.likert},
        {"free_text", s.questionnaire.free_text},
        {"choice_index", s.questionnaire.choice_index},
        {"skip_required", s.questionnaire.skip_required}}},
      {"task",
       {{"interactions", interactions},
        {"answer", s.task.answer},
        {"advance_delay_s", s.task.advance_delay_s}}},
      {"pause",
       {{"timed", s.pause.timed},
        {"manual", s.pause.manual},
        {"poll_interval_ms", s.pause.poll_interval_ms},
        {"max_wait_ms", s.pause.max_wait_ms}}},
      {"stop_at_cursor", s.stop_at_cursor ? json(*s.stop_at_cursor) : json(nullptr)}};
}

json to_json(const SimReport& r) {
  json sessions = json::array();
  for (const auto& s : r.sessions) {
    sessions.push_back({{"index", s.index},
                        {"external_id", s.external_id},
                        {"session_id", s.session_id},
                        {"status", s.status},
                        {"visited", s.visited},
                        {"assigned_order", s.assigned_order},
                        {"completion_code", detail::nullable(s.completion_code)},
                        {"connector_errors", s.connector_errors},
                        {"events", s.events},
                        {"error", detail::nullable(s.error)},
                        {"error_detail", s.error_detail},
                        {"stopped", s.stopped}});
  }
  return json{{"ok", r.ok},
              {"completed", r.completed},
              {"total_events", r.total_events},
              {"order_counts", r.order_counts},
              {"sessions", sessions}};
}

// --- Simulation ---------------------------------------------------------------

namespace {

struct Reply {
  int status = 0;
  json body;
};

class Api {
 public:
  Api(const std::string& base_url, std::string experimenter_token)
      : parts_(split_url(base_url)),
        client_(parts_.origin, std::chrono::seconds(60)),
        experimenter_token_(std::move(experimenter_token)) {
    while (!parts_.path.empty() && parts_.path.back() == '/') parts_.path.pop_back();
  }

  Reply get(const std::string& path, const Headers& headers = {}) {
    return wrap(client_.get(parts_.path + path, headers));
  }
  Reply post(const std::string& path, const json& body, const Headers& headers = {}) {
    return wrap(client_.post(parts_.path + path, body.dump(), "application/json", headers));
  }
  HttpResult get_raw(const std::string& path, const Headers& headers = {}) {
    return client_.get(parts_.path + path, headers);
  }
  Headers experimenter() const { return {{"Authorization", "Bearer " + experimenter_token_}}; }
  bool has_experimenter() const { return !experimenter_token_.empty(); }

 private:
  static Reply wrap(HttpResult r) {
    Reply out{r.status, json::object()};
    if (!r.body.empty()) {
      out.body = json::parse(r.body, nullptr, false);
      if (out.body.is_discarded()) out.body = json{{"raw", r.body}};
    }
    return out;
  }

  UrlParts parts_;
  HttpClient client_;
  std::string experimenter_token_;
};

struct ProtocolError {
  std::string code;
  std::string detail;
};

std::string error_code(const Reply& r) {
  if (r.body.is_object()) {
    if (r.body.contains("reason") && r.body["reason"].is_string()) return r.body["reason"];
    if (r.body.contains("error") && r.body["error"].is_string()) return r.body["error"];
  }
  return "http_" + std::to_string(r.status);
}

[[noreturn]] void fail(const Reply& r, const std::string& what) {
  std::string detail = what + " -> HTTP " + std::to_string(r.status);
  if (r.body.is_object() && r.body.contains("detail") && r.body["detail"].is_string()) {
    detail += ": " + r.body["detail"].get<std::string>();
  }
  throw ProtocolError{error_code(r), detail};
}

class Participant {
 public:
  Participant(const SimOptions& opt, const std::optional<Study>& study, std::size_t index,
              std::mutex& clock_mutex)
      : opt_(opt),
        study_(study),
        api_(opt.base_url, opt.experimenter_token),
        rng_(opt.seed ^ (0x9E3779B97F4A7C15ULL * (index + 1))),
        clock_mutex_(clock_mutex) {
    report_.index = index;
    report_.external_id = opt.external_id_prefix + std::to_string(index);
  }

  SessionReport run() {
    try {
      drive();
    } catch (const ProtocolError& e) {
      report_.error = e.code;
      report_.error_detail = e.detail;
    } catch (const Error& e) {
      report_.error = e.code();
      report_.error_detail = e.detail();
    }
    return std::move(report_);
  }

 private:
  Headers session() const { return {{"X-Session-Token", token_}}; }
  std::string next_request_id() {
    return "sim-" + std::to_string(report_.index) + "-" + std::to_string(++requests_);
  }

  void wait_seconds(double seconds) {
    if (seconds <= 0) return;
    if (opt_.virtual_clock) {
      std::lock_guard lock(clock_mutex_);
      Reply r = api_.post("/api/clock/advance", {{"seconds", seconds}}, api_.experimenter());
      if (r.status != 200) fail(r, "advance virtual clock");
    } else {
      std::this_thread::sleep_for(
          std::chrono::milliseconds(static_cast<std::int64_t>(seconds * 1000)));
    }
  }

  void set_state(const json& state) {
    state_ = state;
    report_.status = state_.value("status", "");
    if (state_.contains("element")) {
      const std::string id = state_["element"].value("id", "");
      if (report_.visited.empty() || report_.visited.back() != id) report_.visited.push_back(id);
    }
    if (state_.contains("completion_code")) {
      report_.completion_code = state_["completion_code"].get<std::string>();
    }
  }

  void respond(const json& body, const std::string& what) {
    json b = body;
    b["request_id"] = next_request_id();
    Reply r = api_.post("/api/session/respond", b, session());
    if (r.status != 200) fail(r, what);
  }

  json answers_for(const json& items) {
    json answers = json::object();
    const auto& q = opt_.script.questionnaire;
    const bool random = q.mode == "random";
    for (const auto& item : items) {
      const std::string id = item.at("item_id");
      const std::string kind = item.at("kind");
      if (kind == "likert_1_5") {
        answers[id] = random ? std::uniform_int_distribution<int>(1, 5)(rng_) : q.likert;
      } else if (kind == "free_text") {
        answers[id] = q.free_text;
      } else {
        const auto& choices = item.at("choices");
        if (choices.empty()) continue;
        const std::size_t i =
            random ? std::uniform_int_distribution<std::size_t>(0, choices.size() - 1)(rng_)
                   : std::min(q.choice_index, choices.size() - 1);
        answers[id] = choices[i];
      }
    }
    return answers;
  }

  // Returns false when the script stops here.
  bool satisfy(const json& el) {
    const std::string type = el.at("type");
    const std::string id = el.at("id");
    if (type == "text_page") {
      if (el.value("require_acknowledge", false) && !el.value("acknowledged", false) &&
          opt_.script.acknowledge) {
        respond({{"element_id", id}, {"acknowledge", true}}, "acknowledge " + id);
      }
    } else if (type == "questionnaire") {
      if (!opt_.script.questionnaire.skip_required && !el.value("answered", false)) {
        respond({{"element_id", id}, {"answers", answers_for(el.at("items"))}},
                "answer questionnaire " + id);
      }
    } else if (type == "task") {
      for (const auto& it : opt_.script.task.interactions) {
        wait_seconds(it.delay_s);
        Reply r = api_.post("/api/session/interact",
                            {{"kind", it.kind},
                             {"text", it.text},
                             {"element_id", id},
                             {"request_id", next_request_id()}},
                            session());
        if (r.status == 502) {
          ++report_.connector_errors;
        } else if (r.status != 200) {
          fail(r, "interact on " + id);
        }
      }
      if (el.value("completion_rule", "") == "require_answer" && !el.value("answered", false)) {
        respond({{"element_id", id}, {"answer", opt_.script.task.answer}}, "answer task " + id);
      }
      wait_seconds(opt_.script.task.advance_delay_s);
    } else if (type == "pause") {
      const auto& p = opt_.script.pause;
      if (el.value("mode", "") == "timed") {
        if (p.timed == "stop") return false;
        wait_seconds(static_cast<double>(el.value("remaining_s", 0)));
      } else {
        if (p.manual == "stop") return false;
        if (p.manual == "approve" && el.value("waiting", true)) {
          Reply r = api_.post("/api/sessions/" + report_.session_id + "/approve",
                              {{"approver", "sim-harness"}}, api_.experimenter());
          if (r.status != 200) fail(r, "approve " + report_.session_id);
        } else if (p.manual == "wait") {
          const auto deadline =
              std::chrono::steady_clock::now() + std::chrono::milliseconds(p.max_wait_ms);
          for (;;) {
            Reply r = api_.get("/api/session/element", session());
            if (r.status != 200) fail(r, "poll element");
            if (!r.body["element"].value("waiting", true)) break;
            if (std::chrono::steady_clock::now() > deadline) {
              throw ProtocolError{"awaiting_approval", "no approval within max_wait_ms"};
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(p.poll_interval_ms));
          }
        }
      }
    }
    return true;
  }

  void drive() {
    const std::string id_param =
        study_ ? study_->recruitment.id_param_name : std::string("PROLIFIC_PID");
    Reply joined = api_.post("/api/p/" + opt_.study + "/join",
                             {{"params", {{id_param, report_.external_id}}}});
    if (joined.status != 200 && joined.status != 201) fail(joined, "join");
    token_ = joined.body.at("session_token");
    report_.session_id = joined.body.at("session_id");
    set_state(joined.body.at("state"));

    for (std::size_t guard = 0; guard < 100000; ++guard) {
      if (report_.status == "completed") return;
      const json el = state_.at("element");
      if (opt_.script.stop_at_cursor &&
          state_.value("cursor", std::size_t{0}) == *opt_.script.stop_at_cursor) {
        report_.stopped = true;
        return;
      }
      if (!satisfy(el)) {
        report_.stopped = true;
        return;
      }
      Reply r = api_.post("/api/session/advance",
                          {{"element_id", el.at("id")}, {"request_id", next_request_id()}},
                          session());
      if (r.status == 409 && error_code(r) == "pause_not_elapsed" && opt_.virtual_clock) {
        wait_seconds(static_cast<double>(r.body.value("remaining_s", 1)));
        continue;
      }
      if (r.status != 200) fail(r, "advance from " + el.at("id").get<std::string>());
      set_state(r.body);
    }
    throw ProtocolError{"no_progress", "session did not finish within the step guard"};
  }

  const SimOptions& opt_;
  const std::optional<Study>& study_;
  Api api_;
  std::mt19937_64 rng_;
  std::mutex& clock_mutex_;
  SessionReport report_;
  std::string token_;
  json state_;
  std::size_t requests_ = 0;
};

}  // namespace

SimReport simulate(const SimOptions& options) {
  if (options.n == 0) throw errors::validation("n must be >= 1");
  Api api(options.base_url, options.experimenter_token);
  {
    Reply health = api.get("/api/health");
    if (health.status != 200) fail(health, "health check");
  }
  std::optional<Study> study;
  if (api.has_experimenter()) {
    Reply r = api.get("/api/studies/" + options.study, api.experimenter());
    if (r.status != 200) fail(r, "fetch study");
    study = study_from_json(r.body);
  }

  SimReport report;
  report.sessions.resize(options.n);
  std::atomic<std::size_t> next{0};
  std::mutex clock_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= options.n) return;
      report.sessions[i] = Participant(options, study, i, clock_mutex).run();
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.concurrency, options.n));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  if (study) {
    for (auto& s : report.sessions) {
      for (const Block* b : counterbalanced_blocks(*study)) {
        const std::set<std::string> children(b->children.begin(), b->children.end());
        Ordering order;
        for (const auto& id : s.visited) {
          if (children.count(id) != 0) order.push_back(id);
        }
        if (order.size() == children.size()) {
          s.assigned_order[b->id] = order;
          ++report.order_counts[b->id][json(order).dump()];
        }
      }
    }
    HttpResult csv = api.get_raw("/api/studies/" + options.study + "/export.csv",
                                 api.experimenter());
    if (csv.status == 200) {
      std::map<std::string, std::size_t> counts;
      for (const auto& e : parse_export(csv.body)) {
        ++counts[e.event.session_id];
      }
      for (auto& s : report.sessions) {
        s.events = counts[s.session_id];
        report.total_events += s.events;
      }
    }
  }
  for (const auto& s : report.sessions) {
    if (s.error) report.ok = false;
    if (s.status == "completed") ++report.completed;
  }
  return report;
}

// --- Replay -------------------------------------------------------------------

json to_json(const ReplayVerdict& v) {
  return json{{"ok", v.ok()},
              {"sessions", v.sessions},
              {"events", v.events},
              {"violations", v.violations}};
}

std::vector<ExportedEvent> parse_export(std::string_view csv) {
  const auto rows = parse_csv(csv);
  if (rows.empty()) throw errors::malformed("export: empty file");
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (header != kExportHeader) throw errors::malformed("export: unexpected header");
  std::vector<ExportedEvent> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r];
    const std::string where = "export row " + std::to_string(r + 1);
    if (f.size() != 10) throw errors::malformed(where + ": expected 10 fields");
    ExportedEvent e;
    e.event.study_id = f[0];
    e.event.session_id = f[1];
    e.external_id = f[2];
    e.assigned_order = f[3];
    if (!f[4].empty()) e.event.element_id = f[4];
    try {
      e.event.seq = std::stoull(f[5]);
    } catch (const std::exception&) {
      throw errors::malformed(where + ": seq is not an integer");
    }
    auto ts = parse_iso8601(f[6]);
    if (!ts) throw errors::malformed(where + ": invalid timestamp");
    e.event.ts = *ts;
    e.event.actor = parse_actor(f[7]);
    e.event.type = parse_event_type(f[8]);
    e.event.payload = json::parse(f[9], nullptr, false);
    if (e.event.payload.is_discarded()) throw errors::malformed(where + ": invalid payload JSON");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> check_session_log(const Study& study, const BlockOrders& orders,
                                           const std::vector<LogEvent>& events) {
  std::vector<std::string> v;
  const std::string who = events.empty() ? std::string("session") : "session " + events[0].session_id;
  auto add = [&](const LogEvent& e, const std::string& msg) {
    v.push_back(who + " seq " + std::to_string(e.seq) + ": " + msg);
  };
  std::vector<std::string> path;
  try {
    path = flatten_procedure(study, orders);
  } catch (const Error& e) {
    v.push_back(who + ": assigned order does not fit the study: " + e.detail());
    return v;
  }

  enum class Hold { none, timed, manual };
  Hold hold = Hold::none;
  TimePoint resume_at{};
  std::uint64_t expected_seq = 1;
  std::optional<TimePoint> prev_ts;
  std::size_t cursor = 0;
  std::size_t shown = 0;
  bool completed = false;

  for (const auto& e : events) {
    if (e.seq != expected_seq) add(e, "expected seq " + std::to_string(expected_seq));
    expected_seq = e.seq + 1;
    if (prev_ts && e.ts < *prev_ts) add(e, "timestamp went backwards");
    prev_ts = e.ts;
    if (completed) add(e, "event after session_completed");
    const std::string el = e.element_id.value_or("");

    switch (e.type) {
      case EventType::element_shown:
        if (shown != cursor) {
          add(e, "element_shown while cursor is " + std::to_string(cursor));
        } else if (shown >= path.size()) {
          add(e, "element_shown past the end of the path");
        } else if (el != path[shown]) {
          add(e, "shown '" + el + "' but path has '" + path[shown] + "'");
        }
        ++shown;
        break;
      case EventType::advance:
        if (shown != cursor + 1) add(e, "advance before the current element was shown");
        if (cursor >= path.size() || el != path[cursor]) {
          add(e, "advance from '" + el + "' which is not the current element");
        }
        if (hold == Hold::manual) add(e, "advance while awaiting approval");
        if (hold == Hold::timed && e.ts < resume_at) add(e, "advance before the pause elapsed");
        hold = Hold::none;
        ++cursor;
        break;
      case EventType::pause_started:
        if (cursor >= path.size() || el != path[cursor]) add(e, "pause_started off the cursor");
        if (e.payload.value("mode", "") == "timed") {
          hold = Hold::timed;
          auto t = parse_iso8601(e.payload.value("resume_at", ""));
          if (!t) add(e, "pause_started without resume_at");
          resume_at = t.value_or(e.ts);
        } else {
          hold = Hold::manual;
        }
        break;
      case EventType::pause_resumed:
        if (hold == Hold::none) add(e, "pause_resumed without an active pause");
        if (hold == Hold::timed && e.ts < resume_at) add(e, "timed pause resumed early");
        hold = Hold::none;
        break;
      case EventType::session_completed:
        if (cursor != path.size()) add(e, "session_completed before the end of the path");
        completed = true;
        break;
      default:
        break;
    }
  }
  if (!completed && shown != cursor + 1 && !events.empty()) {
    v.push_back(who + ": current element was never shown");
  }
  if (completed && shown != path.size()) v.push_back(who + ": not every element was shown");

  const FoldedSession folded = fold_session(events);
  if (folded.cursor != cursor) v.push_back(who + ": folded cursor disagrees with advances");
  return v;
}

ReplayVerdict replay_check(const Study& study, std::string_view export_csv_text) {
  ReplayVerdict verdict;
  const auto rows = parse_export(export_csv_text);
  verdict.events = rows.size();
  std::map<std::string, std::vector<LogEvent>> by_session;
  std::map<std::string, std::string> orders_text;
  std::vector<std::string> order;  // first-seen session order
  for (const auto& r : rows) {
    if (r.event.study_id != study.study_id) {
      verdict.violations.push_back("row for foreign study '" + r.event.study_id + "'");
    }
    auto [it, fresh] = by_session.try_emplace(r.event.session_id);
    if (fresh) order.push_back(r.event.session_id);
    it->second.push_back(r.event);
    orders_text[r.event.session_id] = r.assigned_order;
  }
  for (const auto& sid : order) {
    const auto& events = by_session[sid];
    if (sid == kRoutingStream) {
      for (std::size_t i = 0; i < events.size(); ++i) {
        if (events[i].seq != i + 1) verdict.violations.push_back("routing stream seq gap");
      }
      continue;
    }
    ++verdict.sessions;
    BlockOrders orders;
    if (!orders_text[sid].empty()) {
      json parsed = json::parse(orders_text[sid], nullptr, false);
      if (parsed.is_discarded() || !parsed.is_object()) {
        verdict.violations.push_back("session " + sid + ": unreadable assigned_order");
        continue;
      }
      orders = parsed.get<BlockOrders>();
    }
    auto v = check_session_log(study, orders, events);
    verdict.violations.insert(verdict.violations.end(), v.begin(), v.end());
  }
  return verdict;
}

ReplayVerdict replay_check_remote(const std::string& base_url, const std::string& study_id,
                                  const std::string& experimenter_token) {
  Api api(base_url, experimenter_token);
  Reply r = api.get("/api/studies/" + study_id, api.experimenter());
  if (r.status != 200) {
    throw Error(error_code(r), "fetch study -> HTTP " + std::to_string(r.status), 502);
  }
  const Study study = study_from_json(r.body);
  HttpResult csv = api.get_raw("/api/studies/" + study_id + "/export.csv", api.experimenter());
  if (csv.status != 200) {
    throw Error("export_unreadable", "export -> HTTP " + std::to_string(csv.status), 502);
  }
  return replay_check(study, csv.body);
}

}  // namespace studyrig
