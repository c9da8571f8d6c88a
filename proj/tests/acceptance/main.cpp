// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.
// Everything goes through the HTTP API of in-process servers.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "instance.hpp"
#include "stub_server.hpp"
#include "studyrig/connector.hpp"
#include "studyrig/event_log.hpp"
#include "studyrig/session.hpp"
#include "studyrig/sim.hpp"
#include "studyrig/study.hpp"
#include "support.hpp"

using namespace studyrig;
using namespace testsupport;
using nlohmann::json;
using Steady = std::chrono::steady_clock;

namespace {

struct Outcome {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

double seconds_since(Steady::time_point start) {
  return std::chrono::duration<double>(Steady::now() - start).count();
}

std::string fmt(double s) {
  std::ostringstream o;
  o.precision(3);
  o << std::fixed << s << "s";
  return o.str();
}

// Fails loudly instead of returning a half-filled reply.
Instance::Reply expect(Instance::Reply r, int status, const std::string& what) {
  if (r.status != status) {
    throw std::runtime_error(what + ": HTTP " + std::to_string(r.status) + " " + r.raw);
  }
  return r;
}

std::string create_deployed(Instance& inst, const json& def) {
  const std::string id = expect(inst.post("/api/studies", def), 201, "create")
                             .body["study_id"];
  expect(inst.post("/api/studies/" + id + "/deploy", json::object()), 200, "deploy");
  return id;
}

std::string import_deployed(Instance& inst, const std::string& bundle) {
  const std::string id =
      expect(inst.post_raw("/api/bundles/import", bundle), 201, "import").body["study_id"];
  expect(inst.post("/api/studies/" + id + "/deploy", json::object()), 200, "deploy");
  return id;
}

Study fetch_study(Instance& inst, const std::string& id) {
  return study_from_json(expect(inst.get("/api/studies/" + id), 200, "get study").body);
}

SimOptions sim_options(Instance& inst, const std::string& study, std::size_t n) {
  SimOptions o;
  o.base_url = inst.url();
  o.study = study;
  o.n = n;
  o.virtual_clock = true;
  o.experimenter_token = kToken;
  o.concurrency = 4;
  return o;
}

const Block* counterbalanced_block(const Study& s) {
  for (const auto& e : s.procedure) {
    if (const auto* b = std::get_if<Block>(&e); b != nullptr && b->counterbalance) return b;
  }
  return nullptr;
}

// Order counts of the counterbalanced block, keyed by backend labels.
std::map<std::vector<std::string>, std::size_t> label_orders(const Study& study,
                                                            const SimReport& report) {
  const Block* b = counterbalanced_block(study);
  std::map<std::vector<std::string>, std::size_t> out;
  if (b == nullptr) return out;
  for (const auto& s : report.sessions) {
    auto it = s.assigned_order.find(b->id);
    if (it == s.assigned_order.end()) continue;
    std::vector<std::string> labels;
    for (const auto& child : it->second) {
      const auto* t = std::get_if<Task>(find_element(study, child));
      const BackendConfig* be = t != nullptr ? find_backend(study, t->condition_ref) : nullptr;
      labels.push_back(be != nullptr ? be->label : "?" + child);
    }
    ++out[labels];
  }
  return out;
}

std::string describe(const std::map<std::vector<std::string>, std::size_t>& orders) {
  std::string s;
  for (const auto& [order, n] : orders) {
    if (!s.empty()) s += ", ";
    s += json(order).dump() + "=" + std::to_string(n);
  }
  return s;
}

void check_sim(Outcome& o, const SimReport& r, std::size_t n, const std::string& what) {
  o.check(r.ok, what + ": simulation reported protocol errors");
  o.check(r.completed == n, what + ": " + std::to_string(r.completed) + "/" + std::to_string(n) +
                                " sessions completed");
}

// --- 1 -------------------------------------------------------------------------

Outcome counterbalance_balance() {
  Outcome o;
  Instance inst;
  {
    const auto start = Steady::now();
    const std::string id = import_deployed(inst, shipped_bundle());
    const Study study = fetch_study(inst, id);
    const SimReport r = simulate(sim_options(inst, id, 8));
    const double took = seconds_since(start);
    check_sim(o, r, 8, "n=8");
    const auto orders = label_orders(study, r);
    const std::map<std::vector<std::string>, std::size_t> want{
        {{"RAG", "Agentic search"}, 4}, {{"Agentic search", "RAG"}, 4}};
    o.check(orders == want, "n=8 orders " + describe(orders));
    o.check(took < 10.0, "n=8 took " + fmt(took));
    o.note("n=8: " + describe(orders) + " in " + fmt(took));
  }
  {
    const auto start = Steady::now();
    const std::string id = create_deployed(inst, counterbalanced_definition(3));
    const Study study = fetch_study(inst, id);
    const SimReport r = simulate(sim_options(inst, id, 9));
    const double took = seconds_since(start);
    check_sim(o, r, 9, "n=9");
    const auto orders = label_orders(study, r);
    bool balanced = orders.size() == 3;
    for (const auto& [order, n] : orders) balanced = balanced && n == 3;
    o.check(balanced, "n=9 k=3 orders " + describe(orders));
    o.check(took < 10.0, "n=9 took " + fmt(took));
    o.note("n=9: " + describe(orders) + " in " + fmt(took));
  }
  return o;
}

// --- 2 -------------------------------------------------------------------------

Outcome race_safe_assignment() {
  Outcome o;
  Instance inst;
  const std::string bundle = shipped_bundle();
  const std::map<std::vector<std::string>, std::size_t> want{
      {{"RAG", "Agentic search"}, 4}, {{"Agentic search", "RAG"}, 4}};
  std::size_t good = 0;
  for (int run = 0; run < 50; ++run) {
    const std::string id = import_deployed(inst, bundle);
    const Study study = fetch_study(inst, id);
    SimOptions opts = sim_options(inst, id, 8);
    opts.concurrency = 8;
    const SimReport r = simulate(opts);
    check_sim(o, r, 8, "run " + std::to_string(run));
    const auto orders = label_orders(study, r);
    if (orders == want) {
      ++good;
    } else {
      o.check(false, "run " + std::to_string(run) + ": " + describe(orders));
    }
  }
  o.note(std::to_string(good) + "/50 runs split 4/4");
  return o;
}

// --- 3 -------------------------------------------------------------------------

json fuzz_definition() {
  json procedure = json::array({text_page("intro", true)});
  procedure.push_back(block("conditions", json::array({"t_a", "t_b", "t_c"}), true));
  procedure.push_back(task("t_a", "cond_a"));
  procedure.push_back(task("t_b", "cond_b", "require_answer"));
  json timed = task("t_c", "cond_c");
  timed["time_limit_s"] = 300;
  procedure.push_back(timed);
  procedure.push_back(timed_pause("gap", 600));
  procedure.push_back(likert_questionnaire("mid"));
  procedure.push_back(manual_pause("gate"));
  procedure.push_back(text_page("outro"));
  return {{"name", "fuzz"},
          {"procedure", procedure},
          {"backends",
           json::array({backend("cond_a", "mock_echo"), backend("cond_b", "mock_echo"),
                        backend("cond_c", "mock_echo")})},
          {"recruitment", {{"allow_anonymous", true}}}};
}

Outcome state_machine_fuzz() {
  Outcome o;
  Instance inst;
  const std::string study_id = create_deployed(inst, fuzz_definition());
  const std::vector<std::string> ids{"intro", "t_a", "t_b",   "t_c",  "gap",
                                     "mid",   "gate", "outro", "nope"};
  std::mt19937_64 rng(20260101);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  auto coin = [&](int percent) { return static_cast<int>(rng() % 100) < percent; };

  const std::size_t kSessions = 1000;
  std::size_t actions = 0, accepted = 0, server_errors = 0;
  std::vector<std::string> session_ids;
  for (std::size_t i = 0; i < kSessions; ++i) {
    const Headers none;
    auto joined = inst.post("/api/p/" + study_id + "/join?PROLIFIC_PID=fuzz-" + std::to_string(i),
                            json::object(), none);
    if (joined.status != 201) {
      o.check(false, "join " + std::to_string(i) + " failed: " + joined.raw);
      continue;
    }
    const std::string token = joined.body["session_token"];
    const std::string sid = joined.body["session_id"];
    session_ids.push_back(sid);
    const Headers session{{"X-Session-Token", token}};
    std::string current = joined.body["state"]["element"]["id"];

    const std::size_t length = 5 + pick(60);
    for (std::size_t step = 0; step < length; ++step) {
      // Mostly aim at the current element, sometimes anywhere.
      const std::string target = coin(75) ? current : ids[pick(ids.size())];
      Instance::Reply r;
      if (coin(45)) {
        // The move a cooperative participant would make next.
        const char kind = current.empty() ? 'x' : current[0];
        if (kind == 'i' && coin(50)) {
          r = inst.post("/api/session/respond", {{"element_id", current}, {"acknowledge", true}},
                        session);
        } else if (kind == 't' && coin(60)) {
          r = coin(60) ? inst.post("/api/session/interact", {{"text", "museums"}}, session)
                       : inst.post("/api/session/respond",
                                   {{"element_id", current}, {"answer", "plan"}}, session);
        } else if (kind == 'm' && coin(50)) {
          r = inst.post("/api/session/respond",
                        {{"element_id", current}, {"answers", {{"satisfaction", 4}}}}, session);
        } else if (current == "gap" && coin(60)) {
          r = inst.post("/api/clock/advance", {{"seconds", 200}});
        } else if (current == "gate" && coin(50)) {
          r = inst.post("/api/sessions/" + sid + "/approve", {{"approver", "fuzz"}});
        } else {
          r = inst.post("/api/session/advance", {{"element_id", current}}, session);
        }
      } else {
        switch (pick(9)) {
          case 0:
          case 1: {
            json body{{"element_id", target}};
            switch (pick(4)) {
              case 0: body["acknowledge"] = coin(80); break;
              case 1: body["answers"] = {{"satisfaction", static_cast<int>(pick(7))}}; break;
              case 2: body["answer"] = coin(80) ? "my plan" : ""; break;
              default: body["answers"] = "garbage"; break;
            }
            if (coin(20)) body["request_id"] = "r" + std::to_string(pick(3));
            r = inst.post("/api/session/respond", body, session);
            break;
          }
          case 2:
          case 3: {
            json body = json::object();
            if (coin(80)) body["element_id"] = target;
            r = inst.post("/api/session/advance", body, session);
            break;
          }
          case 4: {
            json body{{"kind", coin(60) ? "query" : "follow_up"},
                      {"text", coin(90) ? "where to eat" : "  "}};
            if (coin(20)) body["element_id"] = target;
            r = inst.post("/api/session/interact", body, session);
            break;
          }
          case 5:
            r = inst.post("/api/sessions/" + sid + "/approve", {{"approver", "fuzz"}});
            break;
          case 6:
            r = inst.post("/api/clock/advance", {{"seconds", static_cast<int>(pick(400))}});
            break;
          case 7:
            r = inst.post("/api/sessions/" + sid + "/abandon",
                          {{"idle_threshold_s", static_cast<int>(pick(600))}});
            break;
          default:
            r = coin(50) ? inst.get("/api/session/element", session)
                         : inst.get("/api/session/complete", session);
            break;
        }
      }
      ++actions;
      if (r.status >= 500 || r.status == 0) {
        ++server_errors;
        o.check(false, "server error " + std::to_string(r.status) + ": " + r.raw);
      }
      if (r.status < 400) ++accepted;
      auto state = inst.get("/api/session/element", session);
      if (state.status == 200 && state.body.contains("element")) {
        current = state.body["element"]["id"];
      }
    }
  }

  const Study study = fetch_study(inst, study_id);
  const std::string csv = expect(inst.get("/api/studies/" + study_id + "/export.csv"), 200,
                                 "export")
                              .raw;
  const ReplayVerdict verdict = replay_check(study, csv);
  o.check(verdict.ok(), std::to_string(verdict.violations.size()) + " replay violations" +
                            (verdict.ok() ? "" : ", first: " + verdict.violations.front()));
  o.check(verdict.sessions == kSessions,
          "replay saw " + std::to_string(verdict.sessions) + " sessions");

  // Folding the log gives back the stored cursor and status.
  std::map<std::string, std::vector<LogEvent>> by_session;
  for (auto& e : parse_export(csv)) {
    if (!e.event.session_id.empty()) by_session[e.event.session_id].push_back(e.event);
  }
  std::size_t mismatched = 0;
  std::map<std::string, std::size_t> statuses;
  for (const auto& sid : session_ids) {
    const auto snap = inst.service->session_snapshot(sid);
    const FoldedSession f = fold_session(by_session[sid]);
    const std::string status(to_string(snap->status));
    ++statuses[status];
    if (f.cursor != snap->cursor || f.status != status) {
      ++mismatched;
    }
  }
  o.check(mismatched == 0, std::to_string(mismatched) + " sessions fold to a different state");
  std::string mix;
  for (const auto& [s, n] : statuses) mix += " " + s + "=" + std::to_string(n);
  o.note(std::to_string(kSessions) + " sequences, " + std::to_string(actions) + " actions (" +
         std::to_string(accepted) + " accepted), " + std::to_string(verdict.events) +
         " events, violations=" + std::to_string(verdict.violations.size()) + ";" + mix);
  return o;
}

// --- 4 -------------------------------------------------------------------------

Outcome interrupted_time_series() {
  Outcome o;
  Instance inst;
  json def{{"name", "its"},
           {"procedure", json::array({text_page("before"), timed_pause("wait", 259200),
                                      text_page("between"), manual_pause("gate"),
                                      text_page("after")})},
           {"recruitment", {{"allow_anonymous", true}}}};
  const std::string id = create_deployed(inst, def);
  auto joined = expect(inst.post("/api/p/" + id + "/join", json::object(), {}), 201, "join");
  const Headers h{{"X-Session-Token", joined.body["session_token"].get<std::string>()}};
  const std::string sid = joined.body["session_id"];

  auto at_pause = expect(inst.post("/api/session/advance", {{"element_id", "before"}}, h), 200,
                         "advance to pause");
  o.check(at_pause.body["element"]["id"] == "wait", "pause not shown after the first page");
  auto tick = [&](double s) {
    expect(inst.post("/api/clock/advance", {{"seconds", s}}), 200, "clock");
  };
  auto early = inst.post("/api/session/advance", {{"element_id", "wait"}}, h);
  o.check(early.status == 409 && early.body["error"] == "pause_not_elapsed",
          "immediate advance gave " + early.raw);
  o.check(early.body.value("remaining_s", -1) == 259200, "remaining_s " + early.raw);
  tick(259199);
  auto almost = inst.post("/api/session/advance", {{"element_id", "wait"}}, h);
  o.check(almost.status == 409 && almost.body["error"] == "pause_not_elapsed",
          "advance 1 s early gave " + almost.raw);
  o.check(almost.body.value("resume_at", "") == "2026-01-04T00:00:00.000Z",
          "resume_at " + almost.raw);
  tick(1);
  auto after = inst.post("/api/session/advance", {{"element_id", "wait"}}, h);
  o.check(after.status == 200 && after.body["element"]["id"] == "between",
          "advance at expiry gave " + after.raw);

  expect(inst.post("/api/session/advance", {{"element_id", "between"}}, h), 200, "to gate");
  std::size_t blocked = 0;
  for (int i = 0; i < 3; ++i) {
    tick(86400);
    auto r = inst.post("/api/session/advance", {{"element_id", "gate"}}, h);
    if (r.status == 409 && r.body["error"] == "awaiting_approval") ++blocked;
  }
  o.check(blocked == 3, "manual gate let the participant through without approval");
  auto approved = inst.post("/api/sessions/" + sid + "/approve", {{"approver", "pi"}});
  o.check(approved.status == 200, "approve gave " + approved.raw);
  auto through = inst.post("/api/session/advance", {{"element_id", "gate"}}, h);
  o.check(through.status == 200 && through.body["element"]["id"] == "after",
          "advance after approval gave " + through.raw);
  auto done = inst.post("/api/session/advance", {{"element_id", "after"}}, h);
  o.check(done.status == 200 && done.body.contains("completion_code"), "final advance " + done.raw);

  const ReplayVerdict v =
      replay_check(fetch_study(inst, id), inst.get("/api/studies/" + id + "/export.csv").raw);
  o.check(v.ok(), "replay violations on the pause log");
  o.note("timed 259200 s: rejected at +0 s and +259199 s, accepted at +259200 s; manual gate held "
         "3 days until approve");
  return o;
}

// --- 5 -------------------------------------------------------------------------

// Element and backend ids in declaration order; imports keep the order.
std::vector<std::string> element_ids(const Study& s) {
  std::vector<std::string> out;
  for (const auto& e : s.procedure) out.push_back(element_id(e));
  return out;
}

Outcome replication_bundle() {
  Outcome o;
  Instance original;
  const std::string a_id = import_deployed(original, shipped_bundle());
  const std::string exported =
      expect(original.get("/api/studies/" + a_id + "/bundle"), 200, "export").raw;
  o.check(exported == shipped_bundle(), "export differs from the shipped file");

  Instance fresh;
  const std::string b_id = import_deployed(fresh, exported);
  const std::string again = expect(fresh.get("/api/studies/" + b_id + "/bundle"), 200, "export").raw;
  o.check(again == exported, "re-export on a fresh instance is not byte-identical");

  const Study a = fetch_study(original, a_id);
  const Study b = fetch_study(fresh, b_id);
  const auto a_ids = element_ids(a);
  const auto b_ids = element_ids(b);
  o.check(a_ids.size() == b_ids.size(), "procedure sizes differ");
  std::map<std::string, std::string> to_a;
  for (std::size_t i = 0; i < std::min(a_ids.size(), b_ids.size()); ++i) to_a[b_ids[i]] = a_ids[i];
  auto map_ids = [&](std::vector<std::string> v) {
    for (auto& x : v) x = to_a.count(x) != 0 ? to_a[x] : "?" + x;
    return v;
  };

  const SimReport ra = simulate(sim_options(original, a_id, 8));
  const SimReport rb = simulate(sim_options(fresh, b_id, 8));
  check_sim(o, ra, 8, "original");
  check_sim(o, rb, 8, "imported");
  using Paths = std::map<std::string, std::set<std::vector<std::string>>>;
  Paths pa, pb;
  for (const auto& s : ra.sessions) {
    pa[format_assigned_order(s.assigned_order)].insert(s.visited);
    o.check(s.visited == flatten_procedure(a, s.assigned_order), "original path off its order");
  }
  for (const auto& s : rb.sessions) {
    BlockOrders mapped;
    for (const auto& [block_id, order] : s.assigned_order) mapped[to_a[block_id]] = map_ids(order);
    pb[format_assigned_order(mapped)].insert(map_ids(s.visited));
    o.check(s.visited == flatten_procedure(b, s.assigned_order), "imported path off its order");
  }
  o.check(pa == pb, "flattened paths per order differ between original and import");
  std::size_t identical = 0;
  for (const auto& [order, paths] : pa) identical += pb.count(order) != 0 && pb[order] == paths;
  o.note("re-export " + std::to_string(again.size()) + " bytes identical; " +
         std::to_string(identical) + "/" + std::to_string(pa.size()) +
         " orders reproduce the same flattened path");
  return o;
}

// --- 6 -------------------------------------------------------------------------

Outcome export_and_metrics() {
  Outcome o;
  Instance inst;
  json def{{"name", "metrics"},
           {"procedure", json::array({text_page("intro"), task("t", "echo"),
                                      likert_questionnaire("post")})},
           {"backends", json::array({backend("echo", "mock_echo")})},
           {"recruitment", {{"allow_anonymous", true}}}};
  const std::string id = create_deployed(inst, def);

  BehaviorScript script;
  script.task.interactions = {{5, "query", "lisbon trams"},
                              {15, "follow_up", "and on sunday?"},
                              {10, "follow_up", "cheaper options"}};
  script.task.advance_delay_s = 15;  // 5 + 15 + 10 + 15 = 45
  SimOptions opts = sim_options(inst, id, 1);
  opts.concurrency = 1;
  opts.script = script;
  const SimReport r = simulate(opts);
  check_sim(o, r, 1, "scripted session");

  const std::string metrics =
      expect(inst.get("/api/studies/" + id + "/metrics.csv"), 200, "metrics").raw;
  const auto rows = parse_csv(metrics);
  o.check(rows.size() == 2, "metrics has " + std::to_string(rows.size()) + " lines");
  if (rows.size() == 2) {
    o.check(rows[0] == std::vector<std::string>{"study_id", "session_id", "element_id", "time_s",
                                                "followups", "initial_query_chars"},
            "metrics header");
    const std::vector<std::string> got{rows[1][3], rows[1][4], rows[1][5]};
    o.check(rows[1][2] == "t" && got == std::vector<std::string>{"45", "2", "12"},
            "metrics row " + json(rows[1]).dump());
    o.note("metrics row (" + got[0] + ", " + got[1] + ", " + got[2] + ")");
  }
  const std::string csv = expect(inst.get("/api/studies/" + id + "/export.csv"), 200, "export").raw;
  const std::size_t lines = parse_csv(csv).size();
  const std::size_t logged = inst.service->event_count(id);
  o.check(lines == logged + 1, "export has " + std::to_string(lines) + " rows for " +
                                   std::to_string(logged) + " events");
  o.check(r.total_events == logged, "simulator counted " + std::to_string(r.total_events));
  o.note("export.csv rows = 1 + " + std::to_string(logged) + " events");
  return o;
}

// --- 7 -------------------------------------------------------------------------

std::string random_text(std::mt19937_64& rng) {
  static const std::vector<std::string> parts{
      "lisbon", " ", "Kyoto", "\"quoted\"", "a,b", "line\nbreak", "\xc3\xa9t\xc3\xa9", "tab\t", "{}", "\\"};
  std::string s;
  const std::size_t n = rng() % 6;
  for (std::size_t i = 0; i < n; ++i) s += parts[rng() % parts.size()];
  return s;
}

InteractionRequest random_request(std::mt19937_64& rng, std::size_t i) {
  InteractionRequest r;
  r.request_id = "req-" + std::to_string(i);
  r.session_id = "s" + std::to_string(rng() % 100);
  r.element_id = "t";
  r.backend_id = "local";
  r.kind = static_cast<RequestKind>(rng() % 3);
  r.text = random_text(rng);
  const std::size_t turns = rng() % 4;
  for (std::size_t t = 0; t < turns; ++t) {
    r.history.push_back({t % 2 == 0 ? "participant" : "system", random_text(rng)});
  }
  if (r.kind == RequestKind::follow_up && r.history.empty()) r.history.push_back({"participant", "first"});
  r.issued_at = virtual_epoch() + std::chrono::milliseconds(rng() % 100000000);
  return r;
}

// The stub's transformation, applied independently of the connector.
InteractionResponse transform(const InteractionRequest& in) {
  InteractionResponse out;
  out.request_id = in.request_id;
  out.kind = in.history.empty() ? ResponseKind::answer : ResponseKind::results;
  out.answer_text = "[" + std::string(to_string(in.kind)) + "] " + in.text + " #" +
                    std::to_string(in.text.size());
  for (auto t = in.history.rbegin(); t != in.history.rend(); ++t) {
    out.items.push_back({t->role, t->text, "https://example.org/" + t->role});
  }
  out.upstream_meta = json{{"turns", in.history.size()}, {"session", in.session_id}};
  return out;
}

std::string agent_block(const std::string& action, const std::string& input) {
  return "Thinking.\n```\nACTION: " + action + "\nINPUT: " + input + "\n```";
}

json chat_reply(const std::string& content) {
  return {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}},
          {"model", "stub"}};
}

json travel_corpus_file() {
  return json::parse(read_text(source_path("share/bundles/src/travel.corpus.json")));
}

Outcome connector_conformance() {
  Outcome o;
  StubServer stub;
  std::atomic<int> chat_calls{0};
  stub.server.Post("/envelope", [](const httplib::Request& req, httplib::Response& res) {
    try {
      res.set_content(to_json(transform(request_from_json(json::parse(req.body)))).dump(),
                      "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(e.what(), "text/plain");
    }
  });
  stub.server.Post("/never-final", [&](const httplib::Request&, httplib::Response& res) {
    ++chat_calls;
    res.set_content(chat_reply(agent_block("search", "lisbon trams")).dump(), "application/json");
  });
  stub.start();

  // Envelope round trip and echo-through against the loopback stub.
  std::mt19937_64 rng(7);
  BackendConfig local{"local", "Local", "local_http"};
  local.endpoint_url = stub.url("/envelope");
  ConnectorContext ctx{local, nullptr, nullptr, "", virtual_epoch(), {}};
  std::size_t round_trips = 0, echoes = 0;
  const std::size_t kEnvelopes = 200;
  for (std::size_t i = 0; i < kEnvelopes; ++i) {
    const InteractionRequest req = random_request(rng, i);
    const InteractionResponse want = transform(req);
    round_trips += request_from_json(json::parse(to_json(req).dump())) == req &&
                   response_from_json(json::parse(to_json(want).dump())) == want;
    InteractionResponse got = forward_local(req, ctx);
    got.latency_ms = 0;
    echoes += got == want;
  }
  o.check(round_trips == kEnvelopes, std::to_string(round_trips) + " envelope round trips");
  o.check(echoes == kEnvelopes, std::to_string(echoes) + " echo-through matches");

  ServiceOptions live;
  live.offline_models = false;
  Instance inst(live);

  // Echo-through from a participant session.
  {
    json be = backend("local", "local_http");
    be["endpoint_url"] = stub.url("/envelope");
    json def{{"name", "local"},
             {"procedure", json::array({task("t", "local")})},
             {"backends", json::array({be})},
             {"recruitment", {{"allow_anonymous", true}}}};
    const std::string id = create_deployed(inst, def);
    auto joined = expect(inst.post("/api/p/" + id + "/join", json::object(), {}), 201, "join");
    const Headers h{{"X-Session-Token", joined.body["session_token"].get<std::string>()}};
    auto first = expect(inst.post("/api/session/interact", {{"text", "tram 28"}}, h), 200, "interact");
    auto second = expect(
        inst.post("/api/session/interact", {{"kind", "follow_up"}, {"text", "at night"}}, h), 200,
        "interact");
    InteractionRequest expected_req;
    expected_req.request_id = second.body["request_id"];
    expected_req.session_id = joined.body["session_id"];
    expected_req.kind = RequestKind::follow_up;
    expected_req.text = "at night";
    expected_req.history = {{"participant", "tram 28"},
                            {"system", first.body["answer_text"].get<std::string>()}};
    InteractionResponse got = response_from_json(second.body);
    got.latency_ms = 0;
    o.check(got == transform(expected_req), "session echo-through: " + second.raw);
  }

  // Never-finalizing upstream behind the agent loop.
  std::string counts;
  for (int max_steps : {1, 2, 3, 5}) {
    json be = backend("agent", "agentic_loop");
    be["endpoint_url"] = stub.url("/never-final");
    be["agentic_mode"] = true;
    be["max_steps"] = max_steps;
    be["corpus_ref"] = "travel";
    json def{{"name", "agent " + std::to_string(max_steps)},
             {"procedure", json::array({task("t", "agent")})},
             {"backends", json::array({be})},
             {"recruitment", {{"allow_anonymous", true}}}};
    const std::string id = expect(inst.post("/api/studies", def), 201, "create").body["study_id"];
    expect(inst.post("/api/studies/" + id + "/corpus?corpus_id=travel", travel_corpus_file()), 200,
           "corpus");
    expect(inst.post("/api/studies/" + id + "/deploy", json::object()), 200, "deploy");
    auto joined = expect(inst.post("/api/p/" + id + "/join", json::object(), {}), 201, "join");
    const Headers h{{"X-Session-Token", joined.body["session_token"].get<std::string>()}};
    chat_calls = 0;
    auto r = expect(inst.post("/api/session/interact", {{"text", "plan lisbon"}}, h), 200, "interact");
    const InteractionResponse resp = response_from_json(r.body);
    int tool_steps = 0;
    int observed = 0;
    for (const auto& s : resp.trace) {
      tool_steps += std::holds_alternative<ToolCall>(s.action);
      observed += !s.observation.empty();
    }
    const bool forced_final = !resp.trace.empty() &&
                              std::holds_alternative<Finalize>(resp.trace.back().action) &&
                              resp.upstream_meta.value("forced_final", false);
    const std::string tag = "max_steps=" + std::to_string(max_steps);
    o.check(tool_steps == max_steps, tag + ": " + std::to_string(tool_steps) + " tool calls");
    o.check(observed == max_steps, tag + ": " + std::to_string(observed) + " observations");
    o.check(resp.trace.size() == static_cast<std::size_t>(max_steps) + 1, tag + ": trace size");
    o.check(forced_final, tag + ": no forced final answer");
    o.check(chat_calls == max_steps + 1,
            tag + ": upstream called " + std::to_string(chat_calls.load()) + " times");
    counts += " " + std::to_string(max_steps) + "->" + std::to_string(tool_steps) + "+final";
  }
  o.note(std::to_string(echoes) + "/" + std::to_string(kEnvelopes) +
         " envelopes echo through; agent tool calls" + counts);
  return o;
}

// --- 8 -------------------------------------------------------------------------

using EventKey = std::pair<std::string, std::string>;

std::vector<std::vector<EventKey>> procedure_sequences(const std::string& csv) {
  std::map<std::string, std::vector<std::pair<std::uint64_t, EventKey>>> by_participant;
  for (const auto& e : parse_export(csv)) {
    if (e.event.session_id.empty()) continue;
    by_participant[e.external_id].push_back(
        {e.event.seq, {std::string(to_string(e.event.type)), e.event.element_id.value_or("")}});
  }
  std::vector<std::vector<EventKey>> out;
  for (auto& [who, events] : by_participant) {
    std::sort(events.begin(), events.end());
    std::vector<EventKey> seq;
    for (auto& [n, key] : events) seq.push_back(key);
    out.push_back(seq);
  }
  return out;
}

Outcome interchangeability() {
  Outcome o;
  StubServer chat;
  chat.server.Post("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    const auto& messages = body["messages"];
    const bool agent = messages[0]["role"] == "system" &&
                       messages[0]["content"].get<std::string>().find("ACTION:") != std::string::npos;
    std::string content = "Stub answer.";
    if (agent) {
      bool searched = false;
      for (const auto& m : messages) searched = searched || m["role"] == "assistant";
      content = searched ? agent_block("finalize", "Stub plan.") : agent_block("search", "lisbon");
    }
    res.set_content(chat_reply(content).dump(), "application/json");
  });
  chat.start();

  BehaviorScript script;
  script.task.interactions = {{3, "query", "three days in lisbon"}, {4, "follow_up", "food?"}};
  script.task.advance_delay_s = 6;

  std::map<std::string, std::vector<std::vector<EventKey>>> runs;
  std::map<std::string, std::size_t> responses;
  for (const std::string kind : {"mock_echo", "keyword_search", "chat_completion", "agentic_loop"}) {
    ServiceOptions live;
    live.offline_models = false;
    Instance inst(live);
    json def = counterbalanced_definition(2, kind);
    for (auto& be : def["backends"]) {
      be["corpus_ref"] = "travel";
      be["endpoint_url"] = chat.url("/v1/chat/completions");
      be["agentic_mode"] = kind == "agentic_loop";
      be["max_steps"] = 3;
    }
    def["name"] = "interchangeability";
    const std::string id = expect(inst.post("/api/studies", def), 201, "create").body["study_id"];
    expect(inst.post("/api/studies/" + id + "/corpus?corpus_id=travel", travel_corpus_file()), 200,
           "corpus");
    expect(inst.post("/api/studies/" + id + "/deploy", json::object()), 200, "deploy");
    SimOptions opts = sim_options(inst, id, 4);
    opts.concurrency = 1;
    opts.script = script;
    const SimReport r = simulate(opts);
    check_sim(o, r, 4, kind);
    std::size_t errors = 0;
    for (const auto& s : r.sessions) errors += s.connector_errors;
    o.check(errors == 0, kind + ": " + std::to_string(errors) + " connector errors");
    const std::string csv = expect(inst.get("/api/studies/" + id + "/export.csv"), 200, "export").raw;
    runs[kind] = procedure_sequences(csv);
    for (const auto& e : parse_export(csv)) responses[kind] += e.event.type == EventType::response_shown;
  }
  const auto& reference = runs["mock_echo"];
  for (const auto& [kind, seqs] : runs) {
    o.check(seqs == reference, kind + " event sequence differs from mock_echo");
  }
  std::size_t events = 0;
  for (const auto& s : reference) events += s.size();
  o.note("4 kinds x 4 sessions, " + std::to_string(events) +
         " (event_type, element_id) pairs each, identical; responses per kind " +
         std::to_string(responses["mock_echo"]));
  return o;
}

// --- 9 -------------------------------------------------------------------------

Outcome workflow_speed() {
  Outcome o;
  Instance inst;
  const json def = json::parse(read_text(source_path("share/bundles/src/rag-vs-agent.definition.json")));
  const json corpus = travel_corpus_file();

  const auto start = Steady::now();
  const std::string id =
      expect(inst.post("/api/studies", {{"name", def["name"]}, {"description", def["description"]}}),
             201, "create")
          .body["study_id"];
  const std::string path = "/api/studies/" + id;
  expect(inst.put(path, {{"backends", def["backends"]}}), 200, "backends");
  expect(inst.post(path + "/corpus?corpus_id=travel", corpus), 200, "corpus");
  expect(inst.put(path, {{"procedure", def["procedure"]}}), 200, "procedure");
  expect(inst.put(path, {{"recruitment", def["recruitment"]}}), 200, "recruitment");
  expect(inst.post(path + "/deploy", json::object()), 200, "deploy");
  const std::string link = expect(inst.get(path + "/link"), 200, "link").body["link"];
  const double took = seconds_since(start);

  o.check(link == inst.url() + "/p/" + id, "link " + link);
  o.check(took < 5.0, "took " + fmt(took));
  const std::string bundle = expect(inst.get(path + "/bundle"), 200, "bundle").raw;
  o.check(bundle == shipped_bundle(), "API-built study does not export to the shipped bundle");
  auto joined = inst.post("/api/p/" + id + "/join?PROLIFIC_PID=first", json::object(), {});
  o.check(joined.status == 201, "join through the new link failed");
  o.note("create, 2 backends, corpus, procedure, deploy, link in " + fmt(took));
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"counterbalance balance", counterbalance_balance},
      {"race-safe assignment", race_safe_assignment},
      {"state-machine safety fuzz", state_machine_fuzz},
      {"interrupted time-series pauses", interrupted_time_series},
      {"replication bundle", replication_bundle},
      {"export completeness and metrics", export_and_metrics},
      {"connector conformance", connector_conformance},
      {"connector interchangeability", interchangeability},
      {"workflow speed", workflow_speed},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& [name, run] = criteria[i];
    const auto start = Steady::now();
    Outcome o;
    try {
      o = run();
    } catch (const Error& e) {
      o.failures.push_back("error " + e.code() + ": " + e.detail());
    } catch (const std::exception& e) {
      o.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool pass = o.failures.empty();
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " " << i + 1 << " " << name << " ("
              << fmt(seconds_since(start)) << ")";
    for (const auto& n : o.notes) std::cout << " | " << n;
    std::cout << "\n";
    for (std::size_t f = 0; f < o.failures.size() && f < 10; ++f) {
      std::cout << "    " << o.failures[f] << "\n";
    }
    std::cout.flush();
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed")
            << "\n";
  return failed == 0 ? 0 : 1;
}
