#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "studyrig/bundle.hpp"
#include "studyrig/ids.hpp"
#include "studyrig/service.hpp"
#include "studyrig/sim.hpp"
#include "support.hpp"
#include "stub_server.hpp"

using namespace studyrig;
using namespace testsupport;
using namespace std::chrono_literals;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("studyrig-test-" + new_id());
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string deploy(StudyService& svc, json def) {
  const std::string id = svc.create_study(def)["study_id"];
  svc.deploy_study(id);
  return id;
}

std::size_t csv_lines(const std::string& csv) {
  return static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
}

json single_task_definition(const json& be, const std::string& rule = "manual_next") {
  return {{"name", "single task"},
          {"procedure", json::array({task("t", be["backend_id"], rule), text_page("end")})},
          {"backends", json::array({be})},
          {"recruitment", {{"allow_anonymous", true}}}};
}

}  // namespace

TEST_CASE("create, update, deploy, and the draft-only rules") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  json def = counterbalanced_definition(2);
  const std::string id = svc.create_study(json{{"name", "empty"}})["study_id"];
  CHECK(svc.get_study(id)["violations"].size() >= 1);
  try {
    svc.deploy_study(id);
    FAIL("expected validation_failed");
  } catch (const Error& e) {
    CHECK(e.code() == "validation_failed");
    CHECK(e.http_status() == 422);
    CHECK(e.extra()["violations"].size() >= 1);
  }
  svc.update_study(id, def);
  const json deployed = svc.deploy_study(id);
  CHECK(deployed["status"] == "deployed");
  CHECK(deployed["link"] == "http://127.0.0.1:8080/p/" + id);
  CHECK(svc.study_link(id) == "http://127.0.0.1:8080/p/" + id);
  CHECK(error_code_of([&] { svc.update_study(id, def); }) == "study_not_draft");
  CHECK(error_code_of([&] { svc.upload_corpus(id, json::array(), std::string("c")); }) ==
        "study_not_draft");
  CHECK(error_code_of([&] { svc.get_study("nope"); }) == "not_found");
  CHECK(svc.list_studies().size() == 1);
}

TEST_CASE("duplicate copies corpora and yields a fresh draft") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  json def = single_task_definition(json{{"backend_id", "be"},
                                         {"connector_kind", "keyword_search"},
                                         {"corpus_ref", "docs"}});
  const std::string id = svc.create_study(def)["study_id"];
  svc.upload_corpus(id, json::array({{{"doc_id", "d"}, {"title", "Doc"}, {"body", "hello"}}}),
                    std::string("docs"));
  svc.deploy_study(id);
  const json dup = svc.duplicate_study(id, "");
  CHECK(dup["name"] == "single task (copy)");
  CHECK(dup["status"] == "draft");
  CHECK(dup["violations"].empty());
  CHECK(dup["study_id"] != id);
}

TEST_CASE("join assigns counterbalanced orders and resumes by external id") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  const std::string id = deploy(svc, counterbalanced_definition(2));
  std::map<std::string, int> orders;
  for (int i = 0; i < 8; ++i) {
    const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "p" + std::to_string(i)}});
    CHECK_FALSE(j.resumed);
    const auto snap = svc.session_snapshot(j.session_id);
    REQUIRE(snap);
    ++orders[json(snap->assignment.orders.at("conditions")).dump()];
  }
  CHECK(orders.size() == 2);
  for (const auto& [o, n] : orders) CHECK(n == 4);

  const JoinResult again = svc.join(id, {{"PROLIFIC_PID", "p3"}});
  CHECK(again.resumed);
  CHECK(svc.monitor(id)["total"] == 8);

  const JoinResult anon = svc.join(id, {});
  CHECK(svc.session_snapshot(anon.session_id)->external_id.rfind("anon-", 0) == 0);
}

TEST_CASE("joins are refused for non-deployed and archived studies") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  json def = counterbalanced_definition(2);
  def["recruitment"]["allow_anonymous"] = false;
  const std::string draft = svc.create_study(def)["study_id"];
  CHECK(error_code_of([&] { svc.join(draft, {{"PROLIFIC_PID", "x"}}); }) == "not_deployed");
  const std::string id = deploy(svc, def);
  CHECK(error_code_of([&] { svc.join(id, {}); }) == "missing_external_id");
  svc.join(id, {{"PROLIFIC_PID", "x"}});
  svc.set_study_status(id, StudyStatus::paused);
  CHECK(error_code_of([&] { svc.join(id, {{"PROLIFIC_PID", "y"}}); }) == "not_deployed");
  CHECK(svc.join(id, {{"PROLIFIC_PID", "x"}}).resumed);
  svc.set_study_status(id, StudyStatus::archived);
  CHECK(error_code_of([&] { svc.join(id, {{"PROLIFIC_PID", "x"}}); }) == "study_archived");
}

TEST_CASE("scripted session yields metrics (45, 2, 12) and one CSV row per event") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  const std::string id = deploy(svc, single_task_definition(backend("be", "mock_echo")));
  const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "p1"}});
  clock.advance(5s);
  const json r1 = svc.interact(j.session_token, {{"kind", "query"}, {"text", "abcdefghijkl"}, {"request_id", "q1"}});
  CHECK(r1["answer_text"] == "echo: abcdefghijkl");
  clock.advance(10s);
  svc.interact(j.session_token, {{"kind", "follow_up"}, {"text", "and then?"}, {"request_id", "q2"}});
  clock.advance(10s);
  svc.interact(j.session_token, {{"kind", "follow_up"}, {"text", "more"}, {"request_id", "q3"}});
  // Replaying a request id returns the cached reply and logs nothing.
  const std::size_t before = svc.event_count(id);
  CHECK(svc.interact(j.session_token, {{"kind", "query"}, {"text", "abcdefghijkl"}, {"request_id", "q1"}}) == r1);
  CHECK(svc.event_count(id) == before);
  clock.advance(20s);
  svc.advance(j.session_token, {{"element_id", "t"}});
  CHECK(svc.metrics_csv(id) == std::string(kMetricsHeader) + "\n" + id + "," + j.session_id + ",t,45,2,12\n");
  const std::string csv = svc.export_csv(id);
  CHECK(csv_lines(csv) == 1 + svc.event_count(id));
  CHECK(parse_csv(csv).size() == 1 + svc.event_count(id));
  // element_shown, query, response, 2 x (follow-up, response), advance, element_shown
  CHECK(svc.event_count(id) == 9);
}

TEST_CASE("follow-ups need a prior turn; interactions only on tasks") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  json def = single_task_definition(backend("be", "mock_echo"));
  def["procedure"] = json::array({text_page("intro"), task("t", "be"), text_page("end")});
  const std::string id = deploy(svc, def);
  const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "p"}});
  CHECK(error_code_of([&] { svc.interact(j.session_token, {{"text", "hi"}}); }) == "not_a_task");
  svc.advance(j.session_token, json::object());
  CHECK(error_code_of([&] { svc.interact(j.session_token, {{"kind", "follow_up"}, {"text", "hi"}}); }) ==
        "validation_error");
  CHECK(error_code_of([&] { svc.interact(j.session_token, {{"text", "   "}}); }) == "validation_error");
  CHECK(error_code_of([&] { svc.interact(j.session_token, {{"text", "hi"}, {"element_id", "intro"}}); }) ==
        "element_mismatch");
  CHECK(error_code_of([&] { svc.current_element("bogus-token"); }) == "unauthorized");
}

TEST_CASE("upstream HTTP 500 logs connector_error and the session stays usable") {
  StubServer upstream;
  int calls = 0;
  upstream.server.Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
    res.set_content("{}", "application/json");
  });
  upstream.start();

  VirtualClock clock(virtual_epoch());
  ServiceOptions opts;
  opts.resolve_secret = [](std::string_view) { return std::optional<std::string>("sk-sentinel-9d1e"); };
  StudyService svc(clock, std::make_unique<MemoryStore>(), opts);
  json be{{"backend_id", "be"}, {"connector_kind", "chat_completion"}, {"endpoint_url", upstream.url("/chat")},
          {"credential_ref", "UPSTREAM_KEY"}};
  const std::string id = deploy(svc, single_task_definition(be));
  const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "p"}});
  try {
    svc.interact(j.session_token, {{"text", "hello"}, {"request_id", "r1"}});
    FAIL("expected connector_error");
  } catch (const Error& e) {
    CHECK(e.code() == "connector_error");
    CHECK(e.http_status() == 502);
    CHECK(e.extra()["retryable"] == true);
  }
  CHECK(calls == 1);
  const auto snap = svc.session_snapshot(j.session_id);
  CHECK(snap->status == SessionStatus::active);
  CHECK((snap->transcripts.count("t") == 0 || snap->transcripts.at("t").empty()));
  const std::string csv = svc.export_csv(id);
  CHECK(csv.find("connector_error") != std::string::npos);
  // Not busy afterwards: the next request reaches the upstream again.
  CHECK(error_code_of([&] { svc.interact(j.session_token, {{"text", "again"}}); }) == "connector_error");
  CHECK(calls == 2);
  CHECK_NOTHROW(svc.advance(j.session_token, json::object()));

  // The resolved secret never shows up in any export.
  for (const std::string& text : {csv, svc.export_csv(id), svc.export_bundle(id), svc.get_study(id).dump(),
                                  svc.monitor(id).dump(), svc.current_element(j.session_token).dump()}) {
    CHECK(text.find("sk-sentinel-9d1e") == std::string::npos);
  }
}

TEST_CASE("offline models answer chat-backed conditions without a network") {
  VirtualClock clock(virtual_epoch());
  ServiceOptions opts;
  opts.offline_models = true;
  StudyService svc(clock, std::make_unique<MemoryStore>(), opts);
  json be{{"backend_id", "be"}, {"connector_kind", "chat_completion"}, {"agentic_mode", true},
          {"endpoint_url", "http://127.0.0.1:1/never"}, {"max_steps", 3}};
  const std::string id = deploy(svc, single_task_definition(be));
  const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "p"}});
  const json r = svc.interact(j.session_token, {{"text", "plan a trip"}});
  CHECK(r["kind"] == "agent_trace");
  CHECK(r["trace"].size() == 2);
}

TEST_CASE("respond is idempotent per request id and completion redirects") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  json def{{"name", "q"},
           {"procedure", json::array({likert_questionnaire("q")})},
           {"recruitment",
            {{"allow_anonymous", true},
             {"completion_redirect_template", "https://example.org/done?cc={code}"}}}};
  const std::string id = deploy(svc, def);
  const JoinResult j = svc.join(id, {});
  CHECK(error_code_of([&] { svc.complete(j.session_token); }) == "not_completed");
  const json body{{"element_id", "q"}, {"answers", {{"satisfaction", 4}}}, {"request_id", "r1"}};
  svc.respond(j.session_token, body);
  const std::size_t n = svc.event_count(id);
  svc.respond(j.session_token, body);
  CHECK(svc.event_count(id) == n);
  const json done = svc.advance(j.session_token, {{"element_id", "q"}, {"request_id", "a1"}});
  REQUIRE(done.contains("completion_code"));
  CHECK(svc.advance(j.session_token, {{"element_id", "q"}, {"request_id", "a1"}}) == done);
  const CompletionTarget t = svc.complete(j.session_token);
  CHECK(t.code == done["completion_code"]);
  CHECK(t.redirect_url == "https://example.org/done?cc=" + t.code);
}

TEST_CASE("manual approval via the service and abandonment") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  json def{{"name", "gate"},
           {"procedure", json::array({manual_pause("gate"), text_page("after")})},
           {"recruitment", {{"allow_anonymous", true}}}};
  const std::string id = deploy(svc, def);
  const JoinResult j = svc.join(id, {});
  CHECK(svc.monitor(id)["awaiting_approval"].size() == 1);
  CHECK(error_code_of([&] { svc.advance(j.session_token, json::object()); }) == "awaiting_approval");
  CHECK(error_code_of([&] { svc.mark_abandoned(j.session_id, 1); }) == "not_active");
  svc.approve_resume(j.session_id, "dr-x");
  CHECK(svc.monitor(id)["awaiting_approval"].empty());
  svc.advance(j.session_token, json::object());
  clock.advance(3600s);
  svc.mark_abandoned(j.session_id, 1800);
  CHECK(svc.session_snapshot(j.session_id)->status == SessionStatus::abandoned);
  CHECK(svc.monitor(id)["by_status"]["abandoned"] == 1);
}

TEST_CASE("only a logged participant action reactivates an abandoned session") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  const std::string id = deploy(svc, counterbalanced_definition(2));
  const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "idle"}});
  svc.respond(j.session_token, {{"element_id", "intro"}, {"acknowledge", true}});
  clock.advance(3600s);
  svc.mark_abandoned(j.session_id, 60);
  // Repeating the acknowledgement logs nothing.
  svc.respond(j.session_token, {{"element_id", "intro"}, {"acknowledge", true}});
  CHECK(svc.session_snapshot(j.session_id)->status == SessionStatus::abandoned);
  svc.advance(j.session_token, {{"element_id", "intro"}});
  CHECK(svc.session_snapshot(j.session_id)->status == SessionStatus::active);
  std::vector<LogEvent> events;
  for (auto& e : parse_export(svc.export_csv(id))) events.push_back(e.event);
  const FoldedSession f = fold_session(events);
  CHECK(f.status == "active");
  CHECK(f.cursor == 1);
}

TEST_CASE("split routes stably and logs the decision") {
  VirtualClock clock(virtual_epoch());
  StudyService svc(clock, std::make_unique<MemoryStore>());
  const std::string a = deploy(svc, counterbalanced_definition(2));
  const std::string b = deploy(svc, counterbalanced_definition(2));
  const json r1 = svc.split({a, b}, "worker-17");
  const json r2 = svc.split({a, b}, "worker-17");
  CHECK(r1["study_id"] == r2["study_id"]);
  CHECK(r1["link"] == "http://127.0.0.1:8080/p/" + r1["study_id"].get<std::string>());
  const std::string chosen = r1["study_id"];
  const std::string csv = svc.export_csv(chosen);
  CHECK(csv.find("routing_decision") != std::string::npos);
  CHECK(csv_lines(csv) == 1 + svc.event_count(chosen));
  CHECK(error_code_of([&] { svc.split({a, "missing"}, "w"); }) == "not_found");
}

TEST_CASE("bundle import creates a fresh draft that re-exports byte-identically") {
  VirtualClock clock(virtual_epoch());
  StudyService one(clock, std::make_unique<MemoryStore>());
  const std::string id = one.import_bundle(shipped_bundle())["study_id"];
  const std::string exported = one.export_bundle(id);
  CHECK(exported == shipped_bundle());

  StudyService two(clock, std::make_unique<MemoryStore>());
  const json imported = two.import_bundle(exported);
  CHECK(imported["status"] == "draft");
  CHECK(imported["study_id"] != id);
  CHECK(imported["violations"].empty());
  CHECK(two.export_bundle(imported["study_id"]) == exported);
  CHECK(error_code_of([&] { two.import_bundle(exported.substr(0, exported.size() - 2)); }) != "");
}

TEST_CASE("journal store survives restarts and torn tails") {
  TempDir dir;
  VirtualClock clock(virtual_epoch());
  std::string id, token, session_id, csv_before;
  {
    StudyService svc(clock, std::make_unique<JournalStore>(dir.path, false));
    id = deploy(svc, counterbalanced_definition(2));
    const JoinResult j = svc.join(id, {{"PROLIFIC_PID", "p1"}});
    token = j.session_token;
    session_id = j.session_id;
    svc.respond(token, {{"element_id", "intro"}, {"acknowledge", true}});
    svc.advance(token, json::object());
    svc.join(id, {{"PROLIFIC_PID", "p2"}});
    csv_before = svc.export_csv(id);
  }
  // Simulate a crash mid-write.
  {
    std::ofstream out(dir.path / "journal.jsonl", std::ios::app | std::ios::binary);
    out << "{\"records\":[{\"type\":\"sess";
  }
  {
    StudyService svc(clock, std::make_unique<JournalStore>(dir.path, false));
    CHECK(svc.export_csv(id) == csv_before);
    CHECK(svc.current_element(token)["cursor"] == 1);
    // Order plans continue where they left off: the third arrival gets row 0 again.
    const JoinResult j3 = svc.join(id, {{"PROLIFIC_PID", "p3"}});
    const auto s1 = svc.session_snapshot(session_id);
    const auto s3 = svc.session_snapshot(j3.session_id);
    CHECK(s1->assignment.orders == s3->assignment.orders);
    CHECK(svc.join(id, {{"PROLIFIC_PID", "p1"}}).resumed);
    svc.advance(token, json::object());
  }
  {
    StudyService svc(clock, std::make_unique<JournalStore>(dir.path, false));
    CHECK(svc.current_element(token)["cursor"] == 2);
    CHECK(svc.monitor(id)["total"] == 3);
  }
}

TEST_CASE("a corrupt journal line in the middle is an error") {
  TempDir dir;
  {
    JournalStore store(dir.path, false);
    store.commit({json{{"type", "x"}}});
  }
  {
    std::ofstream out(dir.path / "journal.jsonl", std::ios::app | std::ios::binary);
    out << "garbage\n" << "{\"records\":[]}\n";
  }
  CHECK(error_code_of([&] {
          JournalStore store(dir.path, false);
          store.load();
        }) == "storage_error");
}

TEST_CASE("journal commits are batches") {
  TempDir dir;
  {
    JournalStore store(dir.path, false);
    store.commit({json{{"n", 1}}, json{{"n", 2}}});
    store.commit({json{{"n", 3}}});
  }
  JournalStore store(dir.path, false);
  const auto records = store.load();
  REQUIRE(records.size() == 3);
  CHECK(records[2]["n"] == 3);
  MemoryStore mem;
  mem.commit({json{{"a", 1}}});
  CHECK(mem.load().size() == 1);
}
