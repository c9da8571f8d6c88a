#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "studyrig/error.hpp"

namespace testsupport {

using nlohmann::json;

// Code of the studyrig::Error thrown by f, or "" when nothing is thrown.
template <class F>
std::string error_code_of(F&& f) {
  try {
    f();
  } catch (const studyrig::Error& e) {
    return e.code();
  }
  return "";
}

inline std::string source_path(const std::string& rel) {
  return std::string(STUDYRIG_SOURCE_DIR) + "/" + rel;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string shipped_bundle() {
  return read_text(source_path("share/bundles/rag-vs-agent.uxbundle.json"));
}

inline json text_page(const std::string& id, bool ack = false) {
  return {{"type", "text_page"}, {"id", id}, {"title", id}, {"body", "Body of " + id},
          {"require_acknowledge", ack}};
}

inline json task(const std::string& id, const std::string& backend,
                 const std::string& rule = "manual_next") {
  return {{"type", "task"}, {"id", id}, {"briefing", "Do " + id}, {"condition_ref", backend},
          {"completion_rule", rule}};
}

inline json block(const std::string& id, json children, bool counterbalance) {
  return {{"type", "block"}, {"id", id}, {"children", std::move(children)},
          {"counterbalance", counterbalance}};
}

inline json likert_questionnaire(const std::string& id) {
  return {{"type", "questionnaire"},
          {"id", id},
          {"title", id},
          {"items",
           {{{"item_id", "satisfaction"}, {"kind", "likert_1_5"}, {"statement", "Satisfied."}},
            {{"item_id", "notes"}, {"kind", "free_text"}, {"required", false}}}}};
}

inline json timed_pause(const std::string& id, long long seconds) {
  return {{"type", "pause"}, {"id", id}, {"mode", {{"kind", "timed"}, {"duration_s", seconds}}},
          {"message", "Come back later."}};
}

inline json manual_pause(const std::string& id) {
  return {{"type", "pause"}, {"id", id}, {"mode", {{"kind", "manual_approval"}}},
          {"message", "Wait for the experimenter."}};
}

inline json backend(const std::string& id, const std::string& kind) {
  return {{"backend_id", id}, {"label", id}, {"connector_kind", kind}};
}

// intro -> counterbalanced [t_a, t_b] -> questionnaire, with k conditions.
inline json counterbalanced_definition(int k, const std::string& kind = "mock_echo") {
  json procedure = json::array({text_page("intro", true)});
  json children = json::array();
  json backends = json::array();
  for (int i = 0; i < k; ++i) {
    const std::string c(1, static_cast<char>('a' + i));
    backends.push_back(backend("cond_" + c, kind));
    children.push_back("t_" + c);
  }
  procedure.push_back(block("conditions", children, true));
  for (int i = 0; i < k; ++i) {
    const std::string c(1, static_cast<char>('a' + i));
    procedure.push_back(task("t_" + c, "cond_" + c));
  }
  procedure.push_back(likert_questionnaire("post"));
  return {{"name", "k=" + std::to_string(k) + " study"},
          {"procedure", procedure},
          {"backends", backends},
          {"recruitment", {{"id_param_name", "PROLIFIC_PID"}, {"allow_anonymous", true}}}};
}

}  // namespace testsupport
