#include "studyrig/study.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include "json_fields.hpp"
#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;
using namespace detail;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string_view to_string(CompletionRule r) {
  return r == CompletionRule::manual_next ? "manual_next" : "require_answer";
}

CompletionRule parse_completion_rule(const std::string& s, const std::string& path) {
  if (s == "manual_next") return CompletionRule::manual_next;
  if (s == "require_answer") return CompletionRule::require_answer;
  throw errors::malformed(path + ": unknown completion_rule '" + s + "'");
}

ItemKind parse_item_kind(const std::string& s, const std::string& path) {
  if (s == "likert_1_5") return ItemKind::likert_1_5;
  if (s == "free_text") return ItemKind::free_text;
  if (s == "multiple_choice") return ItemKind::multiple_choice;
  throw errors::malformed(path + ": unknown item kind '" + s + "'");
}

std::vector<std::string> string_list(const json& arr, const std::string& path) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_string()) throw errors::malformed(index_path(path, i) + ": expected string");
    out.push_back(arr[i].get<std::string>());
  }
  return out;
}

QuestionItem item_from_json(const json& j, const std::string& path) {
  require_object(j, path);
  QuestionItem item;
  item.item_id = req_string(j, "item_id", path);
  item.kind = parse_item_kind(req_string(j, "kind", path), field_path(path, "kind"));
  item.statement = string_or(j, "statement", path, "");
  item.choices = string_list(array_or_empty(j, "choices", path), field_path(path, "choices"));
  item.required = bool_or(j, "required", path, true);
  return item;
}

TimePoint time_or_epoch(const json& j, const char* key, const std::string& path) {
  auto s = opt_string(j, key, path);
  if (!s) return TimePoint{};
  auto t = parse_iso8601(*s);
  if (!t) throw errors::malformed(field_path(path, key) + ": expected ISO-8601 UTC timestamp");
  return *t;
}

std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos;
       pos = hay.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

}  // namespace

std::string_view to_string(StudyStatus s) {
  switch (s) {
    case StudyStatus::draft: return "draft";
    case StudyStatus::deployed: return "deployed";
    case StudyStatus::paused: return "paused";
    case StudyStatus::completed: return "completed";
    case StudyStatus::archived: return "archived";
  }
  return "draft";
}

StudyStatus parse_study_status(std::string_view s) {
  for (auto st : {StudyStatus::draft, StudyStatus::deployed, StudyStatus::paused,
                  StudyStatus::completed, StudyStatus::archived}) {
    if (to_string(st) == s) return st;
  }
  throw errors::malformed("status: unknown value '" + std::string(s) + "'");
}

std::string_view to_string(ItemKind k) {
  switch (k) {
    case ItemKind::likert_1_5: return "likert_1_5";
    case ItemKind::free_text: return "free_text";
    case ItemKind::multiple_choice: return "multiple_choice";
  }
  return "free_text";
}

const std::string& element_id(const ProcedureElement& e) {
  return std::visit([](const auto& v) -> const std::string& { return v.id; }, e);
}

std::string_view element_type(const ProcedureElement& e) {
  return std::visit(overloaded{
                        [](const TextPage&) { return std::string_view("text_page"); },
                        [](const Questionnaire&) { return std::string_view("questionnaire"); },
                        [](const Task&) { return std::string_view("task"); },
                        [](const Block&) { return std::string_view("block"); },
                        [](const Pause&) { return std::string_view("pause"); },
                    },
                    e);
}

std::set<std::string> builtin_connector_kinds() {
  return {std::string(connector_kinds::mock_echo), std::string(connector_kinds::keyword_search),
          std::string(connector_kinds::chat_completion),
          std::string(connector_kinds::agentic_loop), std::string(connector_kinds::local_http)};
}

// --- JSON out ---------------------------------------------------------------

json to_json(const QuestionItem& item) {
  json j = {{"item_id", item.item_id},
            {"kind", to_string(item.kind)},
            {"statement", item.statement},
            {"required", item.required}};
  if (item.kind == ItemKind::multiple_choice) j["choices"] = item.choices;
  return j;
}

json to_json(const ProcedureElement& e) {
  json j = std::visit(
      overloaded{
          [](const TextPage& p) {
            return json{{"title", p.title},
                        {"body", p.body},
                        {"require_acknowledge", p.require_acknowledge}};
          },
          [](const Questionnaire& q) {
            json items = json::array();
            for (const auto& it : q.items) items.push_back(to_json(it));
            return json{{"title", q.title},
                        {"items", items},
                        {"external_url", nullable(q.external_url)}};
          },
          [](const Task& t) {
            return json{{"briefing", t.briefing},
                        {"condition_ref", t.condition_ref},
                        {"time_limit_s", nullable(t.time_limit_s)},
                        {"completion_rule", to_string(t.completion_rule)}};
          },
          [](const Block& b) {
            return json{{"children", b.children}, {"counterbalance", b.counterbalance}};
          },
          [](const Pause& p) {
            json mode = std::visit(overloaded{
                                       [](const TimedPause& t) {
                                         return json{{"kind", "timed"},
                                                     {"duration_s", t.duration_s}};
                                       },
                                       [](const ManualApproval&) {
                                         return json{{"kind", "manual_approval"}};
                                       },
                                   },
                                   p.mode);
            return json{{"mode", mode}, {"message", p.message}};
          },
      },
      e);
  j["id"] = element_id(e);
  j["type"] = element_type(e);
  return j;
}

json to_json(const BackendConfig& b) {
  return json{{"backend_id", b.backend_id},
              {"label", b.label},
              {"connector_kind", b.connector_kind},
              {"endpoint_url", nullable(b.endpoint_url)},
              {"credential_ref", nullable(b.credential_ref)},
              {"prompt_template", nullable(b.prompt_template)},
              {"agentic_mode", b.agentic_mode},
              {"max_steps", b.max_steps},
              {"retrieval_top_k", b.retrieval_top_k},
              {"corpus_ref", nullable(b.corpus_ref)},
              {"model", nullable(b.model)},
              {"temperature", b.temperature}};
}

json to_json(const RecruitmentConfig& r) {
  return json{{"id_param_name", r.id_param_name},
              {"completion_redirect_template", nullable(r.completion_redirect_template)},
              {"allow_anonymous", r.allow_anonymous}};
}

json definition_to_json(const Study& s) {
  json procedure = json::array();
  for (const auto& e : s.procedure) procedure.push_back(to_json(e));
  json backends = json::array();
  for (const auto& b : s.backends) backends.push_back(to_json(b));
  return json{{"name", s.name},
              {"description", s.description},
              {"procedure", procedure},
              {"backends", backends},
              {"recruitment", to_json(s.recruitment)},
              {"assignment_seed", nullable(s.assignment_seed)}};
}

json to_json(const Study& s) {
  json j = definition_to_json(s);
  j["study_id"] = s.study_id;
  j["status"] = to_string(s.status);
  j["created_at"] = to_iso8601(s.created_at);
  j["updated_at"] = to_iso8601(s.updated_at);
  j["schema_version"] = s.schema_version;
  return j;
}

json to_json(const Violation& v) {
  return json{{"code", v.code}, {"subject", v.subject}, {"message", v.message}};
}

// --- JSON in ----------------------------------------------------------------

ProcedureElement element_from_json(const json& j, const std::string& path) {
  require_object(j, path);
  const std::string type = req_string(j, "type", path);
  const std::string id = req_string(j, "id", path);
  if (type == "text_page") {
    return TextPage{id, string_or(j, "title", path, ""), string_or(j, "body", path, ""),
                    bool_or(j, "require_acknowledge", path, false)};
  }
  if (type == "questionnaire") {
    Questionnaire q{id, string_or(j, "title", path, ""), {}, opt_string(j, "external_url", path)};
    const json& items = array_or_empty(j, "items", path);
    for (std::size_t i = 0; i < items.size(); ++i) {
      q.items.push_back(item_from_json(items[i], index_path(field_path(path, "items"), i)));
    }
    return q;
  }
  if (type == "task") {
    return Task{id, string_or(j, "briefing", path, ""), req_string(j, "condition_ref", path),
                opt_int(j, "time_limit_s", path),
                parse_completion_rule(string_or(j, "completion_rule", path, "manual_next"),
                                      field_path(path, "completion_rule"))};
  }
  if (type == "block") {
    return Block{id,
                 string_list(req_array(j, "children", path), field_path(path, "children")),
                 bool_or(j, "counterbalance", path, false)};
  }
  if (type == "pause") {
    const json* mode = find_field(j, "mode");
    const std::string mode_path = field_path(path, "mode");
    if (mode == nullptr) throw errors::malformed(mode_path + ": required");
    require_object(*mode, mode_path);
    const std::string kind = req_string(*mode, "kind", mode_path);
    Pause p{id, ManualApproval{}, string_or(j, "message", path, "")};
    if (kind == "timed") {
      auto d = opt_int(*mode, "duration_s", mode_path);
      if (!d) throw errors::malformed(field_path(mode_path, "duration_s") + ": required");
      p.mode = TimedPause{*d};
    } else if (kind != "manual_approval") {
      throw errors::malformed(field_path(mode_path, "kind") + ": unknown pause mode '" + kind +
                              "'");
    }
    return p;
  }
  throw errors::malformed(field_path(path, "type") + ": unknown element type '" + type + "'");
}

BackendConfig backend_from_json(const json& j, const std::string& path) {
  require_object(j, path);
  BackendConfig b;
  b.backend_id = req_string(j, "backend_id", path);
  b.label = string_or(j, "label", path, "");
  b.connector_kind = req_string(j, "connector_kind", path);
  b.endpoint_url = opt_string(j, "endpoint_url", path);
  b.credential_ref = opt_string(j, "credential_ref", path);
  b.prompt_template = opt_string(j, "prompt_template", path);
  b.agentic_mode = bool_or(j, "agentic_mode", path, false);
  b.max_steps = opt_int(j, "max_steps", path).value_or(5);
  b.retrieval_top_k = opt_int(j, "retrieval_top_k", path).value_or(3);
  b.corpus_ref = opt_string(j, "corpus_ref", path);
  b.model = opt_string(j, "model", path);
  b.temperature = opt_number(j, "temperature", path).value_or(0.0);
  return b;
}

RecruitmentConfig recruitment_from_json(const json& j, const std::string& path) {
  require_object(j, path);
  RecruitmentConfig r;
  r.id_param_name = string_or(j, "id_param_name", path, "PROLIFIC_PID");
  r.completion_redirect_template = opt_string(j, "completion_redirect_template", path);
  r.allow_anonymous = bool_or(j, "allow_anonymous", path, false);
  return r;
}

void apply_definition(Study& study, const json& def) {
  require_object(def, "");
  if (auto name = opt_string(def, "name", "")) study.name = *name;
  if (auto desc = opt_string(def, "description", "")) study.description = *desc;
  if (def.contains("procedure")) {
    const json& arr = req_array(def, "procedure", "");
    std::vector<ProcedureElement> procedure;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      procedure.push_back(element_from_json(arr[i], index_path("procedure", i)));
    }
    study.procedure = std::move(procedure);
  }
  if (def.contains("backends")) {
    const json& arr = req_array(def, "backends", "");
    std::vector<BackendConfig> backends;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      backends.push_back(backend_from_json(arr[i], index_path("backends", i)));
    }
    study.backends = std::move(backends);
  }
  if (const json* r = find_field(def, "recruitment")) {
    study.recruitment = recruitment_from_json(*r, "recruitment");
  }
  if (def.contains("assignment_seed")) {
    const json& seed = def["assignment_seed"];
    if (seed.is_null()) {
      study.assignment_seed.reset();
    } else if (seed.is_number_unsigned() ||
               (seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
      study.assignment_seed = seed.get<std::uint64_t>();
    } else {
      throw errors::malformed("assignment_seed: expected non-negative integer");
    }
  }
  if (study.name.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw errors::validation("name must not be empty");
  }
}

Study study_from_json(const json& j) {
  require_object(j, "");
  Study s;
  s.study_id = req_string(j, "study_id", "");
  s.name = req_string(j, "name", "");
  apply_definition(s, j);
  s.status = parse_study_status(string_or(j, "status", "", "draft"));
  s.created_at = time_or_epoch(j, "created_at", "");
  s.updated_at = time_or_epoch(j, "updated_at", "");
  s.schema_version = static_cast<int>(opt_int(j, "schema_version", "").value_or(kSchemaVersion));
  return s;
}

// --- Operations -------------------------------------------------------------

Study create_study(std::string_view name, TimePoint now) {
  const auto first = name.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) throw errors::validation("name must not be empty");
  const auto last = name.find_last_not_of(" \t\r\n");
  Study s;
  s.study_id = new_id();
  s.name = std::string(name.substr(first, last - first + 1));
  s.created_at = now;
  s.updated_at = now;
  return s;
}

std::vector<Violation> validate_study(const Study& study) {
  return validate_study(study, ValidationContext{});
}

std::vector<Violation> validate_study(const Study& study, const ValidationContext& ctx) {
  std::vector<Violation> out;
  auto add = [&out](std::string code, std::string subject, std::string message) {
    out.push_back({std::move(code), std::move(subject), std::move(message)});
  };

  if (study.name.find_first_not_of(" \t\r\n") == std::string::npos) {
    add("empty_name", "", "study name is empty");
  }
  if (study.procedure.empty()) add("empty_procedure", "", "procedure has no elements");

  std::unordered_map<std::string, const ProcedureElement*> elements;
  for (const auto& e : study.procedure) {
    const auto& id = element_id(e);
    if (id.empty()) {
      add("missing_id", "", std::string(element_type(e)) + " element has an empty id");
      continue;
    }
    if (!elements.emplace(id, &e).second) add("duplicate_id", id, "duplicate element id");
  }

  std::unordered_set<std::string> backend_ids;
  for (const auto& b : study.backends) {
    if (b.backend_id.empty()) {
      add("missing_id", "", "backend has an empty backend_id");
    } else if (!backend_ids.insert(b.backend_id).second) {
      add("duplicate_id", b.backend_id, "duplicate backend id");
    }
    if (ctx.connector_kinds.count(b.connector_kind) == 0) {
      add("unknown_connector_kind", b.backend_id,
          "unknown connector kind '" + b.connector_kind + "'");
    }
    if (b.agentic_mode && b.connector_kind != connector_kinds::chat_completion &&
        b.connector_kind != connector_kinds::agentic_loop) {
      add("agentic_mode_unsupported", b.backend_id,
          "agentic_mode requires connector kind chat_completion or agentic_loop");
    }
    if (b.connector_kind == connector_kinds::local_http &&
        (!b.endpoint_url || b.endpoint_url->empty())) {
      add("missing_endpoint", b.backend_id, "local_http connector needs endpoint_url");
    }
    if (b.max_steps < 1) add("invalid_max_steps", b.backend_id, "max_steps must be >= 1");
    if (b.retrieval_top_k < 1) {
      add("invalid_retrieval_top_k", b.backend_id, "retrieval_top_k must be >= 1");
    }
    if (b.corpus_ref && ctx.corpus_ids && ctx.corpus_ids->count(*b.corpus_ref) == 0) {
      add("missing_corpus", b.backend_id, "corpus '" + *b.corpus_ref + "' has not been uploaded");
    }
  }

  std::unordered_map<std::string, std::string> owner;  // child -> block
  for (const auto& e : study.procedure) {
    std::visit(
        overloaded{
            [&](const Task& t) {
              if (backend_ids.count(t.condition_ref) == 0) {
                add("dangling_condition_ref", t.id,
                    "dangling condition_ref '" + t.condition_ref + "'");
              }
              if (t.time_limit_s && *t.time_limit_s <= 0) {
                add("invalid_time_limit", t.id, "time_limit_s must be positive");
              }
            },
            [&](const Block& b) {
              for (const auto& child : b.children) {
                auto it = elements.find(child);
                if (it == elements.end()) {
                  add("dangling_block_child", b.id, "block child '" + child + "' does not exist");
                  continue;
                }
                if (std::holds_alternative<Block>(*it->second)) {
                  add("nested_block", b.id, "block child '" + child + "' is itself a block");
                } else if (std::holds_alternative<Pause>(*it->second)) {
                  add("pause_in_block", b.id, "block child '" + child + "' is a pause");
                }
                auto [pos, fresh] = owner.emplace(child, b.id);
                if (!fresh) {
                  add("shared_block_child", b.id,
                      "element '" + child + "' already belongs to block '" + pos->second + "'");
                }
              }
              if (b.counterbalance && b.children.size() < 2) {
                add("counterbalance_too_few_children", b.id,
                    "counterbalanced block needs ≥2 children");
              }
              if (b.children.empty()) add("empty_block", b.id, "block has no children");
            },
            [&](const Pause& p) {
              if (const auto* timed = std::get_if<TimedPause>(&p.mode);
                  timed && timed->duration_s <= 0) {
                add("invalid_pause_duration", p.id, "timed pause duration_s must be > 0");
              }
            },
            [&](const Questionnaire& q) {
              if (q.items.empty() && !q.external_url) {
                add("empty_questionnaire", q.id, "questionnaire has no items and no external_url");
              }
              std::unordered_set<std::string> item_ids;
              for (const auto& item : q.items) {
                if (!item_ids.insert(item.item_id).second) {
                  add("duplicate_item_id", q.id, "duplicate item id '" + item.item_id + "'");
                }
                if (item.kind == ItemKind::multiple_choice && item.choices.empty()) {
                  add("missing_choices", q.id,
                      "multiple_choice item '" + item.item_id + "' has no choices");
                }
              }
            },
            [](const TextPage&) {},
        },
        e);
  }

  const auto& r = study.recruitment;
  if (r.id_param_name.empty()) add("invalid_id_param", "", "id_param_name is empty");
  if (r.completion_redirect_template &&
      count_occurrences(*r.completion_redirect_template, "{code}") != 1) {
    add("invalid_redirect_template", "",
        "completion_redirect_template must contain exactly one {code}");
  }
  return out;
}

Study remap_ids(const Study& study, const IdMinter& mint) {
  std::unordered_map<std::string, std::string> element_map;
  std::unordered_map<std::string, std::string> backend_map;
  for (std::size_t i = 0; i < study.procedure.size(); ++i) {
    element_map.emplace(element_id(study.procedure[i]), mint(IdRole::element, i));
  }
  for (std::size_t i = 0; i < study.backends.size(); ++i) {
    backend_map.emplace(study.backends[i].backend_id, mint(IdRole::backend, i));
  }
  auto lookup = [](const auto& map, const std::string& id) {
    auto it = map.find(id);
    return it == map.end() ? id : it->second;
  };

  Study out = study;
  // A repeated source id keeps the mapping of its first occurrence.
  for (auto& element : out.procedure) {
    std::visit(
        [&](auto& v) {
          using T = std::decay_t<decltype(v)>;
          v.id = lookup(element_map, v.id);
          if constexpr (std::is_same_v<T, Task>) {
            v.condition_ref = lookup(backend_map, v.condition_ref);
          } else if constexpr (std::is_same_v<T, Block>) {
            for (auto& c : v.children) c = lookup(element_map, c);
          }
        },
        element);
  }
  for (std::size_t i = 0; i < out.backends.size(); ++i) {
    out.backends[i].backend_id = lookup(backend_map, study.backends[i].backend_id);
  }
  return out;
}

Study duplicate_definition(const Study& source, std::string_view new_name, TimePoint now) {
  Study copy = remap_ids(source, [](IdRole, std::size_t) { return new_id(); });
  copy.study_id = new_id();
  if (new_name.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    throw errors::validation("name must not be empty");
  }
  copy.name = std::string(new_name);
  copy.status = StudyStatus::draft;
  copy.created_at = now;
  copy.updated_at = now;
  return copy;
}

std::vector<std::string> flatten_procedure(const Study& study, const BlockOrders& orders) {
  std::unordered_set<std::string> owned;
  for (const auto& e : study.procedure) {
    if (const auto* b = std::get_if<Block>(&e)) owned.insert(b->children.begin(), b->children.end());
  }
  std::vector<std::string> path;
  for (const auto& e : study.procedure) {
    const auto* b = std::get_if<Block>(&e);
    if (b == nullptr) {
      if (owned.count(element_id(e)) == 0) path.push_back(element_id(e));
      continue;
    }
    if (!b->counterbalance) {
      path.insert(path.end(), b->children.begin(), b->children.end());
      continue;
    }
    auto it = orders.find(b->id);
    if (it == orders.end()) {
      throw Error("invalid_order", "no order given for counterbalanced block '" + b->id + "'",
                  422);
    }
    if (!std::is_permutation(it->second.begin(), it->second.end(), b->children.begin(),
                             b->children.end())) {
      throw Error("invalid_order",
                  "order for block '" + b->id + "' is not a permutation of its children", 422);
    }
    path.insert(path.end(), it->second.begin(), it->second.end());
  }
  return path;
}

const ProcedureElement* find_element(const Study& study, std::string_view id) {
  for (const auto& e : study.procedure) {
    if (element_id(e) == id) return &e;
  }
  return nullptr;
}

const BackendConfig* find_backend(const Study& study, std::string_view id) {
  for (const auto& b : study.backends) {
    if (b.backend_id == id) return &b;
  }
  return nullptr;
}

std::vector<const Block*> counterbalanced_blocks(const Study& study) {
  std::vector<const Block*> out;
  for (const auto& e : study.procedure) {
    if (const auto* b = std::get_if<Block>(&e); b && b->counterbalance) out.push_back(b);
  }
  return out;
}

void check_status_transition(StudyStatus from, StudyStatus to) {
  using S = StudyStatus;
  const bool ok = (from == S::draft && to == S::deployed) ||
                  (from == S::deployed && to == S::paused) ||
                  (from == S::paused && to == S::deployed) ||
                  ((from == S::deployed || from == S::paused) && to == S::completed) ||
                  (from != S::archived && to == S::archived);
  if (!ok) {
    throw errors::conflict("invalid_transition", "cannot move study from " +
                                                     std::string(to_string(from)) + " to " +
                                                     std::string(to_string(to)));
  }
}

}  // namespace studyrig
