#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "studyrig/clock.hpp"

namespace studyrig {

inline constexpr int kSchemaVersion = 1;

enum class StudyStatus { draft, deployed, paused, completed, archived };

std::string_view to_string(StudyStatus s);
StudyStatus parse_study_status(std::string_view s);

enum class ItemKind { likert_1_5, free_text, multiple_choice };

std::string_view to_string(ItemKind k);

struct QuestionItem {
  std::string item_id;
  ItemKind kind = ItemKind::likert_1_5;
  std::string statement;
  std::vector<std::string> choices;  // multiple_choice only
  bool required = true;

  bool operator==(const QuestionItem&) const = default;
};

struct TextPage {
  std::string id;
  std::string title;
  std::string body;
  bool require_acknowledge = false;

  bool operator==(const TextPage&) const = default;
};

struct Questionnaire {
  std::string id;
  std::string title;
  std::vector<QuestionItem> items;
  std::optional<std::string> external_url;

  bool operator==(const Questionnaire&) const = default;
};

enum class CompletionRule { manual_next, require_answer };

struct Task {
  std::string id;
  std::string briefing;
  std::string condition_ref;
  std::optional<std::int64_t> time_limit_s;
  CompletionRule completion_rule = CompletionRule::manual_next;

  bool operator==(const Task&) const = default;
};

struct Block {
  std::string id;
  std::vector<std::string> children;
  bool counterbalance = false;

  bool operator==(const Block&) const = default;
};

struct TimedPause {
  std::int64_t duration_s = 0;
  bool operator==(const TimedPause&) const = default;
};

struct ManualApproval {
  bool operator==(const ManualApproval&) const = default;
};

struct Pause {
  std::string id;
  std::variant<TimedPause, ManualApproval> mode;
  std::string message;

  bool operator==(const Pause&) const = default;
};

using ProcedureElement = std::variant<TextPage, Questionnaire, Task, Block, Pause>;

const std::string& element_id(const ProcedureElement& e);
std::string_view element_type(const ProcedureElement& e);

namespace connector_kinds {
inline constexpr std::string_view mock_echo = "mock_echo";
inline constexpr std::string_view keyword_search = "keyword_search";
inline constexpr std::string_view chat_completion = "chat_completion";
inline constexpr std::string_view agentic_loop = "agentic_loop";
inline constexpr std::string_view local_http = "local_http";
}  // namespace connector_kinds

std::set<std::string> builtin_connector_kinds();

struct BackendConfig {
  std::string backend_id;
  std::string label;
  std::string connector_kind;
  std::optional<std::string> endpoint_url;
  // Name of an environment variable; the secret value is never stored.
  std::optional<std::string> credential_ref;
  std::optional<std::string> prompt_template;
  bool agentic_mode = false;
  std::int64_t max_steps = 5;
  std::int64_t retrieval_top_k = 3;
  std::optional<std::string> corpus_ref;
  std::optional<std::string> model;
  double temperature = 0.0;

  bool operator==(const BackendConfig&) const = default;
};

struct RecruitmentConfig {
  std::string id_param_name = "PROLIFIC_PID";
  std::optional<std::string> completion_redirect_template;
  bool allow_anonymous = false;

  bool operator==(const RecruitmentConfig&) const = default;
};

struct Study {
  std::string study_id;
  std::string name;
  std::string description;
  StudyStatus status = StudyStatus::draft;
  std::vector<ProcedureElement> procedure;
  std::vector<BackendConfig> backends;
  RecruitmentConfig recruitment;
  // When set, the arrival-to-row mapping of every order plan is shuffled
  // deterministically with this seed.
  std::optional<std::uint64_t> assignment_seed;
  TimePoint created_at{};
  TimePoint updated_at{};
  int schema_version = kSchemaVersion;

  bool operator==(const Study&) const = default;
};

// --- JSON -----------------------------------------------------------------

nlohmann::json to_json(const QuestionItem& item);
nlohmann::json to_json(const ProcedureElement& e);
nlohmann::json to_json(const BackendConfig& b);
nlohmann::json to_json(const RecruitmentConfig& r);
nlohmann::json to_json(const Study& s);

// Editable definition only: name, description, procedure, backends,
// recruitment, assignment_seed.
nlohmann::json definition_to_json(const Study& s);

ProcedureElement element_from_json(const nlohmann::json& j, const std::string& path);
BackendConfig backend_from_json(const nlohmann::json& j, const std::string& path);
RecruitmentConfig recruitment_from_json(const nlohmann::json& j, const std::string& path);
Study study_from_json(const nlohmann::json& j);

// Overwrites the editable definition fields of `study` from `def`. Fields
// absent from `def` keep their current values.
void apply_definition(Study& study, const nlohmann::json& def);

// --- Operations -----------------------------------------------------------

// Fresh draft study. Throws validation_error if `name` is blank.
Study create_study(std::string_view name, TimePoint now);

struct Violation {
  std::string code;
  std::string subject;  // element/backend id the rule fired on, may be empty
  std::string message;

  bool operator==(const Violation&) const = default;
};

nlohmann::json to_json(const Violation& v);

struct ValidationContext {
  std::set<std::string> connector_kinds = builtin_connector_kinds();
  // When set, every backend corpus_ref must name one of these.
  std::optional<std::set<std::string>> corpus_ids;
};

// Empty result means the study may be deployed.
std::vector<Violation> validate_study(const Study& study, const ValidationContext& ctx);
std::vector<Violation> validate_study(const Study& study);

enum class IdRole { element, backend };
using IdMinter = std::function<std::string(IdRole role, std::size_t index)>;

// Rewrites every element and backend id through `mint` and rewires all
// internal references (block children, task condition refs). `index` is the
// position within procedure/backends.
Study remap_ids(const Study& study, const IdMinter& mint);

// Deep copy with fresh study/element/backend ids, status reset to draft.
Study duplicate_definition(const Study& source, std::string_view new_name, TimePoint now);

// block_id -> permutation of that block's children.
using BlockOrders = std::map<std::string, std::vector<std::string>>;

// Linear path of leaf element ids for one participant. Elements owned by a
// block appear at the block's position; counterbalanced blocks use the order
// from `orders`, plain blocks their declared order.
std::vector<std::string> flatten_procedure(const Study& study, const BlockOrders& orders);

const ProcedureElement* find_element(const Study& study, std::string_view id);
const BackendConfig* find_backend(const Study& study, std::string_view id);
std::vector<const Block*> counterbalanced_blocks(const Study& study);

// Throws conflict("invalid_transition") when the move is not allowed.
void check_status_transition(StudyStatus from, StudyStatus to);

}  // namespace studyrig
