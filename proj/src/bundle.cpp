#include "studyrig/bundle.hpp"

#include <algorithm>
#include <set>

#include "json_fields.hpp"
#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;

namespace {

json bundle_json(const StudyBundle& bundle, const std::string& checksum) {
  json corpora = json::object();
  for (const auto& c : bundle.corpora) corpora[c.corpus_id] = documents_to_json(c);
  return json{{"schema_version", kSchemaVersion},
              {"study", definition_to_json(bundle.study)},
              {"corpora", corpora},
              {"checksum", checksum}};
}

}  // namespace

std::string canonical_dump(const json& j) {
  // nlohmann::json keeps object keys in a std::map, so they serialize sorted.
  return j.dump(2, ' ', false, json::error_handler_t::strict) + "\n";
}

StudyBundle make_bundle(const Study& study, const std::vector<Corpus>& corpora) {
  StudyBundle bundle;
  bundle.study = remap_ids(study, [](IdRole role, std::size_t index) {
    return (role == IdRole::element ? "el-" : "be-") + std::to_string(index + 1);
  });
  bundle.study.study_id.clear();
  bundle.study.status = StudyStatus::draft;
  bundle.study.created_at = {};
  bundle.study.updated_at = {};

  std::set<std::string> referenced;
  for (const auto& b : study.backends) {
    if (b.corpus_ref) referenced.insert(*b.corpus_ref);
  }
  for (const auto& c : corpora) {
    if (referenced.count(c.corpus_id) != 0) bundle.corpora.push_back(c);
  }
  std::sort(bundle.corpora.begin(), bundle.corpora.end(),
            [](const Corpus& a, const Corpus& b) { return a.corpus_id < b.corpus_id; });
  return bundle;
}

std::string serialize_bundle(const StudyBundle& bundle) {
  const std::string unsigned_text = canonical_dump(bundle_json(bundle, ""));
  return canonical_dump(bundle_json(bundle, sha256_hex(unsigned_text)));
}

bool verify_bundle_checksum(std::string_view text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("checksum") ||
      !j["checksum"].is_string()) {
    return false;
  }
  const std::string claimed = j["checksum"].get<std::string>();
  j["checksum"] = "";
  std::string recomputed;
  try {
    recomputed = sha256_hex(canonical_dump(j));
  } catch (const json::exception&) {
    return false;  // invalid UTF-8
  }
  // Any byte-level deviation from canonical form also counts as tampering.
  j["checksum"] = claimed;
  std::string canonical;
  try {
    canonical = canonical_dump(j);
  } catch (const json::exception&) {
    return false;
  }
  return recomputed == claimed && canonical == text;
}

StudyBundle parse_bundle(std::string_view text, std::set<std::string> connector_kinds) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw errors::malformed("bundle is not a JSON object");
  if (!verify_bundle_checksum(text)) {
    throw Error("checksum_mismatch", "bundle checksum does not match its content", 422);
  }
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
    throw errors::malformed("schema_version: required integer");
  }
  if (j["schema_version"].get<int>() != kSchemaVersion) {
    throw Error("unsupported_schema_version",
                "bundle schema_version " + std::to_string(j["schema_version"].get<int>()) +
                    " is not supported (expected " + std::to_string(kSchemaVersion) + ")",
                422);
  }

  StudyBundle bundle;
  const json* study_json = detail::find_field(j, "study");
  if (study_json == nullptr) throw errors::malformed("study: required");
  Study study;
  study.name = "imported";
  apply_definition(study, *study_json);
  bundle.study = std::move(study);

  std::set<std::string> corpus_ids;
  if (const json* corpora = detail::find_field(j, "corpora")) {
    detail::require_object(*corpora, "corpora");
    for (const auto& [id, docs] : corpora->items()) {
      bundle.corpora.push_back(corpus_from_json(docs, id));
      corpus_ids.insert(id);
    }
  }

  ValidationContext ctx;
  ctx.connector_kinds = std::move(connector_kinds);
  ctx.corpus_ids = corpus_ids;
  const auto violations = validate_study(bundle.study, ctx);
  // A bundle may legitimately capture a study that is still being edited, but
  // structural violations make it unusable for replication.
  std::vector<Violation> blocking;
  for (const auto& v : violations) {
    if (v.code != "empty_procedure") blocking.push_back(v);
  }
  if (!blocking.empty()) {
    json list = json::array();
    for (const auto& v : blocking) list.push_back(to_json(v));
    throw Error("bundle_invalid", "bundle study has " + std::to_string(blocking.size()) +
                                      " validation violation(s)",
                422, json{{"violations", list}});
  }
  return bundle;
}

}  // namespace studyrig
