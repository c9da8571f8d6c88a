#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "studyrig/connector.hpp"
#include "studyrig/study.hpp"

namespace studyrig {

// Portable replication file (`*.uxbundle.json`).
//
// Layout: {schema_version, study, corpora, checksum}. `study` is the editable
// definition with element and backend ids rewritten to positional ids
// (el-1, el-2, ..., be-1, ...), so two exports of the same study, and an
// export of its re-imported copy, are byte-identical. `checksum` is the hex
// SHA-256 of the canonical text with the checksum field set to "".
//
// Canonical text: keys sorted, two-space indent, UTF-8 without escaping,
// LF line endings, trailing newline.
struct StudyBundle {
  Study study;                 // ids already positional
  std::vector<Corpus> corpora; // only corpora referenced by backends, sorted by id
};

std::string canonical_dump(const nlohmann::json& j);

// Builds the bundle for `study`. `corpora` may contain unreferenced entries;
// they are dropped.
StudyBundle make_bundle(const Study& study, const std::vector<Corpus>& corpora);

// Canonical bytes including the checksum.
std::string serialize_bundle(const StudyBundle& bundle);

// Verifies checksum and schema version, parses, and validates the study.
// Throws Error with code checksum_mismatch, unsupported_schema_version,
// malformed_body or bundle_invalid (validation violations in `extra`).
// The returned study still carries positional ids.
StudyBundle parse_bundle(std::string_view text,
                         std::set<std::string> connector_kinds = builtin_connector_kinds());

// True when the checksum embedded in `text` matches its content.
bool verify_bundle_checksum(std::string_view text);

}  // namespace studyrig
