#pragma once

#include <map>
#include <optional>
#include <string>

#include "studyrig/study.hpp"

namespace studyrig {

using EntryParams = std::map<std::string, std::string>;

// base_url + "/p/" + slug. The slug is the study id. Throws
// conflict("not_deployed") unless the study is deployed.
std::string make_study_link(const Study& study, std::string_view base_url);

// params[config.id_param_name]; a fresh "anon-" id when absent and anonymous
// entry is allowed. Throws Error("missing_external_id", 422) otherwise.
std::string extract_external_id(const EntryParams& params, const RecruitmentConfig& config);

struct CompletionTarget {
  std::string code;
  std::optional<std::string> redirect_url;  // unset without a template
};

// Throws conflict("not_completed") when `completion_code` is unset.
CompletionTarget completion_redirect(const std::optional<std::string>& completion_code,
                                     const RecruitmentConfig& config);

}  // namespace studyrig
