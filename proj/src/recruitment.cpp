#include "studyrig/recruitment.hpp"

#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

std::string make_study_link(const Study& study, std::string_view base_url) {
  if (study.status != StudyStatus::deployed) {
    throw errors::conflict("not_deployed", "study '" + study.study_id + "' is not deployed");
  }
  std::string base(base_url);
  while (!base.empty() && base.back() == '/') base.pop_back();
  return base + "/p/" + study.study_id;
}

std::string extract_external_id(const EntryParams& params, const RecruitmentConfig& config) {
  auto it = params.find(config.id_param_name);
  if (it != params.end() && !it->second.empty()) return it->second;
  if (config.allow_anonymous) return new_anonymous_id();
  throw Error("missing_external_id",
              "entry parameter '" + config.id_param_name + "' is required", 422);
}

CompletionTarget completion_redirect(const std::optional<std::string>& completion_code,
                                     const RecruitmentConfig& config) {
  if (!completion_code) throw errors::conflict("not_completed", "session is not completed");
  CompletionTarget out{*completion_code, std::nullopt};
  if (config.completion_redirect_template) {
    std::string url = *config.completion_redirect_template;
    const auto pos = url.find("{code}");
    if (pos != std::string::npos) url.replace(pos, 6, *completion_code);
    out.redirect_url = std::move(url);
  }
  return out;
}

}  // namespace studyrig
