#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

namespace studyrig {

// Failure with a stable machine-readable code. The HTTP layer maps
// `http_status` straight onto the response and serializes `code`/`detail`
// as {"error": ..., "detail": ...}.
class Error : public std::runtime_error {
 public:
  Error(std::string code, std::string detail, int http_status = 400,
        nlohmann::json extra = nullptr)
      : std::runtime_error(code + ": " + detail),
        code_(std::move(code)),
        detail_(std::move(detail)),
        http_status_(http_status),
        extra_(std::move(extra)) {}

  const std::string& code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }
  int http_status() const noexcept { return http_status_; }
  const nlohmann::json& extra() const noexcept { return extra_; }

 private:
  std::string code_;
  std::string detail_;
  int http_status_;
  nlohmann::json extra_;
};

namespace errors {

inline Error validation(std::string detail) {
  return Error("validation_error", std::move(detail), 422);
}
inline Error malformed(std::string detail) {
  return Error("malformed_body", std::move(detail), 422);
}
inline Error not_found(std::string what) {
  return Error("not_found", std::move(what), 404);
}
inline Error unauthorized(std::string detail = "missing or invalid credential") {
  return Error("unauthorized", std::move(detail), 401);
}
inline Error conflict(std::string code, std::string detail) {
  return Error(std::move(code), std::move(detail), 409);
}

}  // namespace errors
}  // namespace studyrig
