#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace studyrig {

using Headers = std::vector<std::pair<std::string, std::string>>;

struct HttpResult {
  int status = 0;
  std::string body;
  Headers headers;

  std::string header(std::string_view name) const;
};

struct UrlParts {
  std::string origin;  // scheme://host[:port]
  std::string path;    // starts with '/', includes query
};

// Throws Error("invalid_url") for anything but http(s)://host[:port][/path].
UrlParts split_url(const std::string& url);

// Keep-alive client bound to one origin. Redirects are not followed.
// Transport failures throw Error("connector_error") with detail
// "timeout" or "unreachable".
class HttpClient {
 public:
  explicit HttpClient(const std::string& origin,
                      std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~HttpClient();
  HttpClient(HttpClient&&) noexcept;
  HttpClient& operator=(HttpClient&&) noexcept;

  HttpResult get(const std::string& path, const Headers& headers = {});
  HttpResult post(const std::string& path, const std::string& body,
                  const std::string& content_type = "application/json",
                  const Headers& headers = {});
  HttpResult put(const std::string& path, const std::string& body,
                 const std::string& content_type = "application/json",
                 const Headers& headers = {});

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One-shot POST to an absolute URL.
HttpResult http_post(const std::string& url, const std::string& body, const Headers& headers,
                     std::chrono::milliseconds timeout);

}  // namespace studyrig
