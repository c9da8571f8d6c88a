#include "studyrig/http_transport.hpp"

#include <algorithm>
#include <cctype>

#include <httplib.h>

#include "studyrig/error.hpp"

namespace studyrig {
namespace {

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) ==
                  std::tolower(static_cast<unsigned char>(y));
         });
}

httplib::Headers to_httplib(const Headers& headers) {
  httplib::Headers out;
  for (const auto& [k, v] : headers) out.emplace(k, v);
  return out;
}

HttpResult convert(const httplib::Result& res) {
  if (!res) {
    const auto err = res.error();
    const bool timed_out = err == httplib::Error::Read || err == httplib::Error::Write ||
                           err == httplib::Error::ConnectionTimeout;
    throw Error("connector_error", timed_out ? "timeout" : "unreachable", 502,
                nlohmann::json{{"transport_error", httplib::to_string(err)}});
  }
  HttpResult out{res->status, res->body, {}};
  for (const auto& [k, v] : res->headers) out.headers.emplace_back(k, v);
  return out;
}

}  // namespace

std::string HttpResult::header(std::string_view name) const {
  for (const auto& [k, v] : headers) {
    if (iequals(k, name)) return v;
  }
  return {};
}

UrlParts split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error("invalid_url", "missing scheme: " + url, 422);
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw Error("invalid_url", "unsupported scheme: " + url, 422);
  }
  const auto host_start = scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  UrlParts parts;
  parts.origin = url.substr(0, path_start);
  parts.path = path_start == std::string::npos ? "/" : url.substr(path_start);
  if (parts.origin.size() <= host_start) throw Error("invalid_url", "missing host: " + url, 422);
  return parts;
}

struct HttpClient::Impl {
  httplib::Client client;
  explicit Impl(const std::string& origin) : client(origin) {}
};

HttpClient::HttpClient(const std::string& origin, std::chrono::milliseconds timeout)
    : impl_(std::make_unique<Impl>(origin)) {
  impl_->client.set_keep_alive(true);
  impl_->client.set_tcp_nodelay(true);
  impl_->client.set_follow_location(false);
  impl_->client.set_connection_timeout(timeout);
  impl_->client.set_read_timeout(timeout);
  impl_->client.set_write_timeout(timeout);
}

HttpClient::~HttpClient() = default;
HttpClient::HttpClient(HttpClient&&) noexcept = default;
HttpClient& HttpClient::operator=(HttpClient&&) noexcept = default;

HttpResult HttpClient::get(const std::string& path, const Headers& headers) {
  return convert(impl_->client.Get(path, to_httplib(headers)));
}

HttpResult HttpClient::post(const std::string& path, const std::string& body,
                            const std::string& content_type, const Headers& headers) {
  return convert(impl_->client.Post(path, to_httplib(headers), body, content_type));
}

HttpResult HttpClient::put(const std::string& path, const std::string& body,
                           const std::string& content_type, const Headers& headers) {
  return convert(impl_->client.Put(path, to_httplib(headers), body, content_type));
}

HttpResult http_post(const std::string& url, const std::string& body, const Headers& headers,
                     std::chrono::milliseconds timeout) {
  const UrlParts parts = split_url(url);
  HttpClient client(parts.origin, timeout);
  return client.post(parts.path, body, "application/json", headers);
}

}  // namespace studyrig
