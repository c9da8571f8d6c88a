#pragma once

#include <memory>
#include <string>

#include "studyrig/clock.hpp"
#include "studyrig/service.hpp"

namespace studyrig {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string experimenter_token;
  // When set, GET /api/clock and POST /api/clock/advance drive this clock.
  VirtualClock* virtual_clock = nullptr;
  std::size_t worker_threads = 64;
};

// REST surface over a StudyService. Experimenter routes need
// "Authorization: Bearer <token>"; participant routes need the
// "X-Session-Token" header returned by join.
class HttpServer {
 public:
  HttpServer(StudyService& service, ServerConfig config);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds the listening socket and returns the port. Throws
  // Error("bind_failed") when the port is taken.
  int bind();
  // Serves until stop(); binds first if needed.
  void listen();
  // listen() on a background thread; returns once the socket is bound.
  void start();
  void stop();

  int port() const;
  std::string base_url() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace studyrig
