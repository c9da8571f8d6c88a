#include "studyrig/http_api.hpp"

#include <condition_variable>
#include <thread>

#include <httplib.h>

#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;

namespace {

constexpr const char* kJson = "application/json";

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(-1, ' ', false, json::error_handler_t::replace), kJson);
}

void send_error(httplib::Response& res, const Error& e) {
  json body = e.extra().is_object() ? e.extra() : json::object();
  body["error"] = e.code();
  body["detail"] = e.detail();
  send_json(res, e.http_status(), body);
}

json parse_body(const httplib::Request& req, bool allow_empty) {
  if (req.body.empty()) {
    if (allow_empty) return json::object();
    throw errors::malformed("body: required");
  }
  json body = json::parse(req.body, nullptr, false);
  if (body.is_discarded()) throw errors::malformed("body: invalid JSON");
  return body;
}

std::string bearer(const httplib::Request& req) {
  const std::string h = req.get_header_value("Authorization");
  constexpr std::string_view prefix = "Bearer ";
  if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0) return {};
  return h.substr(prefix.size());
}

std::string str_field(const json& body, const char* key, std::string fallback = {}) {
  if (!body.is_object() || !body.contains(key) || body[key].is_null()) return fallback;
  if (!body[key].is_string()) throw errors::malformed(std::string(key) + ": expected string");
  return body[key].get<std::string>();
}

}  // namespace

struct HttpServer::Impl {
  StudyService& service;
  ServerConfig config;
  httplib::Server server;
  int bound_port = -1;
  std::thread thread;

  Impl(StudyService& s, ServerConfig c) : service(s), config(std::move(c)) {}

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const Error& e) {
        send_error(res, e);
      } catch (const json::exception& e) {
        send_error(res, errors::malformed(e.what()));
      } catch (const std::exception& e) {
        send_error(res, Error("internal_error", e.what(), 500));
      }
    };
  }

  Handler experimenter(Handler h) {
    return guarded([this, h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      const std::string token = bearer(req);
      if (config.experimenter_token.empty() || token.empty() ||
          !constant_time_equal(token, config.experimenter_token)) {
        throw errors::unauthorized("experimenter credential required");
      }
      h(req, res);
    });
  }

  static std::string session_token(const httplib::Request& req) {
    return req.get_header_value("X-Session-Token");
  }

  void routes() {
    auto& svc = service;
    server.Get("/api/health", guarded([](const auto&, auto& res) {
                 send_json(res, 200, {{"status", "ok"}});
               }));

    // Experimenter.
    server.Post("/api/studies", experimenter([&svc](const auto& req, auto& res) {
                  send_json(res, 201, svc.create_study(parse_body(req, false)));
                }));
    server.Get("/api/studies", experimenter([&svc](const auto&, auto& res) {
                 send_json(res, 200, svc.list_studies());
               }));
    server.Get("/api/studies/:id", experimenter([&svc](const auto& req, auto& res) {
                 send_json(res, 200, svc.get_study(req.path_params.at("id")));
               }));
    server.Put("/api/studies/:id", experimenter([&svc](const auto& req, auto& res) {
                 send_json(res, 200,
                           svc.update_study(req.path_params.at("id"), parse_body(req, false)));
               }));
    server.Post("/api/studies/:id/duplicate", experimenter([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, true);
                  send_json(res, 201,
                            svc.duplicate_study(req.path_params.at("id"), str_field(body, "name")));
                }));
    server.Post("/api/studies/:id/deploy", experimenter([&svc](const auto& req, auto& res) {
                  send_json(res, 200, svc.deploy_study(req.path_params.at("id")));
                }));
    server.Post("/api/studies/:id/archive", experimenter([&svc](const auto& req, auto& res) {
                  send_json(res, 200,
                            svc.set_study_status(req.path_params.at("id"), StudyStatus::archived));
                }));
    server.Post("/api/studies/:id/status", experimenter([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, false);
                  const StudyStatus to = parse_study_status(str_field(body, "status"));
                  send_json(res, 200, svc.set_study_status(req.path_params.at("id"), to));
                }));
    server.Get("/api/studies/:id/link", experimenter([&svc](const auto& req, auto& res) {
                 const auto& id = req.path_params.at("id");
                 send_json(res, 200, {{"study_id", id}, {"link", svc.study_link(id)}});
               }));
    server.Get("/api/studies/:id/bundle", experimenter([&svc](const auto& req, auto& res) {
                 const auto& id = req.path_params.at("id");
                 res.status = 200;
                 res.set_header("Content-Disposition",
                                "attachment; filename=\"" + id + ".uxbundle.json\"");
                 res.set_content(svc.export_bundle(id), kJson);
               }));
    server.Post("/api/bundles/import", experimenter([&svc](const auto& req, auto& res) {
                  send_json(res, 201, svc.import_bundle(req.body));
                }));
    server.Post("/api/studies/:id/corpus", experimenter([&svc](const auto& req, auto& res) {
                  std::optional<std::string> corpus_id;
                  if (req.has_param("corpus_id")) corpus_id = req.get_param_value("corpus_id");
                  send_json(res, 200, svc.upload_corpus(req.path_params.at("id"),
                                                        parse_body(req, false), corpus_id));
                }));
    server.Get("/api/studies/:id/monitor", experimenter([&svc](const auto& req, auto& res) {
                 send_json(res, 200, svc.monitor(req.path_params.at("id")));
               }));
    server.Get("/api/studies/:id/export.csv", experimenter([&svc](const auto& req, auto& res) {
                 res.status = 200;
                 res.set_content(svc.export_csv(req.path_params.at("id")),
                                 "text/csv; charset=utf-8");
               }));
    server.Get("/api/studies/:id/metrics.csv", experimenter([&svc](const auto& req, auto& res) {
                 res.status = 200;
                 res.set_content(svc.metrics_csv(req.path_params.at("id")),
                                 "text/csv; charset=utf-8");
               }));
    server.Post("/api/sessions/:id/approve", experimenter([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, true);
                  send_json(res, 200, svc.approve_resume(req.path_params.at("id"),
                                                         str_field(body, "approver",
                                                                   "experimenter")));
                }));
    server.Post("/api/sessions/:id/abandon", experimenter([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, false);
                  if (!body.contains("idle_threshold_s") ||
                      !body["idle_threshold_s"].is_number_integer()) {
                    throw errors::malformed("idle_threshold_s: expected integer");
                  }
                  send_json(res, 200,
                            svc.mark_abandoned(req.path_params.at("id"),
                                               body["idle_threshold_s"].get<std::int64_t>()));
                }));
    server.Post("/api/split", experimenter([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, false);
                  if (!body.contains("targets") || !body["targets"].is_array()) {
                    throw errors::malformed("targets: expected array of study ids");
                  }
                  send_json(res, 200, svc.split(body["targets"].get<std::vector<std::string>>(),
                                                str_field(body, "external_id")));
                }));
    server.Get("/api/connectors", experimenter([&svc](const auto&, auto& res) {
                 json out = json::array();
                 for (const auto& kind : svc.registry().kinds()) {
                   out.push_back(to_json(*svc.registry().descriptor(kind)));
                 }
                 send_json(res, 200, out);
               }));
    server.Get("/api/clock", experimenter([this](const auto&, auto& res) {
                 send_json(res, 200, {{"now", to_iso8601(service.now())},
                                      {"virtual", config.virtual_clock != nullptr}});
               }));
    server.Post("/api/clock/advance", experimenter([this](const auto& req, auto& res) {
                  if (config.virtual_clock == nullptr) {
                    throw Error("clock_not_virtual", "server runs on the system clock", 409);
                  }
                  const json body = parse_body(req, false);
                  if (!body.contains("seconds") || !body["seconds"].is_number() ||
                      body["seconds"].get<double>() < 0) {
                    throw errors::malformed("seconds: expected non-negative number");
                  }
                  config.virtual_clock->advance(
                      Millis(static_cast<std::int64_t>(body["seconds"].get<double>() * 1000)));
                  send_json(res, 200, {{"now", to_iso8601(config.virtual_clock->now())}});
                }));

    // Participant.
    server.Post("/api/p/:slug/join", guarded([&svc](const auto& req, auto& res) {
                  EntryParams params;
                  for (const auto& [k, v] : req.params) params.emplace(k, v);
                  const json body = parse_body(req, true);
                  if (body.contains("params")) {
                    if (!body["params"].is_object()) {
                      throw errors::malformed("params: expected object");
                    }
                    for (const auto& [k, v] : body["params"].items()) {
                      if (!v.is_string()) {
                        throw errors::malformed("params." + k + ": expected string");
                      }
                      params[k] = v.template get<std::string>();
                    }
                  }
                  const JoinResult r = svc.join(req.path_params.at("slug"), params);
                  send_json(res, r.resumed ? 200 : 201,
                            {{"session_id", r.session_id},
                             {"session_token", r.session_token},
                             {"resumed", r.resumed},
                             {"state", r.element}});
                }));
    server.Get("/api/session/element", guarded([&svc](const auto& req, auto& res) {
                 send_json(res, 200, svc.current_element(session_token(req)));
               }));
    server.Post("/api/session/respond", guarded([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, false);
                  send_json(res, 200, svc.respond(session_token(req), body));
                }));
    server.Post("/api/session/interact", guarded([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, false);
                  send_json(res, 200, svc.interact(session_token(req), body));
                }));
    server.Post("/api/session/advance", guarded([&svc](const auto& req, auto& res) {
                  const json body = parse_body(req, true);
                  send_json(res, 200, svc.advance(session_token(req), body));
                }));
    server.Get("/api/session/complete", guarded([&svc](const auto& req, auto& res) {
                 const CompletionTarget t = svc.complete(session_token(req));
                 json body{{"code", t.code}};
                 if (t.redirect_url) {
                   body["redirect_url"] = *t.redirect_url;
                   res.set_header("Location", *t.redirect_url);
                   send_json(res, 303, body);
                 } else {
                   send_json(res, 200, body);
                 }
               }));

    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      if (res.status == 404) {
        send_error(res, Error("not_found", "no route for " + req.method + " " + req.path, 404));
      } else {
        send_error(res, Error("http_error", httplib::status_message(res.status), res.status));
      }
      return httplib::Server::HandlerResponse::Handled;
    });
    server.set_exception_handler(
        [](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
          send_error(res, Error("internal_error", "unhandled exception", 500));
        });
  }
};

HttpServer::HttpServer(StudyService& service, ServerConfig config)
    : impl_(std::make_unique<Impl>(service, std::move(config))) {
  const std::size_t threads = impl_->config.worker_threads;
  impl_->server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  impl_->server.set_keep_alive_timeout(2);
  impl_->server.set_tcp_nodelay(true);
  impl_->server.set_payload_max_length(64u << 20);
  impl_->routes();
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
  if (impl_->bound_port > 0) return impl_->bound_port;
  int port = impl_->config.port;
  if (port == 0) {
    port = impl_->server.bind_to_any_port(impl_->config.host);
  } else if (!impl_->server.bind_to_port(impl_->config.host, port)) {
    port = -1;
  }
  if (port <= 0) {
    throw Error("bind_failed", "cannot listen on " + impl_->config.host + ":" +
                                   std::to_string(impl_->config.port), 500);
  }
  impl_->bound_port = port;
  return port;
}

void HttpServer::listen() {
  bind();
  impl_->server.listen_after_bind();
}

void HttpServer::start() {
  bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int HttpServer::port() const { return impl_->bound_port; }

std::string HttpServer::base_url() const {
  return "http://" + impl_->config.host + ":" + std::to_string(impl_->bound_port);
}

}  // namespace studyrig
