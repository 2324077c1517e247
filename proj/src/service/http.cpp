#include <fstream>
#include <sstream>
#include <thread>

#include "topo/service/service.hpp"

// After Eigen: <resolv.h> from httplib defines a _res macro.
#include <httplib.h>

namespace topo::service {

using nlohmann::json;

struct HttpServer::Impl {
  FeedbackService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(FeedbackService& s) : service(s) {}
};

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

// Runs a handler body, mapping exceptions to JSON errors.
template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    reply(res, e.status(), {{"error", e.what()}});
  } catch (const json::exception& e) {
    reply(res, 400, {{"error", std::string("malformed JSON: ") + e.what()}});
  } catch (const std::exception& e) {
    reply(res, 500, {{"error", e.what()}});
  }
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ServiceError(400, std::string("malformed JSON: ") + e.what());
  }
}

}  // namespace

HttpServer::HttpServer(FeedbackService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& svr = impl_->server;
  FeedbackService& s = service;

  svr.Post("/sessions", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = parse_body(req);
      reply(res, 201, s.create_session(body.value("annotator", std::string("anonymous"))));
    });
  });
  svr.Get(R"(/sessions/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, s.get_session(req.matches[1])); });
  });
  svr.Get(R"(/sessions/([^/]+)/batch)", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      int n = 20;
      if (req.has_param("n")) {
        const std::string v = req.get_param_value("n");
        std::size_t used = 0;
        try {
          n = std::stoi(v, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used == 0 || used != v.size()) throw ServiceError(400, "n must be an integer");
      }
      reply(res, 200, s.next_batch(req.matches[1], n));
    });
  });
  svr.Post(R"(/sessions/([^/]+)/labels)", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, s.submit_labels(req.matches[1], parse_body(req))); });
  });
  svr.Post("/retrain", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 202, s.trigger_retrain(parse_body(req))); });
  });
  svr.Get(R"(/jobs/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, s.job(req.matches[1])); });
  });
  svr.Get("/stats", [&s](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, s.stats()); });
  });
  svr.Get(R"(/media/([A-Za-z0-9_-]+)\.png)", [&s](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::ifstream in(s.media(req.matches[1]), std::ios::binary);
      std::ostringstream buf;
      buf << in.rdbuf();
      res.status = 200;
      res.set_content(buf.str(), "image/png");
    });
  });
  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) res.set_content(json{{"error", "not found"}}.dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  auto& svr = impl_->server;
  if (port == 0) {
    const int p = svr.bind_to_any_port(host);
    if (p < 0) throw std::runtime_error("cannot bind " + host);
    return p;
  }
  if (!svr.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::start() {
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace topo::service
