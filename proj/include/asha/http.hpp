#pragma once

#include <functional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "asha/service.hpp"

// HTTP binding of TunerService. Bodies are JSON unless noted.
//
//   POST /experiments                       spec            -> 201 {"id"}
//   GET  /experiments                                       -> [{"id","mode","finished"}]
//   GET  /experiments/{id}                                  -> status snapshot
//   POST /experiments/{id}/resume           {"additional_n"} -> status snapshot
//   POST /experiments/{id}/jobs/poll        {"worker_id"}   -> {"job"} | {"no_work"}
//   POST /experiments/{id}/results          result          -> {"accepted","duplicate","sequence_no"}
//   PUT  /experiments/{id}/blobs            raw bytes       -> 201 {"id","digest","size"}
//   GET  /experiments/{id}/blobs/{digest}                   -> raw bytes
//   GET  /experiments/{id}/export?format=csv|jsonlines      -> text
//   GET  /scheduler/allocations                             -> CSV
//   GET  /healthz                                           -> {"ok": true}
//
// Errors: 400 {"error", "errors": [{"field","message"}]} for bad input,
// 404 {"error"} for unknown experiments or blobs, 409 {"error"} for results
// whose token is not outstanding or conflicts with an accepted result.

namespace asha::service {

class HttpServer {
 public:
  explicit HttpServer(TunerService& service) : service_(service) { routes(); }

  /// Binds to an ephemeral port and returns it.
  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  /// Blocks until stop().
  bool serve() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void send(httplib::Response& res, int code, const json& body) {
    res.status = code;
    res.set_content(body.dump(), "application/json");
  }

  static json body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument(std::string("malformed JSON body: ") + e.what());
    }
  }

  static Handler guarded(Handler fn) {
    return [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const SpecError& e) {
        json errors = json::array();
        for (const auto& fe : e.errors()) errors.push_back({{"field", fe.field}, {"message", fe.message}});
        send(res, 400, {{"error", "invalid spec"}, {"errors", errors}});
      } catch (const NotFound& e) {
        send(res, 404, {{"error", e.what()}});
      } catch (const Conflict& e) {
        send(res, 409, {{"error", e.what()}});
      } catch (const RejectedReport& e) {
        send(res, 409, {{"error", e.what()}});
      } catch (const json::exception& e) {
        send(res, 400, {{"error", e.what()}});
      } catch (const std::invalid_argument& e) {
        send(res, 400, {{"error", e.what()}});
      } catch (const std::exception& e) {
        send(res, 500, {{"error", e.what()}});
      }
    };
  }

  void routes() {
    auto& s = server_;
    auto& svc = service_;
    s.Get("/healthz", guarded([](const auto&, auto& res) { send(res, 200, {{"ok", true}}); }));
    s.Post("/experiments", guarded([&svc](const auto& req, auto& res) { send(res, 201, svc.create(body(req))); }));
    s.Get("/experiments", guarded([&svc](const auto&, auto& res) { send(res, 200, svc.list()); }));
    s.Get("/experiments/:id", guarded([&svc](const auto& req, auto& res) {
      send(res, 200, svc.status(req.path_params.at("id")));
    }));
    s.Post("/experiments/:id/resume", guarded([&svc](const auto& req, auto& res) {
      const json b = body(req);
      send(res, 200, svc.resume(req.path_params.at("id"), b.value("additional_n", std::int64_t{0})));
    }));
    s.Post("/experiments/:id/jobs/poll", guarded([&svc](const auto& req, auto& res) {
      const json b = body(req);
      send(res, 200, svc.poll(req.path_params.at("id"), b.value("worker_id", std::string("anonymous"))));
    }));
    s.Post("/experiments/:id/results", guarded([&svc](const auto& req, auto& res) {
      send(res, 200, svc.submit(req.path_params.at("id"), body(req)));
    }));
    s.Put("/experiments/:id/blobs", guarded([&svc](const auto& req, auto& res) {
      send(res, 201, svc.put_blob(req.path_params.at("id"), req.body));
    }));
    s.Get("/experiments/:id/blobs/:digest", guarded([&svc](const auto& req, auto& res) {
      res.set_content(svc.get_blob(req.path_params.at("id"), req.path_params.at("digest")), "application/octet-stream");
    }));
    s.Get("/experiments/:id/export", guarded([&svc](const auto& req, auto& res) {
      const std::string format = req.has_param("format") ? req.get_param_value("format") : "csv";
      res.set_content(svc.export_results(req.path_params.at("id"), format),
                      format == "csv" ? "text/csv" : "application/x-ndjson");
    }));
    s.Get("/scheduler/allocations", guarded([&svc](const auto&, auto& res) {
      res.set_content(svc.allocation_csv(), "text/csv");
    }));
  }

  TunerService& service_;
  httplib::Server server_;
};

}  // namespace asha::service
