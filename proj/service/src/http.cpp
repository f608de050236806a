#include <httplib.h>

#include <charconv>
#include <iostream>
#include <sstream>

#include "lucid/service.hpp"

namespace lucid::service {

namespace {

using json = nlohmann::json;

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  send_json(res, {{"error", kind}, {"message", message}}, status);
}

std::string b64(const std::vector<std::uint8_t>& bytes) {
  return httplib::detail::base64_encode(std::string(bytes.begin(), bytes.end()));
}

int int_param(const httplib::Request& req, const std::string& name, int fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw InvalidArgument("query parameter '" + name + "' must be an integer");
  return out;
}

int path_int(const httplib::Request& req, std::size_t i) {
  const std::string v = req.matches[i].str();
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw NotFound("bad path component '" + v + "'");
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("request body is not JSON: ") + e.what());
  }
}

// Maps the error taxonomy onto status codes.
void handle_exception(httplib::Response& res, std::exception_ptr ep) {
  try {
    std::rethrow_exception(ep);
  } catch (const Busy& e) {
    res.set_header("Retry-After", std::to_string(e.retry_after));
    send_error(res, 429, "busy", e.what());
  } catch (const Gone& e) {
    send_error(res, 410, "gone", e.what());
  } catch (const Conflict& e) {
    send_error(res, 409, "conflict", e.what());
  } catch (const ConsistencyError& e) {
    send_error(res, 409, "consistency", e.what());
  } catch (const NotFound& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const InvalidArgument& e) {
    send_error(res, 400, "invalid_argument", e.what());
  } catch (const ShapeError& e) {
    send_error(res, 400, "shape", e.what());
  } catch (const FormatError& e) {
    send_error(res, 400, "format", e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  } catch (...) {
    send_error(res, 500, "internal", "unknown error");
  }
}

}  // namespace

struct HttpServer::Impl {
  Service& svc;
  httplib::Server srv;
  explicit Impl(Service& s) : svc(s) {}

  template <typename F>
  void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (...) {
      handle_exception(res, std::current_exception());
    }
  }

  void routes() {
    const std::string id = "([0-9a-zA-Z_-]+)";
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    srv.set_payload_max_length(1 << 20);

    srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });

    srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, {{"ok", true}}); });

    srv.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send_json(res, {{"sessions", svc.list()}}); });
    });

    srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string sid = svc.create_session(parse_body(req));
        res.set_header("Location", "/sessions/" + sid);
        send_json(res, svc.status(sid), 201);
      });
    });

    srv.Get("/sessions/" + id, [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, svc.status(req.matches[1])); });
    });

    srv.Get("/sessions/" + id + R"(/layers/(\d+)/channels)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, svc.channels(req.matches[1], path_int(req, 2))); });
    });

    srv.Get("/sessions/" + id + R"(/layers/(\d+)/channels/(\d+)/gallery)",
            [this](const httplib::Request& req, httplib::Response& res) {
              guarded(res, [&] {
                std::optional<std::uint64_t> seed;
                if (req.has_param("seed")) seed = static_cast<std::uint64_t>(int_param(req, "seed", 0));
                const int layer = path_int(req, 2), channel = path_int(req, 3);
                const auto images = svc.gallery(req.matches[1], layer, channel, int_param(req, "k", 16), seed);
                if (req.has_param("index")) {
                  const int i = int_param(req, "index", 0);
                  if (i < 0 || i >= static_cast<int>(images.size())) throw NotFound("no gallery image " + std::to_string(i));
                  const auto& png = images[static_cast<std::size_t>(i)].png;
                  res.set_content(std::string(png.begin(), png.end()), "image/png");
                  return;
                }
                json out = {{"layer", layer}, {"channel", channel}, {"images", json::array()}};
                for (const auto& g : images)
                  out["images"].push_back({{"sample", g.sample}, {"pick", g.pick}, {"pooled", g.pooled}, {"png", b64(g.png)}});
                send_json(res, out);
              });
            });

    srv.Post("/sessions/" + id + "/selections", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, svc.submit(req.matches[1], parse_body(req))); });
    });

    srv.Post("/sessions/" + id + "/advance", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, svc.advance(req.matches[1])); });
    });

    srv.Get("/sessions/" + id + "/trace", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string split = req.has_param("split") ? req.get_param_value("split") : "test";
        const auto tr = svc.trace(req.matches[1], int_param(req, "sample", 0), split);
        json out = tr.to_json(false);
        json overlays = json::object();
        for (const auto& lt : tr.layers)
          for (const auto& ct : lt.channels)
            overlays["layer" + std::to_string(lt.layer) + "_channel" + std::to_string(ct.channel)] =
                b64(trace_overlay(tr, lt.layer, ct.channel));
        out["overlays"] = std::move(overlays);
        send_json(res, out);
      });
    });

    srv.Get("/sessions/" + id + "/report", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        ReportQuery q;
        if (req.has_param("kinds")) q.kinds = split_list(req.get_param_value("kinds"));
        if (req.has_param("eps")) {
          q.epsilons.clear();
          for (const auto& e : split_list(req.get_param_value("eps"))) {
            std::size_t used = 0;
            float v = 0.0f;
            try {
              v = std::stof(e, &used);
            } catch (const std::exception&) {
              used = 0;
            }
            if (used != e.size()) throw InvalidArgument("bad epsilon '" + e + "'");
            q.epsilons.push_back(v);
          }
        }
        if (req.has_param("n")) q.n = int_param(req, "n", 0);
        q.seed = static_cast<std::uint64_t>(int_param(req, "seed", 0));
        for (const char* v : {"baseline", "sparse"})
          if (req.has_param(v)) q.checkpoints[v] = req.get_param_value(v);
        const auto rep = svc.report(req.matches[1], q);
        res.set_header("X-Report-Partial", rep.partial ? "true" : "false");
        if (req.has_param("format") && req.get_param_value("format") == "json") {
          send_json(res, rep.to_json());
        } else {
          res.set_content(rep.to_csv(), "text/csv");
        }
      });
    });
  }
};

HttpServer::HttpServer(Service& svc, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>(svc)) {
  impl_->routes();
  if (static_dir && !impl_->srv.set_mount_point("/", static_dir->string()))
    throw NotFound("static directory " + static_dir->string() + " does not exist");
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->srv.bind_to_any_port(host);
    if (p <= 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!impl_->srv.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::run() { impl_->srv.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->srv.stop();
}

}  // namespace lucid::service
