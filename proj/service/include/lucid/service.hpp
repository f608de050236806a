#pragma once

// Annotation sessions: interpretable training runs on a background worker per
// session and stops at every query until a client submits selections and advances.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "lucid/attacks.hpp"
#include "lucid/error.hpp"
#include "lucid/metrics.hpp"

namespace lucid::service {

// The channel left the complement (already selected and frozen).
class Gone : public Conflict {
 public:
  using Conflict::Conflict;
};

// Concurrency cap reached; retry later.
class Busy : public Error {
 public:
  Busy(const std::string& what, int retry_after_seconds) : Error(what), retry_after(retry_after_seconds) {}
  int retry_after;
};

enum class Phase { kTraining, kAwaitingSelection, kFinished, kFailed };
std::string phase_name(Phase p);

struct ServiceConfig {
  std::filesystem::path data_dir = "lucid-data";
  int max_active_jobs = 1;
  int retry_after_seconds = 5;
  // Unfinished sessions found under data_dir are re-run from their logs.
  bool resume = true;
};

struct GalleryImage {
  int sample = 0;    // index into the session's probe set
  std::string pick;  // "top" or "random"
  float pooled = 0.0f;
  std::vector<std::uint8_t> png;
};

struct ReportQuery {
  std::vector<std::string> kinds{"pgd", "cw"};
  std::vector<float> epsilons{0.0f, 0.1f, 0.2f, 0.3f};
  std::optional<int> n;
  std::uint64_t seed = 0;
  std::map<std::string, std::filesystem::path> checkpoints;  // extra variants: baseline / sparse
};

class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Request: {"dataset": dir, "arch": preset, "config": TrainConfig?, "pool": dir?,
  // "limit": n?, "probe_size": n?}. Relative paths resolve against data_dir.
  std::string create_session(const nlohmann::json& request);

  nlohmann::json list() const;
  nlohmann::json status(const std::string& id) const;
  nlohmann::json channels(const std::string& id, int layer) const;
  std::vector<GalleryImage> gallery(const std::string& id, int layer, int channel, int k,
                                    std::optional<std::uint64_t> seed = {});
  nlohmann::json submit(const std::string& id, const nlohmann::json& body);
  nlohmann::json advance(const std::string& id);
  // Trace of one dataset sample through the latest model snapshot.
  PredictionTrace trace(const std::string& id, int sample, const std::string& split) const;
  // Robustness rows for the finished model plus any extra checkpoints.
  AttackReport report(const std::string& id, const ReportQuery& q);

  // Blocks until the session is in `phase` (or a terminal phase) or the timeout passes.
  Phase wait_for(const std::string& id, Phase phase, std::chrono::milliseconds timeout) const;

  // Stops every worker; unfinished sessions stay resumable on disk.
  void shutdown();

  const ServiceConfig& config() const { return cfg_; }

  struct Session;

 private:
  std::shared_ptr<Session> find(const std::string& id) const;
  std::filesystem::path resolve(const std::string& p) const;
  std::shared_ptr<Session> open_session(const std::string& id, const nlohmann::json& request);
  void start_worker(const std::shared_ptr<Session>& s, std::vector<nlohmann::json> replay);
  void load_existing();
  int active_jobs() const;

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  int reserved_ = 0;  // sessions being created
};

// HTTP+JSON front end over a Service.
class HttpServer {
 public:
  explicit HttpServer(Service& svc, std::optional<std::filesystem::path> static_dir = {});
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace lucid::service
