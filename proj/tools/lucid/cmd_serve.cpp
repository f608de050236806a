#include <csignal>
#include <pthread.h>
#include <thread>

#include "common.hpp"
#include "lucid/service.hpp"

namespace lucid::cli {

void register_serve(CLI::App& app) {
  struct ServeOpts {
    std::string host = "127.0.0.1", data_dir = "lucid-data", static_dir;
    int port = 8080, max_active = 1, retry_after = 5;
    bool no_resume = false;
  };
  auto o = std::make_shared<ServeOpts>();
  auto* serve = app.add_subcommand("serve", "HTTP annotation service");
  serve->add_option("--port", o->port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", o->host, "Bind address");
  serve->add_option("--data-dir", o->data_dir, "Sessions, datasets and pools live here");
  serve->add_option("--static-dir", o->static_dir, "Serve built web assets from this directory")->check(CLI::ExistingDirectory);
  serve->add_option("--max-active", o->max_active, "Concurrent training sessions")->check(CLI::PositiveNumber);
  serve->add_option("--retry-after", o->retry_after, "Retry-After seconds when the cap is reached")->check(CLI::NonNegativeNumber);
  serve->add_flag("--no-resume", o->no_resume, "Do not re-run unfinished sessions found on disk");
  serve->callback([o] {
    // SIGINT/SIGTERM are taken by a watcher thread that stops the server.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    service::ServiceConfig cfg;
    cfg.data_dir = o->data_dir;
    cfg.max_active_jobs = o->max_active;
    cfg.retry_after_seconds = o->retry_after;
    cfg.resume = !o->no_resume;
    service::Service svc(cfg);
    std::optional<fs::path> static_dir;
    if (!o->static_dir.empty()) static_dir = o->static_dir;
    service::HttpServer http(svc, static_dir);
    const int port = http.bind(o->host, o->port);
    info("listening", {{"host", o->host}, {"port", port}, {"data_dir", o->data_dir}});

    std::thread watcher([&] {
      int sig = 0;
      sigwait(&set, &sig);
      if (sig != 0) info("stopping", {{"signal", sig}});
      http.stop();
    });
    http.run();
    pthread_kill(watcher.native_handle(), SIGTERM);
    watcher.join();
    svc.shutdown();
  });
}

}  // namespace lucid::cli
