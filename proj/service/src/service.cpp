#include "lucid/service.hpp"

#include <algorithm>
#include <condition_variable>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <thread>

#include "lucid/concepts.hpp"
#include "lucid/oracle.hpp"
#include "lucid/render.hpp"
#include "lucid/train.hpp"

namespace lucid::service {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::kTraining: return "training";
    case Phase::kAwaitingSelection: return "awaiting_selection";
    case Phase::kFinished: return "finished";
    case Phase::kFailed: return "failed";
  }
  return "unknown";
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void write_json(const fs::path& p, const json& j) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

std::string new_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%012llx", static_cast<unsigned long long>(rng() & 0xFFFFFFFFFFFFULL));
  return buf;
}

std::size_t count_responses(const std::vector<json>& events) {
  return static_cast<std::size_t>(
      std::count_if(events.begin(), events.end(), [](const json& e) { return e.value("event", "") == "response"; }));
}

bool terminal(Phase p) { return p == Phase::kFinished || p == Phase::kFailed; }

bool is_boundary(const std::string& kind) {
  return kind == "iteration_start" || kind == "layer_end" || kind == "run_end";
}

// Selection, loss and progress state rebuilt from the event log.
struct Folded {
  struct Chosen {
    std::string concept_name;
    std::string provenance;
    int iteration = 0;
  };
  int layer = 1;
  int iteration = 0;  // last completed training iteration of `layer`
  int training_iteration = 0;
  std::vector<std::map<int, Chosen>> selected;
  std::vector<json> layer_ends;
  json losses = json::array();
  json run_end;
};

Folded fold(const std::vector<json>& events, int layers) {
  Folded f;
  f.selected.resize(static_cast<std::size_t>(layers));
  f.layer_ends.resize(static_cast<std::size_t>(layers));
  std::map<int, Folded::Chosen> offered;
  for (const auto& e : events) {
    const std::string kind = e.value("event", "");
    if (kind == "iteration_start") {
      const int l = e.at("layer").get<int>();
      if (l != f.layer) f.iteration = 0;
      f.layer = l;
      f.training_iteration = e.at("iteration").get<int>();
      f.iteration = f.training_iteration - 1;
    } else if (kind == "epoch" || kind == "fc_finetune" || kind == "prune_finetune") {
      json row = {{"stage", kind == "epoch" ? "layer" : kind}};
      for (const char* k : {"layer", "iteration", "epoch", "loss", "pred", "sparsity", "correlation"})
        if (e.contains(k)) row[k] = e[k];
      f.losses.push_back(std::move(row));
    } else if (kind == "query") {
      f.iteration = e.at("iteration").get<int>();
    } else if (kind == "premap" || kind == "response") {
      offered.clear();
      const std::string prov = kind == "premap" ? "pool" : e.value("provenance", "human");
      for (const auto& s : e.at("selections")) {
        const int c = s.at("channel").get<int>();
        if (!offered.count(c)) offered[c] = {s.at("concept").get<std::string>(), prov, e.at("iteration").get<int>()};
      }
    } else if (kind == "freeze") {
      const int l = e.at("layer").get<int>();
      if (l < 1 || l > layers) continue;
      for (const auto& c : e.at("channels")) {
        const int ch = c.get<int>();
        auto it = offered.find(ch);
        f.selected[static_cast<std::size_t>(l - 1)][ch] =
            it != offered.end() ? it->second : Folded::Chosen{"", "", e.at("iteration").get<int>()};
      }
    } else if (kind == "layer_end") {
      const int l = e.at("layer").get<int>();
      if (l < 1 || l > layers) continue;
      f.layer_ends[static_cast<std::size_t>(l - 1)] = e;
      f.iteration = e.at("iterations").get<int>();
    } else if (kind == "run_end") {
      f.run_end = e;
    }
  }
  return f;
}

// Rejects a (layer, channel) pair outside the open query's complement.
void check_open(const Query& q, const std::vector<json>& events, int layers, int kc, int layer, int channel) {
  if (layer < 1 || layer > layers) throw NotFound("no layer " + std::to_string(layer));
  if (layer != q.layer) {
    const Folded f = fold(events, layers);
    if (f.selected[static_cast<std::size_t>(layer - 1)].count(channel))
      throw Gone("channel " + std::to_string(channel) + " of layer " + std::to_string(layer) + " is already selected");
    throw Conflict("layer " + std::to_string(layer) + " is not under annotation");
  }
  if (channel < 0 || channel >= kc) throw NotFound("no channel " + std::to_string(channel));
  if (!std::binary_search(q.candidates.begin(), q.candidates.end(), channel))
    throw Gone("channel " + std::to_string(channel) + " is already selected");
}

ArchSpec parse_arch(const json& j) {
  if (j.is_string()) return ArchSpec::preset(j.get<std::string>());
  if (j.is_object()) return ArchSpec::from_json(j);
  throw InvalidArgument("arch must be a preset name or an object");
}

}  // namespace

struct Service::Session {
  std::string id;
  fs::path dir;
  json request;
  std::string dataset_name;
  ArchSpec arch;
  TrainConfig cfg;
  LabeledDataset train;
  std::optional<LabeledDataset> test;
  LabeledDataset probe;
  std::optional<ConceptPool> pool;
  std::unique_ptr<SessionLog> log;

  mutable std::mutex mu;
  mutable std::condition_variable cv;
  Phase phase = Phase::kTraining;
  std::string error;
  std::optional<Query> query;
  std::shared_ptr<const Model> snapshot;
  std::map<int, std::string> pending;  // channel -> concept for the open query's layer
  int pending_layer = 0;
  bool advance_requested = false;
  bool stop = false;
  std::size_t boundary_count = 0;  // iteration_start / layer_end / run_end events seen
  json last_layer_end;
  std::size_t layer_end_count = 0;
  json final_info;
  std::thread worker;

  mutable std::mutex cache_mu;
  mutable std::shared_ptr<const Model> cached_for;
  mutable std::shared_ptr<const Inference> cached;
  std::map<std::string, AttackReport> reports;

  void persist_pending() const {
    json sel = json::array();
    for (const auto& [c, name] : pending) sel.push_back({{"channel", c}, {"concept", name}});
    write_json(dir / "pending.json", {{"layer", pending_layer}, {"selections", sel}});
  }

  void log_phase(Phase p, const json& extra = json::object()) {
    json ev = {{"event", "phase"}, {"phase", phase_name(p)}};
    ev.update(extra);
    log->append(std::move(ev));
  }

  std::shared_ptr<const Inference> probe_inference(const std::shared_ptr<const Model>& model) const {
    std::lock_guard lock(cache_mu);
    if (cached_for != model || !cached) {
      const Batch b = make_batch(probe, 0, probe.size());
      cached = std::make_shared<const Inference>(model->infer(b.images));
      cached_for = model;
    }
    return cached;
  }
};

namespace {

using Session = Service::Session;

// Blocks the training worker at each query until the client advances.
class SessionAnnotator : public Annotator {
 public:
  explicit SessionAnnotator(Session& s) : s_(s) {}

  std::vector<Annotation> annotate(const Model& model, const Query& q) override {
    auto snap = std::make_shared<const Model>(model);
    {
      std::lock_guard lock(s_.mu);
      if (s_.stop) throw Cancelled();
      s_.snapshot = std::move(snap);
      s_.query = q;
      if (s_.pending_layer != q.layer) {
        s_.pending.clear();
        s_.pending_layer = q.layer;
      }
      std::erase_if(s_.pending, [&](const auto& kv) {
        return !std::binary_search(q.candidates.begin(), q.candidates.end(), kv.first);
      });
      s_.phase = Phase::kAwaitingSelection;
      s_.advance_requested = false;
    }
    s_.log_phase(Phase::kAwaitingSelection, {{"layer", q.layer}, {"iteration", q.iteration}});
    std::vector<Annotation> out;
    {
      std::unique_lock lock(s_.mu);
      s_.cv.notify_all();
      s_.cv.wait(lock, [&] { return s_.advance_requested || s_.stop; });
      if (!s_.advance_requested) throw Cancelled();
      for (const auto& [c, name] : s_.pending) out.push_back({c, name});
      s_.pending.clear();
      s_.advance_requested = false;
      s_.phase = Phase::kTraining;
      s_.persist_pending();
    }
    s_.log_phase(Phase::kTraining, {{"layer", q.layer}, {"iteration", q.iteration}});
    s_.cv.notify_all();
    return out;
  }

  Provenance provenance() const override { return Provenance::kHuman; }

 private:
  Session& s_;
};

void on_event(Session& s, const json& e) {
  const std::string kind = e.value("event", "");
  if (!is_boundary(kind)) return;
  {
    std::lock_guard lock(s.mu);
    ++s.boundary_count;
    if (kind == "layer_end") {
      s.last_layer_end = e;
      ++s.layer_end_count;
    }
  }
  s.cv.notify_all();
}

void fail(Session& s, const std::string& what) {
  {
    std::lock_guard lock(s.mu);
    s.phase = Phase::kFailed;
    s.error = what;
  }
  try {
    write_json(s.dir / "failed.json", {{"error", what}});
    s.log_phase(Phase::kFailed, {{"error", what}});
  } catch (const std::exception&) {
  }
  s.cv.notify_all();
}

void run_session(Session& s, std::vector<json> replay) {
  try {
    Model model = Model::build(s.arch, s.cfg.seed);
    SessionAnnotator live(s);
    ReplayAnnotator annotator(replay, &live);
    const PreMapper premap = s.pool ? make_premapper(*s.pool, s.probe) : PreMapper{};
    const RunHooks hooks{[&s] {
      std::lock_guard lock(s.mu);
      return s.stop;
    }};
    const auto res = run_algorithm1(model, s.train, annotator, s.cfg, *s.log, premap, hooks);
    save_checkpoint(model, s.dir / "model");

    json info = {{"param_digest", s.log->events_of("run_end").back().at("param_digest")},
                 {"stop_reasons", res.stop_reasons},
                 {"selection", res.selection.to_json()},
                 {"train_accuracy", accuracy(model, s.train)}};
    info["test_accuracy"] = s.test ? json(accuracy(model, *s.test)) : json(nullptr);
    write_json(s.dir / "final.json", info);
    {
      std::lock_guard lock(s.mu);
      s.snapshot = std::make_shared<const Model>(std::move(model));
      s.query.reset();
      s.final_info = info;
      s.phase = Phase::kFinished;
    }
    s.log_phase(Phase::kFinished);
    s.cv.notify_all();
  } catch (const Cancelled&) {
    s.cv.notify_all();
  } catch (const std::exception& e) {
    fail(s, e.what());
  }
}

}  // namespace

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.max_active_jobs < 1) throw InvalidArgument("max_active_jobs must be >= 1");
  if (cfg_.retry_after_seconds < 0) throw InvalidArgument("retry_after_seconds must be >= 0");
  fs::create_directories(cfg_.data_dir / "sessions");
  load_existing();
}

Service::~Service() { shutdown(); }

void Service::shutdown() {
  std::vector<std::shared_ptr<Session>> all;
  {
    std::lock_guard lock(mu_);
    for (auto& [id, s] : sessions_) all.push_back(s);
  }
  for (auto& s : all) {
    {
      std::lock_guard lock(s->mu);
      s->stop = true;
    }
    s->cv.notify_all();
  }
  for (auto& s : all)
    if (s->worker.joinable()) s->worker.join();
}

fs::path Service::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() ? path : cfg_.data_dir / path;
}

std::shared_ptr<Service::Session> Service::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("no session " + id);
  return it->second;
}

int Service::active_jobs() const {
  int n = 0;
  for (const auto& [id, s] : sessions_) {
    std::lock_guard lock(s->mu);
    if (!terminal(s->phase) && !s->stop) ++n;
  }
  return n;
}

std::shared_ptr<Service::Session> Service::open_session(const std::string& id, const json& req) {
  static const std::set<std::string> known{"dataset", "arch", "config", "pool", "limit", "probe_size"};
  if (!req.is_object()) throw InvalidArgument("session request must be a JSON object");
  for (const auto& [k, v] : req.items())
    if (!known.count(k)) throw InvalidArgument("unknown session field '" + k + "'");
  if (!req.contains("dataset") || !req["dataset"].is_string()) throw InvalidArgument("'dataset' (string) is required");

  auto s = std::make_shared<Session>();
  s->id = id;
  s->dir = cfg_.data_dir / "sessions" / id;
  s->request = req;
  s->arch = parse_arch(req.value("arch", json("mnist")));
  s->cfg = TrainConfig::from_json(req.value("config", json::object()));
  s->cfg.validate();

  const fs::path data = resolve(req["dataset"].get<std::string>());
  if (!fs::is_directory(data)) throw NotFound("dataset directory " + data.string() + " does not exist");
  s->dataset_name = data.filename().string();
  if (s->dataset_name.empty()) s->dataset_name = data.parent_path().filename().string();
  s->train = load_dataset_dir(data, Split::kTrain);
  try {
    s->test = load_dataset_dir(data, Split::kTest);
  } catch (const IoError&) {
  }
  if (req.contains("limit")) {
    const int limit = req["limit"].get<int>();
    if (limit < 2) throw InvalidArgument("limit must be >= 2");
    s->train = s->train.head(std::min(limit, s->train.size()));
  }
  const auto& a = s->arch;
  if (a.input_height != s->train.height() || a.input_width != s->train.width() ||
      a.input_channels != s->train.channels()) {
    throw InvalidArgument("arch '" + a.name + "' expects " + std::to_string(a.input_height) + "x" +
                          std::to_string(a.input_width) + "x" + std::to_string(a.input_channels) +
                          " images, dataset has " + std::to_string(s->train.height()) + "x" +
                          std::to_string(s->train.width()) + "x" + std::to_string(s->train.channels()));
  }
  if (a.classes < s->train.num_classes) throw InvalidArgument("arch has fewer classes than the dataset");
  shape_trace(a);

  OracleConfig probe_cfg;
  probe_cfg.probe_size = req.value("probe_size", 512);
  probe_cfg.seed = s->cfg.seed;
  probe_cfg.validate();
  s->probe = draw_probe(s->train, probe_cfg);
  if (req.contains("pool")) s->pool = pool_load(resolve(req["pool"].get<std::string>()));
  return s;
}

void Service::start_worker(const std::shared_ptr<Session>& s, std::vector<json> replay) {
  Session* raw = s.get();
  s->log->set_listener([raw](const json& e) { on_event(*raw, e); });
  s->worker = std::thread([raw, replay = std::move(replay)]() mutable { run_session(*raw, std::move(replay)); });
}

std::string Service::create_session(const json& request) {
  {
    std::lock_guard lock(mu_);
    if (active_jobs() + reserved_ >= cfg_.max_active_jobs) {
      throw Busy("active session limit (" + std::to_string(cfg_.max_active_jobs) + ") reached",
                 cfg_.retry_after_seconds);
    }
    ++reserved_;
  }
  struct Release {
    Service* self;
    ~Release() {
      std::lock_guard lock(self->mu_);
      --self->reserved_;
    }
  } release{this};

  std::string id;
  do {
    id = new_id();
  } while (fs::exists(cfg_.data_dir / "sessions" / id));
  auto s = open_session(id, request);
  fs::create_directories(s->dir);
  write_json(s->dir / "request.json", request);
  s->log = std::make_unique<SessionLog>(s->dir / "session.jsonl", true);
  s->persist_pending();
  {
    std::lock_guard lock(mu_);
    sessions_[id] = s;
  }
  start_worker(s, {});
  return id;
}

void Service::load_existing() {
  const fs::path root = cfg_.data_dir / "sessions";
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const fs::path dir = entry.path();
    const std::string id = dir.filename().string();
    if (!fs::exists(dir / "request.json")) continue;
    std::shared_ptr<Session> s;
    std::string load_error;
    json request;
    try {
      request = read_json(dir / "request.json");
      s = open_session(id, request);
    } catch (const std::exception& e) {
      load_error = e.what();
    }
    if (!s) {
      s = std::make_shared<Session>();
      s->id = id;
      s->dir = dir;
      s->request = request;
      try {
        s->arch = parse_arch(request.value("arch", json("mnist")));
      } catch (const std::exception&) {
      }
    }

    const bool finished = fs::exists(dir / "final.json");
    const bool failed = fs::exists(dir / "failed.json");
    if (finished || failed || !load_error.empty() || !cfg_.resume) {
      s->log = std::make_unique<SessionLog>();
      if (fs::exists(dir / "session.jsonl"))
        for (auto& e : SessionLog::parse_lines(dir / "session.jsonl")) s->log->append(std::move(e));
      if (finished && load_error.empty()) {
        try {
          s->final_info = read_json(dir / "final.json");
          s->snapshot = std::make_shared<const Model>(load_checkpoint(dir / "model"));
          s->phase = Phase::kFinished;
        } catch (const std::exception& e) {
          load_error = e.what();
        }
      }
      if (s->phase != Phase::kFinished) {
        if (failed) {
          try {
            s->error = read_json(dir / "failed.json").value("error", "failed");
          } catch (const std::exception& e) {
            s->error = e.what();
          }
          s->phase = Phase::kFailed;
        } else if (!load_error.empty()) {
          s->error = load_error;
          s->phase = Phase::kFailed;
        } else {
          // resume disabled: keep the session visible but stopped
          s->stop = true;
        }
      }
      std::lock_guard lock(mu_);
      sessions_[id] = s;
      continue;
    }

    // Re-run from whichever log recorded more answers; the other is discarded.
    const fs::path cur = dir / "session.jsonl";
    const fs::path prev = dir / "session.prev.jsonl";
    std::vector<json> cur_events, prev_events;
    if (fs::exists(cur)) cur_events = SessionLog::parse_lines(cur);
    if (fs::exists(prev)) prev_events = SessionLog::parse_lines(prev);
    std::vector<json> replay;
    if (count_responses(cur_events) >= count_responses(prev_events)) {
      replay = std::move(cur_events);
      if (fs::exists(cur)) fs::rename(cur, prev);
    } else {
      replay = std::move(prev_events);
    }
    s->log = std::make_unique<SessionLog>(cur, true);
    try {
      const json p = read_json(dir / "pending.json");
      s->pending_layer = p.value("layer", 0);
      for (const auto& sel : p.at("selections"))
        s->pending[sel.at("channel").get<int>()] = sel.at("concept").get<std::string>();
    } catch (const std::exception&) {
    }
    {
      std::lock_guard lock(mu_);
      sessions_[id] = s;
    }
    start_worker(s, std::move(replay));
  }
}

json Service::list() const {
  std::vector<std::shared_ptr<Session>> all;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, s] : sessions_) all.push_back(s);
  }
  json out = json::array();
  for (const auto& s : all) {
    std::lock_guard lock(s->mu);
    out.push_back({{"id", s->id}, {"phase", phase_name(s->phase)}, {"arch", s->arch.name}, {"dataset", s->dataset_name}});
  }
  return out;
}

json Service::status(const std::string& id) const {
  const auto s = find(id);
  const auto events = s->log->events();
  const int layers = static_cast<int>(s->arch.layers.size());
  const Folded f = fold(events, layers);

  json out = {{"id", s->id}, {"arch", s->arch.to_json()}, {"dataset", s->dataset_name}};
  out["config"] = s->cfg.to_json();
  out["layer"] = f.layer;
  out["iteration"] = f.iteration;
  out["training_iteration"] = f.training_iteration;
  json per_layer = json::array();
  for (int l = 1; l <= layers; ++l) {
    const auto& chosen = f.selected[static_cast<std::size_t>(l - 1)];
    const int k = s->arch.layers[static_cast<std::size_t>(l - 1)].channels;
    json sel = json::array();
    for (const auto& [c, ch] : chosen)
      sel.push_back({{"channel", c}, {"concept", ch.concept_name}, {"provenance", ch.provenance}, {"iteration", ch.iteration}});
    json row = {{"layer", l},
                {"channels", k},
                {"selected", sel},
                {"completeness", k > 0 ? static_cast<double>(chosen.size()) / k : 0.0}};
    const auto& end = f.layer_ends[static_cast<std::size_t>(l - 1)];
    row["stop_reason"] = end.is_null() ? json(nullptr) : end.at("reason");
    row["iterations"] = end.is_null() ? json(nullptr) : end.at("iterations");
    per_layer.push_back(std::move(row));
  }
  out["layers"] = std::move(per_layer);
  out["losses"] = f.losses;
  out["events"] = events.size();

  std::lock_guard lock(s->mu);
  out["phase"] = phase_name(s->phase);
  if (s->stop && !terminal(s->phase)) out["stopped"] = true;
  if (!s->error.empty()) out["error"] = s->error;
  if (s->query) {
    out["query"] = {{"layer", s->query->layer}, {"iteration", s->query->iteration}, {"candidates", s->query->candidates}};
  }
  json pending = json::array();
  for (const auto& [c, name] : s->pending) pending.push_back({{"channel", c}, {"concept", name}});
  out["pending"] = std::move(pending);
  if (!s->final_info.is_null()) out["final"] = s->final_info;
  return out;
}

json Service::channels(const std::string& id, int layer) const {
  const auto s = find(id);
  const int layers = static_cast<int>(s->arch.layers.size());
  if (layer < 1 || layer > layers) throw NotFound("no layer " + std::to_string(layer));
  const Folded f = fold(s->log->events(), layers);
  const auto& chosen = f.selected[static_cast<std::size_t>(layer - 1)];
  const int k = s->arch.layers[static_cast<std::size_t>(layer - 1)].channels;

  std::lock_guard lock(s->mu);
  const bool open_layer = s->phase == Phase::kAwaitingSelection && s->query && s->query->layer == layer;
  json rows = json::array();
  for (int c = 0; c < k; ++c) {
    json row = {{"channel", c}};
    auto it = chosen.find(c);
    row["selected"] = it != chosen.end();
    if (it != chosen.end()) {
      row["concept"] = it->second.concept_name;
      row["provenance"] = it->second.provenance;
      row["iteration"] = it->second.iteration;
    }
    if (open_layer) {
      row["candidate"] = std::binary_search(s->query->candidates.begin(), s->query->candidates.end(), c);
      auto p = s->pending.find(c);
      if (p != s->pending.end()) row["pending"] = p->second;
    }
    rows.push_back(std::move(row));
  }
  return {{"layer", layer}, {"open", open_layer}, {"channels", rows}};
}

std::vector<GalleryImage> Service::gallery(const std::string& id, int layer, int channel, int k,
                                           std::optional<std::uint64_t> seed) {
  if (k < 1 || k > 64) throw InvalidArgument("k must be in [1, 64]");
  const auto s = find(id);
  std::shared_ptr<const Model> model;
  Query q;
  {
    std::lock_guard lock(s->mu);
    if (s->phase != Phase::kAwaitingSelection || !s->query)
      throw Conflict("session is " + phase_name(s->phase) + ", not awaiting a selection");
    model = s->snapshot;
    q = *s->query;
  }
  check_open(q, s->log->events(), model->num_layers(), model->channels(q.layer), layer, channel);

  const auto inf = s->probe_inference(model);
  const auto& out = inf->layers[static_cast<std::size_t>(layer - 1)];
  const int n = s->probe.size();
  const int kc = model->channels(layer);
  const int h = out.pre_pool.dim(2), w = out.pre_pool.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  // one mask scale per neuron: its maximum over the probe set
  float scale = 0.0f;
  for (int p = 0; p < n; ++p) {
    const float* m = out.pre_pool.ptr() + (static_cast<std::size_t>(p) * kc + channel) * plane;
    scale = std::max(scale, *std::max_element(m, m + plane));
  }
  if (scale <= 0.0f) scale = 1.0f;

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  auto pooled = [&](int p) { return out.pooled[static_cast<std::size_t>(p) * kc + channel]; };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return pooled(a) > pooled(b); });
  const int total = std::min(k, n);
  const int top = (total + 1) / 2;
  std::vector<std::pair<int, std::string>> picks;
  for (int i = 0; i < top; ++i) picks.emplace_back(order[static_cast<std::size_t>(i)], "top");
  std::vector<int> rest(order.begin() + top, order.end());
  std::mt19937_64 rng(mix(seed.value_or(s->cfg.seed), static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(channel)));
  std::shuffle(rest.begin(), rest.end(), rng);
  for (int i = 0; i < total - top; ++i) picks.emplace_back(rest[static_cast<std::size_t>(i)], "random");

  std::vector<GalleryImage> images;
  for (const auto& [p, pick] : picks) {
    Tensor map({h, w});
    std::copy_n(out.pre_pool.ptr() + (static_cast<std::size_t>(p) * kc + channel) * plane, plane, map.ptr());
    images.push_back({p, pick, pooled(p),
                      render_overlay(s->probe.image(p), s->probe.height(), s->probe.width(), s->probe.channels(), map,
                                     scale)});
  }
  return images;
}

json Service::submit(const std::string& id, const json& body) {
  const auto s = find(id);
  if (!body.is_object()) throw InvalidArgument("body must be a JSON object");
  for (const auto& [k, v] : body.items())
    if (k != "selections" && k != "remove" && k != "clear") throw InvalidArgument("unknown field '" + k + "'");

  std::lock_guard lock(s->mu);
  if (s->phase != Phase::kAwaitingSelection || !s->query)
    throw Conflict("session is " + phase_name(s->phase) + ", not awaiting a selection");
  const Query& q = *s->query;
  const int kc = s->snapshot->channels(q.layer);

  const auto events = s->log->events();
  auto check_channel = [&](const json& item, int layer) {
    const int c = item.get<int>();
    check_open(q, events, s->snapshot->num_layers(), kc, layer, c);
    return c;
  };

  // validate everything before touching the buffer
  std::vector<std::pair<int, std::string>> adds;
  for (const auto& item : body.value("selections", json::array())) {
    const int layer = item.value("layer", q.layer);
    const int c = check_channel(item.at("channel"), layer);
    const auto& name = item.at("concept");
    if (!name.is_string() || name.get<std::string>().empty())
      throw InvalidArgument("selection for channel " + std::to_string(c) + " needs a concept name");
    adds.emplace_back(c, name.get<std::string>());
  }
  std::vector<int> removes;
  for (const auto& item : body.value("remove", json::array())) removes.push_back(check_channel(item, q.layer));

  if (body.value("clear", false)) s->pending.clear();
  for (int c : removes) s->pending.erase(c);
  for (auto& [c, name] : adds) s->pending[c] = std::move(name);
  s->pending_layer = q.layer;
  s->persist_pending();

  json pending = json::array();
  for (const auto& [c, name] : s->pending) pending.push_back({{"channel", c}, {"concept", name}});
  return {{"layer", q.layer}, {"iteration", q.iteration}, {"pending", pending}};
}

json Service::advance(const std::string& id) {
  const auto s = find(id);
  std::unique_lock lock(s->mu);
  if (s->phase != Phase::kAwaitingSelection || !s->query)
    throw Conflict("session is " + phase_name(s->phase) + ", not awaiting a selection");
  const Query q = *s->query;
  const std::size_t accepted = s->pending.size();
  const std::size_t boundary0 = s->boundary_count;
  const std::size_t ends0 = s->layer_end_count;
  s->advance_requested = true;
  s->cv.notify_all();
  // The worker logs the next iteration or the layer's end right after taking the answer.
  s->cv.wait_for(lock, std::chrono::seconds(30), [&] {
    return terminal(s->phase) || s->stop || (!s->advance_requested && s->boundary_count > boundary0);
  });
  json out = {{"phase", phase_name(s->phase)}, {"layer", q.layer}, {"iteration", q.iteration}, {"accepted", accepted}};
  out["layer_end"] = s->layer_end_count > ends0 ? s->last_layer_end : json(nullptr);
  if (!s->error.empty()) out["error"] = s->error;
  return out;
}

PredictionTrace Service::trace(const std::string& id, int sample, const std::string& split) const {
  const auto s = find(id);
  std::shared_ptr<const Model> model;
  {
    std::lock_guard lock(s->mu);
    model = s->snapshot;
  }
  if (!model) throw Conflict("no model snapshot yet; wait for the first query");
  if (split != "train" && split != "test") throw InvalidArgument("split must be 'train' or 'test'");
  if (split == "test" && !s->test) throw NotFound("dataset has no test split");
  if (s->train.size() == 0) throw Conflict("session data is not loaded");
  const LabeledDataset& ds = split == "test" ? *s->test : s->train;
  if (sample < 0 || sample >= ds.size()) throw NotFound("no sample " + std::to_string(sample) + " in " + split);
  return explain(*model, ds.image(sample), ds.labels[static_cast<std::size_t>(sample)]);
}

AttackReport Service::report(const std::string& id, const ReportQuery& q) {
  const auto s = find(id);
  std::shared_ptr<const Model> model;
  {
    std::lock_guard lock(s->mu);
    if (s->phase != Phase::kFinished) throw Conflict("session is " + phase_name(s->phase) + ", not finished");
    model = s->snapshot;
  }
  if (!s->test) throw Conflict("dataset has no test split");
  if (q.kinds.empty() || q.epsilons.empty()) throw InvalidArgument("report needs at least one attack and epsilon");

  json key = {{"kinds", q.kinds}, {"eps", q.epsilons}, {"n", q.n ? json(*q.n) : json(nullptr)}, {"seed", q.seed}};
  for (const auto& [name, path] : q.checkpoints) key["ckpt"][name] = path.string();
  {
    std::lock_guard lock(s->cache_mu);
    auto it = s->reports.find(key.dump());
    if (it != s->reports.end()) return it->second;
  }

  std::vector<AttackConfig> configs;
  for (const auto& kind : q.kinds)
    for (float eps : q.epsilons) {
      auto c = AttackConfig::defaults(attack_from(kind), eps, q.seed);
      c.validate();
      configs.push_back(c);
    }
  std::map<std::string, Model> extra;
  for (const auto& [name, path] : q.checkpoints) {
    if (name == "ours") throw InvalidArgument("'ours' is the session model");
    extra.emplace(name, load_checkpoint(resolve(path.string())));
  }
  std::map<std::string, const Model*> models{{"ours", model.get()}};
  for (const auto& [name, m] : extra) models[name] = &m;

  RobustnessOptions opt;
  opt.dataset = s->dataset_name;
  opt.n = q.n;
  opt.subsample_seed = q.seed;
  auto rep = evaluate_robustness(models, *s->test, configs, opt);
  std::lock_guard lock(s->cache_mu);
  s->reports[key.dump()] = rep;
  return rep;
}

Phase Service::wait_for(const std::string& id, Phase phase, std::chrono::milliseconds timeout) const {
  const auto s = find(id);
  std::unique_lock lock(s->mu);
  s->cv.wait_for(lock, timeout, [&] { return s->phase == phase || terminal(s->phase); });
  return s->phase;
}

}  // namespace lucid::service
