#include <chrono>
#include <iostream>
#include <thread>

#include "common.hpp"
#include "lucid/concepts.hpp"
#include "lucid/error.hpp"
#include "lucid/oracle.hpp"
#include "lucid/service.hpp"
#include "lucid/train.hpp"

namespace lucid::cli {

namespace {

ArchSpec pick_arch(const std::string& name, const LabeledDataset& ds) {
  if (name != "auto") return ArchSpec::preset(name);
  return ArchSpec::preset(ds.channels() == 3 ? "cmnist" : "mnist");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Common {
  std::string dataset, arch = "auto", out, config;
  std::optional<int> limit;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--dataset", c.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--arch", c.arch, "Architecture preset")->check(CLI::IsMember({"auto", "cmnist", "mnist"}));
  cmd->add_option("--out", c.out, "Run directory (model/, logs, summary.json)")->required();
  cmd->add_option("--config", c.config, "JSON config file; explicit flags take precedence");
  cmd->add_option("--limit", c.limit, "Use only the first N training samples")->check(CLI::PositiveNumber);
}

json summarize(const Model& model, const LabeledDataset& train, const std::optional<LabeledDataset>& test,
               const std::string& variant, const std::string& dataset, double secs) {
  json s = {{"variant", variant},
            {"dataset", dataset},
            {"arch", model.arch().name},
            {"param_digest", hex_digest(model.param_digest())},
            {"train_accuracy", accuracy(model, train)},
            {"train_seconds", secs}};
  s["test_accuracy"] = test ? json(accuracy(model, *test)) : json(nullptr);
  return s;
}

std::optional<LabeledDataset> try_test(const fs::path& dir) {
  try {
    return load_dataset_dir(dir, Split::kTest);
  } catch (const IoError&) {
    return std::nullopt;
  }
}

struct InterpOpts : Common {
  std::string annotator = "oracle", pool, replay, host = "127.0.0.1", data_dir;
  int port = 8080;
  std::optional<int> probe_size;
  std::optional<double> tau;
  std::optional<std::uint64_t> oracle_seed;
  std::optional<double> delta, u;
  Overrides train;
};

void run_interp(const InterpOpts& o) {
  TrainConfig cfg = TrainConfig::from_json(o.train.json_value(), TrainConfig::from_json(config_section(o.config, "train")));
  const auto train = load_split(o.dataset, Split::kTrain, o.limit);
  const auto test = try_test(o.dataset);
  const ArchSpec arch = pick_arch(o.arch, train);
  const fs::path out(o.out);
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();

  if (o.annotator == "service") {
    if (!o.replay.empty()) throw InvalidArgument("--replay needs the oracle annotator");
    service::ServiceConfig scfg;
    scfg.data_dir = o.data_dir.empty() ? out / "service" : fs::path(o.data_dir);
    scfg.resume = false;
    service::Service svc(scfg);
    json req = {{"dataset", fs::absolute(o.dataset).string()}, {"arch", arch.to_json()}, {"config", cfg.to_json()},
                {"probe_size", o.probe_size.value_or(OracleConfig{}.probe_size)}};
    if (!o.pool.empty()) req["pool"] = fs::absolute(o.pool).string();
    if (o.limit) req["limit"] = *o.limit;
    const std::string id = svc.create_session(req);
    service::HttpServer http(svc);
    const int port = http.bind(o.host, o.port);
    std::thread server([&] { http.run(); });
    info("waiting for annotations", {{"session", id}, {"url", "http://" + o.host + ":" + std::to_string(port) + "/sessions/" + id}});
    service::Phase p;
    while (!((p = svc.wait_for(id, service::Phase::kFinished, std::chrono::seconds(5))) == service::Phase::kFinished ||
             p == service::Phase::kFailed)) {
    }
    http.stop();
    server.join();
    const json st = svc.status(id);
    if (p == service::Phase::kFailed) throw ConsistencyError("session failed: " + st.value("error", std::string()));
    const fs::path sdir = scfg.data_dir / "sessions" / id;
    fs::remove_all(out / "model");
    fs::copy(sdir / "model", out / "model", fs::copy_options::recursive);
    fs::copy_file(sdir / "session.jsonl", out / "session.jsonl", fs::copy_options::overwrite_existing);
    Model model = load_checkpoint(out / "model");
    write_json_file(out / "selection.json", model.provenance.value("selection", json::object()));
    json summary = summarize(model, train, test, "ours", dataset_name(o.dataset), seconds_since(t0));
    summary["stop_reasons"] = st["final"]["stop_reasons"];
    summary["annotator"] = "service";
    write_json_file(out / "summary.json", summary);
    std::cout << summary.dump(2) << '\n';
    return;
  }

  OracleConfig ocfg;
  ocfg.seed = cfg.seed;
  const json oracle_section = config_section(o.config, "oracle");
  for (const auto& [k, v] : oracle_section.items()) {
    if (k == "probe_size") ocfg.probe_size = v.get<int>();
    else if (k == "tau") ocfg.tau = v.get<double>();
    else if (k == "seed") ocfg.seed = v.get<std::uint64_t>();
    else throw InvalidArgument("unknown oracle config key '" + k + "'");
  }
  if (o.probe_size) ocfg.probe_size = *o.probe_size;
  if (o.tau) ocfg.tau = *o.tau;
  if (o.oracle_seed) ocfg.seed = *o.oracle_seed;
  ocfg.validate();
  const LabeledDataset probe = draw_probe(train, ocfg);
  OracleAnnotator oracle(PatternBank::standard(), probe, ocfg);

  PreMapper premap;
  if (!o.pool.empty()) {
    std::optional<MatchParams> mp;
    if (o.delta || o.u) {
      MatchParams p;
      p.delta = o.delta.value_or(p.delta);
      p.u = o.u.value_or(p.u);
      p.validate();
      mp = p;
    }
    premap = make_premapper(pool_load(o.pool), probe, mp);
  }

  std::vector<json> recorded;
  if (!o.replay.empty()) recorded = SessionLog::parse_lines(o.replay);
  ReplayAnnotator annotator(recorded, &oracle);

  Model model = Model::build(arch, cfg.seed);
  SessionLog log(out / "session.jsonl", true);
  log.set_listener([](const json& e) {
    const std::string kind = e.value("event", "");
    if (kind == "response" || kind == "premap" || kind == "layer_end")
      info(kind, [&] {
        json f = e;
        f.erase("event");
        f.erase("seq");
        return f;
      }());
  });
  const auto res = run_algorithm1(model, train, annotator, cfg, log, premap);
  save_checkpoint(model, out / "model");
  write_json_file(out / "selection.json", res.selection.to_json());
  json summary = summarize(model, train, test, "ours", dataset_name(o.dataset), seconds_since(t0));
  summary["stop_reasons"] = res.stop_reasons;
  summary["annotator"] = "oracle";
  summary["config"] = cfg.to_json();
  summary["oracle"] = {{"probe_size", ocfg.probe_size}, {"tau", ocfg.tau}, {"seed", ocfg.seed}};
  if (!recorded.empty()) {
    std::string want;
    for (const auto& e : recorded)
      if (e.value("event", "") == "run_end") want = e.at("param_digest").get<std::string>();
    summary["replay_digest_match"] = want == summary["param_digest"].get<std::string>();
  }
  write_json_file(out / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  if (summary.contains("replay_digest_match") && !summary["replay_digest_match"].get<bool>())
    throw ConsistencyError("replayed run ended with a different parameter digest than the recording");
}

struct ConvOpts : Common {
  Overrides conv;
};

void run_conventional(const ConvOpts& o, Variant v) {
  const ConventionalConfig cfg = ConventionalConfig::from_json(
      o.conv.json_value(), ConventionalConfig::from_json(config_section(o.config, "conventional"), {}));
  const auto train = load_split(o.dataset, Split::kTrain, o.limit);
  const auto test = try_test(o.dataset);
  const fs::path out(o.out);
  fs::create_directories(out);
  Model model = Model::build(pick_arch(o.arch, train), cfg.seed);
  SessionLog log(out / "train.jsonl", true);
  const auto t0 = std::chrono::steady_clock::now();
  train_conventional(model, train, v, cfg, &log);
  save_checkpoint(model, out / "model");
  json summary = summarize(model, train, test, variant_name(v), dataset_name(o.dataset), seconds_since(t0));
  summary["config"] = cfg.to_json();
  write_json_file(out / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
}

}  // namespace

void register_train(CLI::App& app) {
  auto* train = app.add_subcommand("train", "Train a model variant");
  train->require_subcommand(1);

  auto io = std::make_shared<InterpOpts>();
  auto* interp = train->add_subcommand("interp", "Layer-wise interpretable training with an annotator in the loop");
  add_common(interp, *io);
  interp->add_option("--annotator", io->annotator, "Who answers the queries")->check(CLI::IsMember({"oracle", "service"}));
  interp->add_option("--pool", io->pool, "Concept pool pre-matched before each query")->check(CLI::ExistingDirectory);
  interp->add_option("--delta", io->delta, "Pool matching distance threshold (overrides the entries')");
  interp->add_option("--u", io->u, "Pool matching coverage threshold (overrides the entries')");
  interp->add_option("--probe-size", io->probe_size, "Probe samples for the oracle and pool matching")->check(CLI::PositiveNumber);
  interp->add_option("--tau", io->tau, "Oracle correlation threshold");
  interp->add_option("--oracle-seed", io->oracle_seed, "Probe-set seed (default: training seed)");
  interp->add_option("--replay", io->replay, "Replay recorded responses from a session log first")->check(CLI::ExistingFile);
  interp->add_option("--port", io->port, "HTTP port for --annotator service");
  interp->add_option("--host", io->host, "HTTP host for --annotator service");
  interp->add_option("--data-dir", io->data_dir, "Service data directory (default: <out>/service)");
  io->train.add<float>(interp, "--lr", "lr", "Adam learning rate");
  io->train.add<float>(interp, "--lambda-s", "lambda_s", "Sparsity loss weight");
  io->train.add<float>(interp, "--lambda-c", "lambda_c", "Correlation loss weight");
  io->train.add<int>(interp, "--batch", "batch", "Mini-batch size");
  io->train.add<int>(interp, "--epochs", "epochs_per_iteration", "Epochs per iteration");
  io->train.add<int>(interp, "--max-iterations", "max_iterations_per_layer", "Iteration cap per layer");
  io->train.add<std::string>(interp, "--on-incomplete", "on_incomplete", "keep | prune");
  io->train.add<std::uint64_t>(interp, "--seed", "seed", "Model and batching seed");
  io->train.add<int>(interp, "--fc-finetune-epochs", "fc_finetune_epochs", "FC fine-tune epochs after the layer loop");
  interp->callback([io] { run_interp(*io); });

  for (Variant v : {Variant::kBaseline, Variant::kSparse}) {
    auto co = std::make_shared<ConvOpts>();
    auto* cmd = train->add_subcommand(variant_name(v), v == Variant::kBaseline
                                                           ? "Conventional training on cross-entropy"
                                                           : "Conventional training with an L1 penalty on every conv layer");
    add_common(cmd, *co);
    co->conv.add<float>(cmd, "--lr", "lr", "Adam learning rate");
    co->conv.add<int>(cmd, "--batch", "batch", "Mini-batch size");
    co->conv.add<int>(cmd, "--epochs", "epochs", "Training epochs");
    co->conv.add<std::uint64_t>(cmd, "--seed", "seed", "Model and batching seed");
    if (v == Variant::kSparse) co->conv.add<float>(cmd, "--lambda-s", "lambda_s", "Sparsity loss weight");
    cmd->callback([co, v] { run_conventional(*co, v); });
  }
}

}  // namespace lucid::cli
