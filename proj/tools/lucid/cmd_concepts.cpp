#include <iostream>

#include "common.hpp"
#include "lucid/concepts.hpp"
#include "lucid/error.hpp"
#include "lucid/oracle.hpp"

namespace lucid::cli {

namespace {

// Selection from a session log (last run_end), a selection JSON file, or the
// checkpoint's own provenance.
SelectionState load_selection(const std::string& path, const fs::path& model_path, const Model& model) {
  if (!path.empty()) {
    if (fs::path(path).extension() == ".jsonl") {
      json last;
      for (const auto& e : SessionLog::parse_lines(path))
        if (e.value("event", "") == "run_end") last = e.at("selection");
      if (last.is_null()) throw NotFound(path + " has no run_end event");
      return SelectionState::from_json(last);
    }
    return SelectionState::from_json(read_json_file(path));
  }
  if (model.provenance.contains("selection")) return SelectionState::from_json(model.provenance["selection"]);
  if (fs::exists(model_path / "selection.json")) return SelectionState::from_json(read_json_file(model_path / "selection.json"));
  throw NotFound("no selection recorded with the model; pass --selections");
}

}  // namespace

void register_concepts(CLI::App& app) {
  auto* concepts = app.add_subcommand("concepts", "Concept pool export, matching and listing");
  concepts->require_subcommand(1);

  struct ExportOpts {
    std::string model, selections, dataset, out_pool, config;
    bool append = false;
    std::optional<int> limit;
    Overrides det;
    MatchParams match;
  };
  auto eo = std::make_shared<ExportOpts>();
  auto* exp = concepts->add_subcommand("export", "Retrain a detector for every named selected channel");
  exp->add_option("--model", eo->model, "Checkpoint or run directory")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--selections", eo->selections, "selection.json or session.jsonl (default: stored with the model)");
  exp->add_option("--dataset", eo->dataset, "Dataset the detectors are fitted on")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--out-pool", eo->out_pool, "Pool directory")->required();
  exp->add_flag("--append", eo->append, "Add to an existing pool instead of replacing it");
  exp->add_option("--limit", eo->limit, "Fit on the first N training samples")->check(CLI::PositiveNumber);
  exp->add_option("--config", eo->config, "JSON config file (section 'detector')");
  exp->add_option("--delta", eo->match.delta, "Matching distance threshold stored with each entry");
  exp->add_option("--u", eo->match.u, "Matching coverage threshold stored with each entry");
  eo->det.add<float>(exp, "--lr", "lr", "Detector learning rate");
  eo->det.add<int>(exp, "--epochs", "epochs", "Detector epochs");
  eo->det.add<int>(exp, "--batch", "batch", "Detector batch size");
  eo->det.add<std::uint64_t>(exp, "--seed", "seed", "Detector init/batching seed");
  exp->callback([eo] {
    eo->match.validate();
    DetectorTrainConfig dcfg;
    json dj = config_section(eo->config, "detector");
    dj.update(eo->det.json_value());
    for (const auto& [k, v] : dj.items()) {
      if (k == "lr") dcfg.lr = v.get<float>();
      else if (k == "epochs") dcfg.epochs = v.get<int>();
      else if (k == "batch") dcfg.batch = v.get<int>();
      else if (k == "seed") dcfg.seed = v.get<std::uint64_t>();
      else throw InvalidArgument("unknown detector config key '" + k + "'");
    }
    const Model model = load_model(eo->model);
    const SelectionState sel = load_selection(eo->selections, eo->model, model);
    const auto ds = load_split(eo->dataset, Split::kTrain, eo->limit);
    ConceptPool fresh = export_concepts(model, sel, ds, dcfg, dataset_name(eo->dataset), eo->match);
    ConceptPool pool;
    if (eo->append && fs::exists(fs::path(eo->out_pool) / "pool.json")) pool = pool_load(eo->out_pool);
    json names = json::array();
    for (auto e : fresh.entries()) {
      e.name = pool.unique_name(e.name);
      names.push_back(e.name);
      pool.add(std::move(e));
    }
    pool_save(pool, eo->out_pool);
    info("pool written", {{"out", eo->out_pool}, {"added", names}, {"size", pool.size()}});
    std::cout << json{{"pool", eo->out_pool}, {"added", names}}.dump(2) << '\n';
  });

  struct MatchOpts {
    std::string pool, model, dataset;
    int layer = 1, probe_size = 512;
    std::uint64_t seed = 0;
    std::optional<double> delta, u;
    bool matrix = false;
  };
  auto mo = std::make_shared<MatchOpts>();
  auto* match = concepts->add_subcommand("match", "Pre-match pool concepts against a model's channels");
  match->add_option("--pool", mo->pool, "Pool directory")->required()->check(CLI::ExistingDirectory);
  match->add_option("--model", mo->model, "Checkpoint or run directory")->required()->check(CLI::ExistingDirectory);
  match->add_option("--dataset", mo->dataset, "Dataset the probe set is drawn from")->required()->check(CLI::ExistingDirectory);
  match->add_option("--layer", mo->layer, "Conv layer (1-based)")->check(CLI::PositiveNumber);
  match->add_option("--delta", mo->delta, "Distance threshold (default: each entry's own)");
  match->add_option("--u", mo->u, "Coverage threshold (default: each entry's own)");
  match->add_option("--probe-size", mo->probe_size, "Probe samples")->check(CLI::PositiveNumber);
  match->add_option("--seed", mo->seed, "Probe seed");
  match->add_flag("--matrix", mo->matrix, "Also report coverage of every entry on every channel");
  match->callback([mo] {
    const Model model = load_model(mo->model);
    const ConceptPool pool = pool_load(mo->pool);
    OracleConfig pc;
    pc.probe_size = mo->probe_size;
    pc.seed = mo->seed;
    const auto probe = draw_probe(load_dataset_dir(mo->dataset, Split::kTrain), pc);
    std::optional<MatchParams> params;
    if (mo->delta || mo->u) {
      MatchParams p;
      p.delta = mo->delta.value_or(p.delta);
      p.u = mo->u.value_or(p.u);
      p.validate();
      params = p;
    }
    std::vector<int> all(static_cast<std::size_t>(model.channels(mo->layer)));
    for (std::size_t c = 0; c < all.size(); ++c) all[c] = static_cast<int>(c);
    const auto matches = premap_concepts(pool, model, mo->layer, all, probe, params);
    json out = {{"layer", mo->layer}, {"channels", all.size()}, {"matched", matches.size()}, {"matches", json::array()}};
    for (const auto& m : matches)
      out["matches"].push_back({{"channel", m.channel}, {"concept", m.concept_name}, {"coverage", m.coverage}});
    if (mo->matrix) {
      json rows = json::array();
      for (const auto& e : pool.entries()) {
        const MatchParams p = params.value_or(e.match);
        json cov = json::array();
        for (int c : all) {
          try {
            cov.push_back(match_concept(e.detector, model, mo->layer, c, probe, p).coverage);
          } catch (const ShapeError&) {
            cov.push_back(nullptr);
          }
        }
        rows.push_back({{"concept", e.name}, {"coverage", cov}});
      }
      out["matrix"] = rows;
    }
    std::cout << out.dump(2) << '\n';
  });

  auto lp = std::make_shared<std::string>();
  auto* list = concepts->add_subcommand("list", "List the entries of a pool");
  list->add_option("--pool", *lp, "Pool directory")->required()->check(CLI::ExistingDirectory);
  list->callback([lp] {
    const ConceptPool pool = pool_load(*lp);
    json out = json::array();
    for (const auto& e : pool.entries()) {
      const auto& g = e.detector.geometry();
      out.push_back({{"name", e.name},
                     {"kernel", g.kernel},
                     {"stride", g.stride},
                     {"pool", g.pool},
                     {"delta", e.match.delta},
                     {"u", e.match.u},
                     {"provenance", e.provenance},
                     {"created", e.created}});
    }
    std::cout << out.dump(2) << '\n';
  });

  auto bp = std::make_shared<std::string>();
  auto* bank = concepts->add_subcommand("bank", "Write the oracle's pattern bank as a concept pool");
  bank->add_option("--out-pool", *bp, "Pool directory")->required();
  bank->callback([bp] {
    pool_save(PatternBank::standard().as_pool(), *bp);
    info("pool written", {{"out", *bp}});
  });
}

}  // namespace lucid::cli
