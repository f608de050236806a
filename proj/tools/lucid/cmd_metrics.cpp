#include <iostream>

#include "common.hpp"
#include "lucid/concepts.hpp"
#include "lucid/error.hpp"
#include "lucid/metrics.hpp"
#include "lucid/train.hpp"

namespace lucid::cli {

namespace {

// "self", a checkpoint/run directory, or a concept pool directory.
ReferenceSystem load_reference(const std::string& ref, const Model& model) {
  if (ref == "self") return ReferenceSystem::from_model(model);
  const fs::path p(ref);
  if (fs::exists(p / "pool.json")) return ReferenceSystem::from_pool(pool_load(p), model);
  const Model other = load_model(p);
  if (!(other.arch() == model.arch())) throw ShapeError("reference model architecture differs from the model's");
  return ReferenceSystem::from_model(other);
}

Split split_from(const std::string& s) { return s == "train" ? Split::kTrain : Split::kTest; }

}  // namespace

void register_metrics(CLI::App& app) {
  auto* metrics = app.add_subcommand("metrics", "Interpretability degree and prediction traces");
  metrics->require_subcommand(1);

  struct DegreeOpts {
    std::string model, reference = "self", dataset, split = "test", kind = "l2";
    std::vector<double> deltas{0.1};
    std::optional<int> n;
    std::uint64_t seed = 0;
  };
  auto d = std::make_shared<DegreeOpts>();
  auto* degree = metrics->add_subcommand("degree", "Share of samples whose observed sequence stays within delta of the reference");
  degree->add_option("--model", d->model, "Checkpoint or run directory")->required()->check(CLI::ExistingDirectory);
  degree->add_option("--reference", d->reference, "'self', a checkpoint/run directory, or a concept pool directory");
  degree->add_option("--dataset", d->dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  degree->add_option("--split", d->split, "Dataset split")->check(CLI::IsMember({"train", "test"}));
  degree->add_option("--delta", d->deltas, "Distance thresholds (comma separated)")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);
  degree->add_option("--kind", d->kind, "Sequence distance")->check(CLI::IsMember({"l1", "l2", "ce"}));
  degree->add_option("--n", d->n, "Evaluate a seeded subsample of N samples")->check(CLI::PositiveNumber);
  degree->add_option("--seed", d->seed, "Subsample seed");
  degree->callback([d] {
    const Model model = load_model(d->model);
    const ReferenceSystem ref = load_reference(d->reference, model);
    auto ds = load_dataset_dir(d->dataset, split_from(d->split));
    if (d->n) {
      const auto idx = sample_indices(ds.size(), *d->n, d->seed);
      ds = ds.subset(idx);
    }
    const auto reports = interpretability_degrees(model, ref, ds, d->deltas, dist_from(d->kind));
    json out = json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
      json r = reports[i].to_json();
      r["delta"] = d->deltas[i];
      r["kind"] = d->kind;
      out.push_back(std::move(r));
    }
    std::cout << out.dump(2) << '\n';
  });

  struct ExplainOpts {
    std::string model, dataset, split = "test", out;
    std::optional<int> sample, cls;
    int top = 3;
  };
  auto e = std::make_shared<ExplainOpts>();
  auto* explain_cmd = metrics->add_subcommand("explain", "Layer-by-layer concept contributions to one prediction");
  explain_cmd->add_option("--model", e->model, "Checkpoint or run directory")->required()->check(CLI::ExistingDirectory);
  explain_cmd->add_option("--dataset", e->dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  explain_cmd->add_option("--split", e->split, "Dataset split")->check(CLI::IsMember({"train", "test"}));
  auto* sample = explain_cmd->add_option("--sample", e->sample, "Sample index")->check(CLI::NonNegativeNumber);
  explain_cmd->add_option("--class", e->cls, "Use the first correctly classified sample of this class")
      ->check(CLI::NonNegativeNumber)
      ->excludes(sample);
  explain_cmd->add_option("--top", e->top, "Contributors listed per layer")->check(CLI::PositiveNumber);
  explain_cmd->add_option("--out", e->out, "Write trace.json and overlay PNGs here");
  explain_cmd->callback([e] {
    const Model model = load_model(e->model);
    const auto ds = load_dataset_dir(e->dataset, split_from(e->split));
    int idx = e->sample.value_or(0);
    if (e->cls) {
      idx = -1;
      for (int begin = 0; begin < ds.size() && idx < 0; begin += 256) {
        const int end = std::min(ds.size(), begin + 256);
        const auto pred = predict(model, make_batch(ds, begin, end).images);
        for (int i = begin; i < end; ++i)
          if (ds.labels[static_cast<std::size_t>(i)] == *e->cls && pred[static_cast<std::size_t>(i - begin)] == *e->cls) {
            idx = i;
            break;
          }
      }
      if (idx < 0) throw NotFound("no correctly classified sample of class " + std::to_string(*e->cls));
    }
    if (idx >= ds.size()) throw NotFound("sample " + std::to_string(idx) + " out of range");
    const auto trace = explain(model, ds.image(idx), ds.labels[static_cast<std::size_t>(idx)]);
    json out = trace.to_json(false);
    out["sample"] = idx;
    out["split"] = e->split;
    json tops = json::array();
    for (const auto& lt : trace.layers) {
      json t = json::array();
      const auto rank = lt.ranking();
      for (int i = 0; i < std::min<int>(e->top, static_cast<int>(rank.size())); ++i) {
        const auto& ct = lt.channels[static_cast<std::size_t>(rank[static_cast<std::size_t>(i)])];
        t.push_back({{"channel", ct.channel}, {"concept", ct.concept_name}, {"contribution", ct.contribution}});
      }
      tops.push_back({{"layer", lt.layer}, {"top", t}});
    }
    out["top"] = tops;
    if (!e->out.empty()) {
      save_trace(trace, e->out);
      info("trace written", {{"out", e->out}});
    }
    std::cout << out.dump(2) << '\n';
  });
}

}  // namespace lucid::cli
