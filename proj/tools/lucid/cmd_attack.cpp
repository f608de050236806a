#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "common.hpp"
#include "lucid/attacks.hpp"
#include "lucid/error.hpp"

namespace lucid::cli {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Per (dataset, variant, attack, epsilon): median accuracy over the report's seeds.
json median_table(const AttackReport& rep) {
  std::map<std::tuple<std::string, std::string, std::string, double>, std::vector<double>> groups;
  std::vector<std::tuple<std::string, std::string, std::string, double>> order;
  for (const auto& r : rep.rows) {
    const auto key = std::make_tuple(r.dataset, r.variant, r.attack, r.epsilon);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(r.accuracy);
  }
  json out = json::array();
  for (const auto& key : order) {
    const auto& acc = groups[key];
    out.push_back({{"dataset", std::get<0>(key)},
                   {"variant", std::get<1>(key)},
                   {"attack", std::get<2>(key)},
                   {"epsilon", std::get<3>(key)},
                   {"median_accuracy", median(acc)},
                   {"seeds", acc.size()}});
  }
  return out;
}

}  // namespace

void register_attack(CLI::App& app) {
  auto* attack = app.add_subcommand("attack", "Adversarial robustness experiments");
  attack->require_subcommand(1);

  struct RunOpts {
    std::vector<std::string> models{"baseline", "sparse", "ours"}, kinds{"pgd", "cw"};
    std::vector<float> eps{0.0f, 0.1f, 0.2f, 0.3f, 0.4f};
    std::string models_dir = ".", dataset, out = "report.csv", json_out, config;
    int seeds = 1, batch = 128;
    std::uint64_t first_seed = 0;
    std::optional<int> n;
    Overrides attack;
  };
  auto o = std::make_shared<RunOpts>();
  auto* run = attack->add_subcommand("run", "Accuracy under PGD / C&W-type attacks over an epsilon grid");
  run->add_option("--models", o->models, "Variants: name (looked up in --models-dir) or name=path")->delimiter(',');
  run->add_option("--models-dir", o->models_dir, "Directory holding one run directory per variant name");
  run->add_option("--dataset", o->dataset, "Dataset directory (test split is attacked)")->required()->check(CLI::ExistingDirectory);
  run->add_option("--kinds", o->kinds, "Attacks")->delimiter(',')->check(CLI::IsMember({"pgd", "cw"}));
  run->add_option("--eps", o->eps, "L-infinity budgets in [0, 1]")->delimiter(',')->check(CLI::Range(0.0f, 1.0f));
  run->add_option("--seeds", o->seeds, "Number of attack/subsample seeds")->check(CLI::PositiveNumber);
  run->add_option("--first-seed", o->first_seed, "First seed of the range");
  run->add_option("--n", o->n, "Attack a seeded subsample of N test images")->check(CLI::PositiveNumber);
  run->add_option("--batch", o->batch, "Attack batch size")->check(CLI::PositiveNumber);
  run->add_option("--out", o->out, "CSV report path");
  run->add_option("--json", o->json_out, "Also write the report (plus per-seed medians) as JSON");
  run->add_option("--config", o->config, "JSON config file (section 'attack'; per-kind sub-objects allowed)");
  o->attack.add<int>(run, "--steps", "steps", "Attack iterations");
  o->attack.add<float>(run, "--alpha", "alpha", "Step size");
  o->attack.add<float>(run, "--kappa", "kappa", "C&W confidence margin");
  o->attack.add<bool>(run, "--random-start", "random_start", "Uniform start inside the epsilon ball");
  run->callback([o] {
    const json section = config_section(o->config, "attack");
    for (const char* k : {"kind", "epsilon", "seed"})
      if (section.contains(k)) throw InvalidArgument(std::string("'") + k + "' is set on the command line, not in the config");

    std::map<std::string, Model> loaded;
    for (const auto& m : o->models) {
      const auto eq = m.find('=');
      const std::string name = m.substr(0, eq);
      const fs::path path = eq == std::string::npos ? fs::path(o->models_dir) / name : fs::path(m.substr(eq + 1));
      if (loaded.count(name)) throw InvalidArgument("variant '" + name + "' given twice");
      loaded.emplace(name, load_model(path));
    }
    std::map<std::string, const Model*> models;
    for (const auto& [name, m] : loaded) models[name] = &m;

    const auto test = load_dataset_dir(o->dataset, Split::kTest);
    AttackReport report;
    for (int s = 0; s < o->seeds; ++s) {
      const std::uint64_t seed = o->first_seed + static_cast<std::uint64_t>(s);
      std::vector<AttackConfig> configs;
      for (const auto& kind : o->kinds) {
        json overlay = section.contains(kind) ? section[kind] : (section.contains("pgd") || section.contains("cw") ? json::object() : section);
        overlay.update(o->attack.json_value());
        for (float eps : o->eps)
          configs.push_back(AttackConfig::from_json(overlay, AttackConfig::defaults(attack_from(kind), eps, seed)));
      }
      RobustnessOptions opt;
      opt.dataset = dataset_name(o->dataset);
      opt.n = o->n;
      opt.subsample_seed = seed;
      opt.batch = o->batch;
      const auto rep = evaluate_robustness(models, test, configs, opt);
      report.append(rep);
      info("seed done", {{"seed", seed}, {"rows", rep.rows.size()}});
    }
    write_text_file(o->out, report.to_csv());
    if (report.partial) diag("warning", "partial report", {{"missing", report.missing}});
    json j = report.to_json();
    j["medians"] = median_table(report);
    if (!o->json_out.empty()) write_json_file(o->json_out, j);
    std::cout << report.to_csv();
  });

  auto path = std::make_shared<std::string>();
  auto* summary = attack->add_subcommand("summary", "Median accuracy over seeds for every grid cell of a CSV report");
  summary->add_option("--report", *path, "CSV report")->required()->check(CLI::ExistingFile);
  summary->callback([path] { std::cout << median_table(AttackReport::from_csv(read_text(*path))).dump(2) << '\n'; });
}

}  // namespace lucid::cli
