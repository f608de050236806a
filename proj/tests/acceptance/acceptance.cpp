// Evaluates a reference-run directory (scripts/reference_runs.sh) against
// the acceptance criteria and prints one PASS/FAIL line per criterion,
// followed by indented detail lines.
#include <CLI11.hpp>
#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

#include "lucid/attacks.hpp"
#include "lucid/concepts.hpp"
#include "lucid/metrics.hpp"
#include "lucid/oracle.hpp"
#include "lucid/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace lucid;

namespace {

const std::array<std::string, 2> kDatasets{"cmnist", "mnist"};
const std::array<std::string, 3> kVariants{"baseline", "sparse", "ours"};

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;
  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { details.push_back("     " + what); }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  return json::parse(in);
}

std::vector<fs::path> seed_dirs(const fs::path& runs, const std::string& ds) {
  std::vector<fs::path> out;
  if (!fs::exists(runs / ds)) return out;
  for (const auto& e : fs::directory_iterator(runs / ds))
    if (e.is_directory() && e.path().filename().string().rfind("seed", 0) == 0) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

class Reports {
 public:
  explicit Reports(const fs::path& runs) {
    for (const auto& ds : kDatasets)
      for (const auto& dir : seed_dirs(runs, ds)) {
        if (!fs::exists(dir / "report.csv")) continue;
        std::ifstream in(dir / "report.csv");
        std::stringstream ss;
        ss << in.rdbuf();
        for (const auto& r : AttackReport::from_csv(ss.str()).rows)
          acc_[key(r.dataset == "cmnist" ? "cmnist" : ds, r.variant, r.attack, r.epsilon)].push_back(r.accuracy);
      }
  }
  // Median over seeds; NaN when no seed has the cell.
  double operator()(const std::string& ds, const std::string& variant, const std::string& attack, double eps) const {
    const auto it = acc_.find(key(ds, variant, attack, eps));
    return it == acc_.end() ? std::numeric_limits<double>::quiet_NaN() : median(it->second);
  }
  std::size_t seeds(const std::string& ds, const std::string& variant, const std::string& attack, double eps) const {
    const auto it = acc_.find(key(ds, variant, attack, eps));
    return it == acc_.end() ? 0 : it->second.size();
  }

 private:
  static std::string key(const std::string& ds, const std::string& v, const std::string& a, double eps) {
    return ds + "/" + v + "/" + a + "/" + fmt(eps, 2);
  }
  std::map<std::string, std::vector<double>> acc_;
};

LabeledDataset dataset(const fs::path& runs, const std::string& ds, Split split) {
  return load_dataset_dir(runs / "data" / ds, split);
}

Model run_model(const fs::path& runs, const std::string& ds, const std::string& variant) {
  return load_checkpoint(runs / ds / "seed0" / variant / "model");
}

// ---- criteria ----------------------------------------------------------------------------

Outcome clean_accuracy(const fs::path& runs) {
  Outcome o;
  for (const auto& ds : kDatasets)
    for (const auto& v : kVariants) {
      std::vector<double> acc;
      double slowest = 0.0;
      for (const auto& dir : seed_dirs(runs, ds)) {
        if (!fs::exists(dir / v / "summary.json")) continue;
        const json s = read_json(dir / v / "summary.json");
        acc.push_back(s.at("test_accuracy").get<double>());
        slowest = std::max(slowest, s.at("train_seconds").get<double>());
      }
      if (acc.empty()) {
        o.require(false, ds + " " + v + ": no runs");
        continue;
      }
      o.require(median(acc) >= 0.975, ds + " " + v + ": median test accuracy " + fmt(median(acc)) + " >= 0.975 (" +
                                           std::to_string(acc.size()) + " seeds)");
      o.require(slowest <= 900.0, ds + " " + v + ": slowest training " + fmt(slowest, 1) + " s <= 900 s");
    }
  return o;
}

void margin(Outcome& o, const Reports& r, const std::string& ds, const std::string& attack, double eps, double m) {
  const double ours = r(ds, "ours", attack, eps), base = r(ds, "baseline", attack, eps);
  o.require(ours >= base + m, ds + " " + attack + " eps " + fmt(eps, 1) + ": ours " + fmt(ours) + " >= baseline " +
                                  fmt(base) + " + " + fmt(m, 2) + " (" +
                                  std::to_string(r.seeds(ds, "ours", attack, eps)) + " seeds)");
}

Outcome pgd_ordering(const Reports& r) {
  Outcome o;
  margin(o, r, "mnist", "pgd", 0.1, 0.04);
  margin(o, r, "mnist", "pgd", 0.2, 0.08);
  margin(o, r, "cmnist", "pgd", 0.1, 0.10);
  return o;
}

Outcome cw_ordering(const Reports& r) {
  Outcome o;
  margin(o, r, "cmnist", "cw", 0.2, 0.10);
  for (double eps : {0.1, 0.2, 0.3, 0.4}) {
    const double ours = r("cmnist", "ours", "cw", eps), sparse = r("cmnist", "sparse", "cw", eps),
                 base = r("cmnist", "baseline", "cw", eps);
    o.require(ours >= sparse - 0.02 && sparse >= base - 0.02,
              "cmnist cw eps " + fmt(eps, 1) + ": ours " + fmt(ours) + " >= sparse " + fmt(sparse) + " >= baseline " +
                  fmt(base) + " (slack 0.02)");
  }
  return o;
}

Outcome oracle_end_to_end(const fs::path& runs, const fs::path& golden_log, const fs::path& mnist_dir) {
  Outcome o;
  const auto events = SessionLog::parse_lines(runs / "cmnist" / "seed0" / "ours" / "session.jsonl");
  std::map<int, std::string> names;
  json end;
  for (const auto& e : events) {
    const std::string kind = e.value("event", "");
    if ((kind == "response" || kind == "premap") && e.at("layer") == 1)
      for (const auto& s : e.at("selections")) names[s.at("channel").get<int>()] = s.at("concept").get<std::string>();
    if (kind == "layer_end" && e.at("layer") == 1) end = e;
  }
  std::set<std::string> distinct;
  std::string listing;
  for (const auto& [c, n] : names) {
    distinct.insert(n);
    listing += " " + std::to_string(c) + "=" + n;
  }
  const int iterations = end.is_null() ? -1 : end.at("iterations").get<int>();
  o.require(names.size() == 5 && distinct.size() == 5,
            "layer 1: " + std::to_string(names.size()) + " of 5 channels named, " + std::to_string(distinct.size()) +
                " distinct concepts:" + listing);
  o.require(iterations >= 1 && iterations <= 5,
            "layer 1 closed after " + std::to_string(iterations) + " iterations (" +
                (end.is_null() ? std::string("no layer_end") : end.at("reason").get<std::string>()) + ")");

  // Where the unnamed channels stand against the bank on the final model.
  const Model model = run_model(runs, "cmnist", "ours");
  const auto train = dataset(runs, "cmnist", Split::kTrain);
  OracleConfig ocfg;
  ocfg.seed = model.seed();
  const auto probe = draw_probe(train, ocfg);
  std::vector<int> all(static_cast<std::size_t>(model.channels(1)));
  std::iota(all.begin(), all.end(), 0);
  OracleAnnotator oracle(PatternBank::standard(), probe, ocfg);
  oracle.annotate(model, Query{1, 1, all});
  const auto& decisions = oracle.last_decisions();
  std::string best;
  for (const auto& d : decisions)
    best += " " + std::to_string(d.channel) + ":" + (d.concept_name.empty() ? "-" : d.concept_name) + "(" +
            fmt(d.correlation, 2) + ")";
  o.note("final model, best bank correlation per channel:" + best);

  // Golden log: replay its responses on freshly synthesized data.
  const auto golden = SessionLog::parse_lines(golden_log);
  const json& start = golden.front();
  CmnistSpec spec;
  spec.seed = 0;
  const auto golden_train = synthesize_cmnist(load_dataset_dir(mnist_dir, Split::kTrain), spec);
  Model replayed = Model::build(ArchSpec::from_json(start.at("arch")), start.at("model_seed").get<std::uint64_t>());
  ReplayAnnotator replay(golden, nullptr);
  SessionLog log;
  run_algorithm1(replayed, golden_train, replay, TrainConfig::from_json(start.at("config")), log);
  o.require(log.events() == golden, "golden session log replays bit-exactly (" + std::to_string(golden.size()) +
                                        " events, digest " + golden.back().at("param_digest").get<std::string>() +
                                        ")");
  return o;
}

Outcome concept_reuse(const fs::path& runs) {
  Outcome o;
  const ConceptPool pool = pool_load(runs / "pool");
  const Model model = run_model(runs, "mnist", "ours");
  OracleConfig pc;
  const auto probe = draw_probe(dataset(runs, "mnist", Split::kTrain), pc);
  std::set<int> line_channels, color_channels;
  int lines = 0, colors = 0;
  for (const auto& e : pool.entries()) {
    const std::string concept_name = e.provenance.value("concept", e.name);
    const bool is_line = concept_name.rfind("line-", 0) == 0, is_color = concept_name.rfind("color-", 0) == 0;
    lines += is_line;
    colors += is_color;
    std::string hits;
    for (int c = 0; c < model.channels(1); ++c) {
      const auto m = match_concept(e.detector, model, 1, c, probe, MatchParams{});
      if (!m.matched) continue;
      hits += " " + std::to_string(c);
      (is_line ? line_channels : color_channels).insert(c);
    }
    o.note(e.name + " matches MNIST layer-1 channels:" + (hits.empty() ? std::string(" none") : hits));
  }
  // The fixed bank detectors (color = channel dominance, line = oriented
  // kernel on mean intensity) on the same channels, for comparison.
  const ConceptPool bank = PatternBank::standard().as_pool();
  for (const auto& e : bank.entries()) {
    int hits = 0;
    for (int c = 0; c < model.channels(1); ++c) hits += match_concept(e.detector, model, 1, c, probe, MatchParams{}).matched;
    o.note("bank " + e.name + " matches " + std::to_string(hits) + " MNIST layer-1 channels");
  }
  o.require(line_channels.size() >= 2, std::to_string(lines) + " exported line detectors pre-match " +
                                           std::to_string(line_channels.size()) + " channels (>= 2)");
  o.require(colors > 0 && color_channels.empty(), std::to_string(colors) + " exported color detectors pre-match " +
                                                      std::to_string(color_channels.size()) + " channels (0)");
  return o;
}

// Each property is a set of unit tests in one test binary.
Outcome property_suite(const fs::path& test_dir) {
  struct Property {
    std::string what, binary, filter;
    int tests;
  };
  const std::vector<Property> props{
      {"gradient checks on 50 random micro-nets", "test_diffcore", "GradientProperty.RandomMicroNetsMatchFiniteDifferences", 1},
      {"loss decomposition identity", "test_train", "LossTotal.DecompositionIdentity", 1},
      {"L_c = 0 for an empty selection", "test_train", "LossCorrelation.EmptySelectionIsZero", 1},
      {"degree nesting in delta, self-reference u = 1", "test_metrics",
       "MetricsData.DegreeIsNestedInDelta:MetricsData.SelfReferenceHasDegreeOne", 2},
      {"attack box and epsilon constraints", "test_attacks", "AttackData.BoxAndEpsilonConstraintsHoldExactly", 1},
      {"1-D attacks equal the exhaustive grid", "test_attacks", "*.EqualsExhaustiveWorstCaseOnOnePixel", 2},
      {"IDX round trip", "test_data", "SaveIdx.RoundTripIsByteExact", 1},
      {"checkpoint round trip", "test_model", "Checkpoint.RoundTripIsBitExact", 1},
      {"concept pool round trip", "test_concepts", "ConceptPool.SaveLoadRoundTripIsBitExact", 1},
      {"trace logit decomposition", "test_metrics", "MetricsData.FinalContributionsReproduceLogit", 1},
  };
  Outcome o;
  const std::regex passed(R"(\[  PASSED  \] (\d+) test)");
  for (const auto& p : props) {
    const fs::path bin = test_dir / p.binary;
    const std::string cmd = "'" + bin.string() + "' --gtest_brief=1 --gtest_filter='" + p.filter + "' 2>&1";
    std::string out;
    int status = -1;
    if (FILE* f = popen(cmd.c_str(), "r")) {
      std::array<char, 512> buf{};
      while (fgets(buf.data(), buf.size(), f)) out += buf.data();
      status = pclose(f);
    }
    std::smatch m;
    const int n = std::regex_search(out, m, passed) ? std::stoi(m[1]) : 0;
    o.require(status == 0 && n == p.tests, p.what + " (" + std::to_string(n) + "/" + std::to_string(p.tests) + " tests)");
  }
  return o;
}

Outcome interpretation_trace(const fs::path& runs) {
  Outcome o;
  const Model model = run_model(runs, "mnist", "ours");
  const auto test = dataset(runs, "mnist", Split::kTest);
  int idx = -1;
  for (int begin = 0; begin < test.size() && idx < 0; begin += 256) {
    const int end = std::min(test.size(), begin + 256);
    const auto pred = predict(model, make_batch(test, begin, end).images);
    for (int i = begin; i < end && idx < 0; ++i)
      if (test.labels[static_cast<std::size_t>(i)] == 2 && pred[static_cast<std::size_t>(i - begin)] == 2) idx = i;
  }
  if (idx < 0) {
    o.require(false, "no correctly classified test '2'");
    return o;
  }
  const auto trace = explain(model, test.image(idx), 2);
  const auto& l2 = trace.layers.at(1);
  const auto rank = l2.ranking();
  std::string listing;
  bool named = rank.size() >= 3;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, rank.size()); ++i) {
    const auto& ct = l2.channels[static_cast<std::size_t>(rank[i])];
    named = named && !ct.concept_name.empty();
    listing += " " + std::to_string(ct.channel) + "=" + (ct.concept_name.empty() ? "(unnamed)" : ct.concept_name) +
               " (" + fmt(ct.contribution, 3) + ")";
  }
  o.require(named, "test sample " + std::to_string(idx) + ", top-3 layer-2 channels:" + listing);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria over a reference-run directory"};
  std::string runs, golden = LUCID_GOLDEN_LOG, mnist = LUCID_MNIST_DIR, tests = LUCID_UNIT_TEST_DIR;
  app.add_option("--runs", runs, "Output directory of scripts/reference_runs.sh")->required()->check(CLI::ExistingDirectory);
  app.add_option("--golden", golden, "Golden CMNIST session log")->check(CLI::ExistingFile);
  app.add_option("--mnist", mnist, "MNIST directory the golden run was synthesized from")->check(CLI::ExistingDirectory);
  app.add_option("--unit-tests", tests, "Directory holding the unit test binaries")->check(CLI::ExistingDirectory);
  CLI11_PARSE(app, argc, argv);

  const Reports reports(runs);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"clean accuracy", [&] { return clean_accuracy(runs); }},
      {"PGD robustness ordering", [&] { return pgd_ordering(reports); }},
      {"C&W-type robustness ordering", [&] { return cw_ordering(reports); }},
      {"oracle end-to-end on CMNIST", [&] { return oracle_end_to_end(runs, golden, mnist); }},
      {"concept reuse CMNIST -> MNIST", [&] { return concept_reuse(runs); }},
      {"property suite", [&] { return property_suite(tests); }},
      {"interpretation trace", [&] { return interpretation_trace(runs); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.require(false, std::string("error: ") + e.what());
    }
    failed += !o.pass;
    std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << '\n';
    for (const auto& d : o.details) std::cout << "    " << d << '\n';
    std::cout.flush();
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
