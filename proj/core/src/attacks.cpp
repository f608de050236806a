#include "lucid/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "internal.hpp"

namespace lucid {

using nlohmann::json;

std::string attack_name(AttackKind k) { return k == AttackKind::kPgd ? "pgd" : "cw"; }

AttackKind attack_from(const std::string& s) {
  if (s == "pgd") return AttackKind::kPgd;
  if (s == "cw") return AttackKind::kCw;
  throw InvalidArgument("unknown attack '" + s + "' (expected pgd or cw)");
}

AttackConfig AttackConfig::defaults(AttackKind kind, float epsilon, std::uint64_t seed) {
  AttackConfig c;
  c.kind = kind;
  c.epsilon = epsilon;
  c.seed = seed;
  if (kind == AttackKind::kPgd) {
    c.steps = 40, c.alpha = epsilon / 20, c.random_start = true;
  } else {
    c.steps = 100, c.alpha = epsilon / 25, c.random_start = false;
  }
  c.kappa = 0;
  return c;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw InvalidArgument("epsilon must be a finite value >= 0");
  if (steps < 0) throw InvalidArgument("steps must be >= 0");
  if (steps > 0 && epsilon > 0 && !(alpha > 0)) throw InvalidArgument("step size must be > 0 when steps > 0");
  if (!(kappa >= 0)) throw InvalidArgument("kappa must be >= 0");
}

json AttackConfig::to_json() const {
  return {{"kind", attack_name(kind)}, {"epsilon", epsilon},         {"steps", steps}, {"alpha", alpha},
          {"random_start", random_start}, {"kappa", kappa}, {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const json& j, const AttackConfig& base) {
  if (!j.is_object()) throw InvalidArgument("attack config must be a JSON object");
  static const std::set<std::string> known{"kind", "epsilon", "steps", "alpha", "random_start", "kappa", "seed"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InvalidArgument("unknown attack config key '" + k + "'");
  AttackConfig c = base;
  try {
    if (j.contains("kind")) c.kind = attack_from(j["kind"].get<std::string>());
    if (j.contains("epsilon")) c.epsilon = j["epsilon"].get<float>();
    if (j.contains("steps")) c.steps = j["steps"].get<int>();
    if (j.contains("alpha")) c.alpha = j["alpha"].get<float>();
    if (j.contains("random_start")) c.random_start = j["random_start"].get<bool>();
    if (j.contains("kappa")) c.kappa = j["kappa"].get<float>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad attack config: ") + e.what());
  }
  c.validate();
  return c;
}

LogitFn model_logits(const Model& model) {
  return [&model](Tape& tape, const Var& x) { return model.forward(tape, x).logits; };
}

Tensor attack(const LogitFn& fn, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  cfg.validate();
  if (x.rank() < 1 || x.dim(0) != static_cast<int>(labels.size())) {
    throw ShapeError("attack: " + std::to_string(labels.size()) + " labels for input " + shape_str(x.shape()));
  }
  const float eps = cfg.epsilon;
  const std::size_t n = x.size();
  Tensor lo(x.shape()), hi(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = std::max(0.0f, x[i] - eps);
    hi[i] = std::min(1.0f, x[i] + eps);
  }
  Tensor adv = x;
  if (eps == 0) return adv;
  if (cfg.random_start) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<float> u(-eps, eps);
    for (std::size_t i = 0; i < n; ++i) adv[i] = std::clamp(x[i] + u(rng), lo[i], hi[i]);
  }
  const float dir = cfg.kind == AttackKind::kPgd ? cfg.alpha : -cfg.alpha;
  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    const Var xv = tape.input("x", adv, true);
    const Var logits = fn(tape, xv);
    const Var loss = cfg.kind == AttackKind::kPgd ? softmax_cross_entropy(logits, labels, Reduction::kSum)
                                                  : cw_margin(logits, labels, cfg.kappa);
    const Gradients g = tape.backward(loss);
    const Tensor& gx = g.input("x");
    for (std::size_t i = 0; i < n; ++i) {
      const float s = gx[i] > 0 ? 1.0f : (gx[i] < 0 ? -1.0f : 0.0f);
      adv[i] = std::clamp(adv[i] + dir * s, lo[i], hi[i]);
    }
  }
  return adv;
}

Tensor pgd_attack(const LogitFn& fn, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  if (cfg.kind != AttackKind::kPgd) throw InvalidArgument("pgd_attack needs a pgd config");
  return attack(fn, x, labels, cfg);
}

Tensor cw_attack(const LogitFn& fn, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  if (cfg.kind != AttackKind::kCw) throw InvalidArgument("cw_attack needs a cw config");
  return attack(fn, x, labels, cfg);
}

Tensor pgd_attack(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  return pgd_attack(model_logits(model), x, labels, cfg);
}

Tensor cw_attack(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  return cw_attack(model_logits(model), x, labels, cfg);
}

double adversarial_accuracy(const Model& model, const LabeledDataset& ds, const AttackConfig& cfg, int batch) {
  if (ds.size() == 0) throw InvalidArgument("adversarial accuracy over an empty dataset");
  if (batch < 1) throw InvalidArgument("batch must be >= 1");
  const auto fn = model_logits(model);
  int correct = 0;
  for (int b0 = 0; b0 < ds.size(); b0 += batch) {
    const Batch bt = make_batch(ds, b0, std::min(ds.size(), b0 + batch));
    AttackConfig c = cfg;
    c.seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(b0), 0xA77AC4);
    const Tensor adv = attack(fn, bt.images, bt.labels, c);
    const auto pred = predict(model, adv);
    for (int i = 0; i < bt.size(); ++i) correct += pred[static_cast<std::size_t>(i)] == bt.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / ds.size();
}

// ---- reports ---------------------------------------------------------------------------

std::string AttackReport::to_csv() const {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.dataset << ',' << r.variant << ',' << r.attack << ',' << std::setprecision(6) << r.epsilon << ','
       << std::fixed << std::setprecision(6) << r.accuracy << std::defaultfloat << ',' << r.n << ',' << r.seed << '\n';
  }
  return os.str();
}

AttackReport AttackReport::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw FormatError("attack report must start with the header row");
  AttackReport rep;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw FormatError("attack report line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    try {
      rep.rows.push_back({f[0], f[1], f[2], std::stod(f[3]), std::stod(f[4]), std::stoi(f[5]), std::stoull(f[6])});
    } catch (const std::exception&) {
      throw FormatError("attack report line " + std::to_string(lineno) + " is malformed");
    }
  }
  return rep;
}

json AttackReport::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"dataset", r.dataset}, {"variant", r.variant}, {"attack", r.attack}, {"epsilon", r.epsilon},
                  {"accuracy", r.accuracy}, {"n", r.n}, {"seed", r.seed}});
  }
  return {{"rows", rs}, {"partial", partial}, {"missing", missing}};
}

void AttackReport::append(const AttackReport& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  partial = partial || other.partial;
  for (const auto& m : other.missing)
    if (std::find(missing.begin(), missing.end(), m) == missing.end()) missing.push_back(m);
}

std::vector<AttackRow> AttackReport::select(const std::string& dataset, const std::string& variant,
                                            const std::string& attack, double epsilon) const {
  std::vector<AttackRow> out;
  for (const auto& r : rows) {
    if (r.dataset == dataset && r.variant == variant && r.attack == attack && std::abs(r.epsilon - epsilon) < 1e-6) {
      out.push_back(r);
    }
  }
  return out;
}

AttackReport evaluate_robustness(const std::map<std::string, const Model*>& models, const LabeledDataset& test,
                                 const std::vector<AttackConfig>& configs, const RobustnessOptions& opt) {
  for (const auto& c : configs) c.validate();
  if (test.size() == 0) throw InvalidArgument("robustness evaluation over an empty dataset");
  LabeledDataset eval = test;
  if (opt.n) {
    if (*opt.n < 1) throw InvalidArgument("subsample size must be >= 1");
    eval = test.subset(sample_indices(test.size(), *opt.n, opt.subsample_seed));
  }
  AttackReport rep;
  for (const auto& v : opt.expected) {
    auto it = models.find(v);
    if (it == models.end() || it->second == nullptr) rep.missing.push_back(v);
  }
  rep.partial = !rep.missing.empty();
  const Shape data_shape{eval.height(), eval.width(), eval.channels()};
  for (const auto& [name, m] : models) {
    if (!m) continue;
    const auto& a = m->arch();
    const Shape s{a.input_height, a.input_width, a.input_channels};
    if (s != data_shape) {
      throw ShapeError("variant '" + name + "' expects input " + shape_str(s) + " but the dataset has " +
                       shape_str(data_shape));
    }
  }
  // Expected variants first, in their listed order, then any extras.
  std::vector<std::string> order;
  for (const auto& v : opt.expected)
    if (models.count(v) && models.at(v)) order.push_back(v);
  for (const auto& [name, m] : models)
    if (m && std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);

  for (const auto& v : order) {
    const Model& m = *models.at(v);
    for (const auto& c : configs) {
      AttackRow r;
      r.dataset = opt.dataset;
      r.variant = v;
      r.attack = attack_name(c.kind);
      r.epsilon = c.epsilon;
      r.n = eval.size();
      r.seed = c.seed;
      r.accuracy = c.epsilon == 0 ? accuracy(m, eval) : adversarial_accuracy(m, eval, c, opt.batch);
      rep.rows.push_back(std::move(r));
    }
  }
  return rep;
}

}  // namespace lucid
