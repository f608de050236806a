#include "lucid/train.hpp"

#include "internal.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lucid {

// ---- losses -------------------------------------------------------------------------

template <typename T>
BasicVar<T> loss_sparsity(const BasicVar<T>& x, std::span<const int> unselected) {
  if (unselected.empty()) return x.tape()->constant(BasicTensor<T>::scalar(T(0)));
  const T m = static_cast<T>(x.value().dim(0));
  return scale(l1_channels(x, unselected), T(1) / (m * static_cast<T>(unselected.size())));
}

template <typename T>
BasicVar<T> loss_correlation(const BasicVar<T>& pooled, std::span<const int> selected,
                             std::span<const int> unselected) {
  if (selected.empty() || unselected.empty()) return pooled.tape()->constant(BasicTensor<T>::scalar(T(0)));
  BasicVar<T> acc;
  for (int j : selected) {
    const auto a = column(pooled, j);
    for (int jb : unselected) {
      auto term = abs(pearson_corr(a, column(pooled, jb)));
      acc = acc.valid() ? add(acc, term) : term;
    }
  }
  return scale(acc, T(1) / static_cast<T>(selected.size() * unselected.size()));
}

template <typename T>
LossTerms<T> loss_total(const ForwardTrace<T>& trace, std::span<const int> labels, int layer,
                        std::span<const int> selected, std::span<const int> unselected, T lambda_s, T lambda_c,
                        PredLoss pred) {
  if (layer < 1 || layer > static_cast<int>(trace.layers.size())) {
    throw InvalidArgument("loss layer " + std::to_string(layer) + " out of range");
  }
  LossTerms<T> out;
  if (pred == PredLoss::kCrossEntropy) {
    out.pred = softmax_cross_entropy(trace.logits, labels);
  } else {
    const auto& z = trace.logits.value();
    BasicTensor<T> onehot(z.shape());
    for (std::size_t r = 0; r < labels.size(); ++r) onehot[r * static_cast<std::size_t>(z.dim(1)) + labels[r]] = T(1);
    out.pred = mse(trace.logits, trace.logits.tape()->constant(std::move(onehot)));
  }
  const auto& lv = trace.layers[static_cast<std::size_t>(layer - 1)];
  out.sparsity = loss_sparsity(lv.post_pool, unselected);
  out.correlation = loss_correlation(spatial_mean(lv.post_pool), selected, unselected);
  out.total = add(add(out.pred, scale(out.sparsity, lambda_s)), scale(out.correlation, lambda_c));
  return out;
}

#define LUCID_INSTANTIATE(T)                                                                                  \
  template BasicVar<T> loss_sparsity(const BasicVar<T>&, std::span<const int>);                               \
  template BasicVar<T> loss_correlation(const BasicVar<T>&, std::span<const int>, std::span<const int>);      \
  template LossTerms<T> loss_total(const ForwardTrace<T>&, std::span<const int>, int, std::span<const int>, \
                                   std::span<const int>, T, T, PredLoss);
LUCID_INSTANTIATE(float)
LUCID_INSTANTIATE(double)
#undef LUCID_INSTANTIATE

// ---- selection state ---------------------------------------------------------------------

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kHuman: return "human";
    case Provenance::kOracle: return "oracle";
    case Provenance::kPool: return "pool";
  }
  return "human";
}

Provenance provenance_from(const std::string& s) {
  if (s == "human") return Provenance::kHuman;
  if (s == "oracle") return Provenance::kOracle;
  if (s == "pool") return Provenance::kPool;
  throw InvalidArgument("unknown provenance '" + s + "'");
}

SelectionState::SelectionState(std::vector<int> channels_per_layer)
    : channels_(std::move(channels_per_layer)), sel_(channels_.size()) {}

SelectionState SelectionState::for_model(const Model& m) {
  std::vector<int> ch;
  for (int l = 1; l <= m.num_layers(); ++l) ch.push_back(m.channels(l));
  return SelectionState(std::move(ch));
}

void SelectionState::check(int layer, int channel) const {
  if (layer < 1 || layer > num_layers()) throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
  if (channel < 0 || channel >= channels_[static_cast<std::size_t>(layer - 1)]) {
    throw InvalidArgument("channel " + std::to_string(channel) + " out of range for layer " + std::to_string(layer));
  }
}

int SelectionState::channels(int layer) const {
  check(layer, 0);
  return channels_[static_cast<std::size_t>(layer - 1)];
}

bool SelectionState::is_selected(int layer, int channel) const {
  check(layer, channel);
  return sel_[static_cast<std::size_t>(layer - 1)].count(channel) != 0;
}

void SelectionState::add(int layer, Selection s) {
  check(layer, s.channel);
  if (s.concept_name.empty()) throw InvalidArgument("concept name must not be empty");
  auto& m = sel_[static_cast<std::size_t>(layer - 1)];
  if (m.count(s.channel)) {
    throw Conflict("channel " + std::to_string(s.channel) + " of layer " + std::to_string(layer) +
                   " is already selected");
  }
  m.emplace(s.channel, std::move(s));
}

std::vector<int> SelectionState::selected(int layer) const {
  std::vector<int> out;
  for (const auto& [c, s] : entries(layer)) out.push_back(c);
  return out;
}

std::vector<int> SelectionState::unselected(int layer) const {
  std::vector<int> out;
  const auto& m = entries(layer);
  for (int c = 0; c < channels(layer); ++c)
    if (!m.count(c)) out.push_back(c);
  return out;
}

const std::map<int, Selection>& SelectionState::entries(int layer) const {
  check(layer, 0);
  return sel_[static_cast<std::size_t>(layer - 1)];
}

double SelectionState::completeness(int layer) const {
  return static_cast<double>(entries(layer).size()) / static_cast<double>(channels(layer));
}

json SelectionState::to_json() const {
  json layers = json::array();
  for (int l = 1; l <= num_layers(); ++l) {
    json sel = json::array();
    for (const auto& [c, s] : entries(l)) {
      sel.push_back({{"channel", c},
                     {"concept", s.concept_name},
                     {"provenance", provenance_name(s.provenance)},
                     {"iteration", s.iteration}});
    }
    layers.push_back({{"layer", l}, {"channels", channels(l)}, {"selected", sel}});
  }
  return {{"layers", layers}};
}

SelectionState SelectionState::from_json(const json& j) {
  try {
    std::vector<int> ch;
    for (const auto& l : j.at("layers")) ch.push_back(l.at("channels").get<int>());
    SelectionState st(ch);
    int layer = 1;
    for (const auto& l : j.at("layers")) {
      for (const auto& s : l.at("selected")) {
        st.add(layer, Selection{s.at("channel").get<int>(), s.at("concept").get<std::string>(),
                                provenance_from(s.value("provenance", "human")), s.value("iteration", 0)});
      }
      ++layer;
    }
    return st;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed selection state: ") + e.what());
  }
}

bool SelectionState::operator==(const SelectionState& o) const { return to_json() == o.to_json(); }

// ---- config ----------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0)) throw InvalidArgument("lr must be positive");
  if (!(lambda_s >= 0) || !(lambda_c >= 0)) throw InvalidArgument("lambda_s and lambda_c must be >= 0");
  if (batch < 2) throw InvalidArgument("batch must be >= 2");
  if (epochs_per_iteration < 1) throw InvalidArgument("epochs_per_iteration must be >= 1");
  if (max_iterations_per_layer < 1) throw InvalidArgument("max_iterations_per_layer must be >= 1");
  if (fc_finetune_epochs < 0 || prune_finetune_epochs < 0) throw InvalidArgument("fine-tune epochs must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"lambda_s", lambda_s},
          {"lambda_c", lambda_c},
          {"batch", batch},
          {"epochs_per_iteration", epochs_per_iteration},
          {"max_iterations_per_layer", max_iterations_per_layer},
          {"on_incomplete", on_incomplete == OnIncomplete::kKeep ? "keep" : "prune"},
          {"seed", seed},
          {"fc_finetune_epochs", fc_finetune_epochs},
          {"prune_finetune_epochs", prune_finetune_epochs},
          {"pred_loss", pred_loss == PredLoss::kCrossEntropy ? "cross_entropy" : "mse"},
          {"pred_only_first_iteration", pred_only_first_iteration}};
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  TrainConfig c = base;
  if (!j.is_object()) throw InvalidArgument("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<float>();
      else if (key == "lambda_s") c.lambda_s = v.get<float>();
      else if (key == "lambda_c") c.lambda_c = v.get<float>();
      else if (key == "batch") c.batch = v.get<int>();
      else if (key == "epochs_per_iteration") c.epochs_per_iteration = v.get<int>();
      else if (key == "max_iterations_per_layer") c.max_iterations_per_layer = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "fc_finetune_epochs") c.fc_finetune_epochs = v.get<int>();
      else if (key == "prune_finetune_epochs") c.prune_finetune_epochs = v.get<int>();
      else if (key == "pred_only_first_iteration") c.pred_only_first_iteration = v.get<bool>();
      else if (key == "on_incomplete") {
        const auto s = v.get<std::string>();
        if (s != "keep" && s != "prune") throw InvalidArgument("on_incomplete must be keep or prune");
        c.on_incomplete = s == "keep" ? OnIncomplete::kKeep : OnIncomplete::kPrune;
      } else if (key == "pred_loss") {
        const auto s = v.get<std::string>();
        if (s != "cross_entropy" && s != "mse") throw InvalidArgument("pred_loss must be cross_entropy or mse");
        c.pred_loss = s == "mse" ? PredLoss::kMse : PredLoss::kCrossEntropy;
      } else {
        throw InvalidArgument("unknown train config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad train config value: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- session log ---------------------------------------------------------------------

SessionLog::SessionLog(const fs::path& file, bool truncate) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  out_ = std::make_unique<std::ofstream>(file, truncate ? std::ios::trunc : std::ios::app);
  if (!*out_) throw IoError("cannot open session log " + file.string());
}

void SessionLog::append(json event) {
  Listener l;
  {
    std::lock_guard lock(mu_);
    event["seq"] = events_.size();
    if (out_) {
      *out_ << event.dump() << '\n';
      out_->flush();
      if (!*out_) throw IoError("session log write failed");
    }
    events_.push_back(event);
    l = listener_;
  }
  if (l) l(event);
}

std::vector<json> SessionLog::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

std::vector<json> SessionLog::events_of(const std::string& kind) const {
  std::lock_guard lock(mu_);
  std::vector<json> out;
  for (const auto& e : events_)
    if (e.value("event", "") == kind) out.push_back(e);
  return out;
}

std::size_t SessionLog::size() const {
  std::lock_guard lock(mu_);
  return events_.size();
}

void SessionLog::set_listener(Listener l) {
  std::lock_guard lock(mu_);
  listener_ = std::move(l);
}

std::vector<json> SessionLog::parse_lines(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read session log " + file.string());
  std::vector<json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception&) {
      // A crash can leave a partial final line; anything earlier is corruption.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw FormatError("session log " + file.string() + " line " + std::to_string(lineno) + " is not JSON");
    }
  }
  return out;
}

// ---- replay --------------------------------------------------------------------------

ReplayAnnotator::ReplayAnnotator(const std::vector<json>& events, Annotator* live) : live_(live) {
  for (const auto& e : events) {
    if (e.value("event", "") != "response") continue;
    Recorded r{e.at("layer").get<int>(), e.at("iteration").get<int>(),
               provenance_from(e.value("provenance", "human")), {}};
    for (const auto& s : e.at("selections"))
      r.selections.push_back({s.at("channel").get<int>(), s.at("concept").get<std::string>()});
    recorded_.push_back(std::move(r));
  }
}

std::vector<Annotation> ReplayAnnotator::annotate(const Model& model, const Query& q) {
  if (next_ < recorded_.size()) {
    const auto& r = recorded_[next_++];
    if (r.layer != q.layer || r.iteration != q.iteration) {
      throw ConsistencyError("replay diverged: recorded response for layer " + std::to_string(r.layer) +
                             " iteration " + std::to_string(r.iteration) + ", queried layer " +
                             std::to_string(q.layer) + " iteration " + std::to_string(q.iteration));
    }
    last_ = r.provenance;
    return r.selections;
  }
  if (!live_) throw NotFound("replay log exhausted and no live annotator attached");
  auto out = live_->annotate(model, q);
  last_ = live_->provenance();
  return out;
}

Provenance ReplayAnnotator::provenance() const { return last_; }

// ---- training loops ------------------------------------------------------------------

namespace {

using detail::hex64;
using detail::mix_seed;

struct EpochLoss {
  double total = 0, pred = 0, sparsity = 0, correlation = 0;
};

using LossBuilder = std::function<LossTerms<float>(const ForwardTrace<float>&, std::span<const int>)>;

EpochLoss run_epoch(Model& model, Adam& adam, const LabeledDataset& ds, const BatchPlan& plan, int epoch, float lr,
                    const LossBuilder& build, const RunHooks& hooks) {
  EpochLoss acc;
  int batches = 0;
  for (const auto& idx : plan.epoch(epoch)) {
    if (hooks.cancelled && hooks.cancelled()) throw Cancelled();
    const Batch b = make_batch(ds, idx);
    Tape tape;
    const auto trace = model.forward(tape, tape.input("x", b.images));
    const auto terms = build(trace, b.labels);
    adam.step(model.params(), tape.backward(terms.total), lr);
    acc.total += terms.total.value().item();
    acc.pred += terms.pred.value().item();
    acc.sparsity += terms.sparsity.value().item();
    acc.correlation += terms.correlation.value().item();
    ++batches;
  }
  if (batches > 0) {
    acc.total /= batches;
    acc.pred /= batches;
    acc.sparsity /= batches;
    acc.correlation /= batches;
  }
  return acc;
}

json loss_json(const EpochLoss& l) {
  return {{"loss", l.total}, {"pred", l.pred}, {"sparsity", l.sparsity}, {"correlation", l.correlation}};
}

LossBuilder pred_only(PredLoss kind) {
  return [kind](const ForwardTrace<float>& tr, std::span<const int> labels) {
    return loss_total<float>(tr, labels, 1, {}, {}, 0.0f, 0.0f, kind);
  };
}

void check_compatible(const Model& model, const LabeledDataset& ds) {
  const auto& a = model.arch();
  if (ds.height() != a.input_height || ds.width() != a.input_width || ds.channels() != a.input_channels) {
    throw ShapeError("dataset images " + shape_str(ds.images.shape()) + " do not fit architecture input [" +
                     std::to_string(a.input_height) + "," + std::to_string(a.input_width) + "," +
                     std::to_string(a.input_channels) + "]");
  }
  for (int y : ds.labels)
    if (y >= a.classes) throw ConsistencyError("label " + std::to_string(y) + " exceeds model classes");
}

json annotations_json(const std::vector<Annotation>& anns) {
  json out = json::array();
  for (const auto& a : anns) out.push_back({{"channel", a.channel}, {"concept", a.concept_name}});
  return out;
}

// Validates a batch of annotations against the current complement and adds
// them; returns the channels added.
std::vector<int> accept(SelectionState& sel, Model& model, int layer, int iteration, Provenance prov,
                        const std::vector<Annotation>& anns) {
  const auto open = sel.unselected(layer);
  std::vector<int> added;
  for (const auto& a : anns) {
    if (!std::binary_search(open.begin(), open.end(), a.channel)) {
      throw InvalidArgument("annotation for channel " + std::to_string(a.channel) + " of layer " +
                            std::to_string(layer) + " which is not an open candidate");
    }
    if (std::find(added.begin(), added.end(), a.channel) != added.end()) continue;  // idempotent per channel
    sel.add(layer, Selection{a.channel, a.concept_name, prov, iteration});
    model.set_concept_name(layer, a.channel, a.concept_name);
    added.push_back(a.channel);
  }
  std::sort(added.begin(), added.end());
  if (!added.empty()) model.freeze_channels(layer, added);
  return added;
}

}  // namespace

Algorithm1Result run_algorithm1(Model& model, const LabeledDataset& train, Annotator& annotator,
                                const TrainConfig& cfg, SessionLog& log, const PreMapper& premap,
                                const RunHooks& hooks) {
  cfg.validate();
  check_compatible(model, train);
  model.unfreeze_all();
  Algorithm1Result res{SelectionState::for_model(model), {}};
  SelectionState& sel = res.selection;

  log.append({{"event", "run_start"},
              {"config", cfg.to_json()},
              {"arch", model.arch().to_json()},
              {"model_seed", model.seed()},
              {"initial_digest", hex64(model.param_digest())},
              {"dataset", {{"size", train.size()}, {"split", split_name(train.split)}}}});

  const int layers = model.num_layers();
  for (int layer = 1; layer <= layers; ++layer) {
    Adam adam;
    std::string reason;
    int iteration = 0;
    while (reason.empty()) {
      ++iteration;
      log.append({{"event", "iteration_start"}, {"layer", layer}, {"iteration", iteration}});
      const BatchPlan plan(train.size(), cfg.batch, mix_seed(cfg.seed, static_cast<std::uint64_t>(layer), iteration),
                           true);
      for (int e = 0; e < cfg.epochs_per_iteration; ++e) {
        const auto s = sel.selected(layer);
        const auto u = sel.unselected(layer);
        const auto l = run_epoch(
            model, adam, train, plan, e, cfg.lr,
            [&](const ForwardTrace<float>& tr, std::span<const int> labels) {
              const bool reg = iteration > 1 || !cfg.pred_only_first_iteration;
              return loss_total<float>(tr, labels, layer, s, u, reg ? cfg.lambda_s : 0.0f, reg ? cfg.lambda_c : 0.0f,
                                       cfg.pred_loss);
            },
            hooks);
        json ev = {{"event", "epoch"}, {"layer", layer}, {"iteration", iteration}, {"epoch", e + 1}};
        ev.update(loss_json(l));
        log.append(std::move(ev));
      }

      std::size_t grown = 0;
      Query q{layer, iteration, sel.unselected(layer)};
      if (premap && !q.candidates.empty()) {
        const auto anns = premap(model, q);
        const auto added = accept(sel, model, layer, iteration, Provenance::kPool, anns);
        log.append({{"event", "premap"}, {"layer", layer}, {"iteration", iteration}, {"selections", annotations_json(anns)}});
        if (!added.empty()) log.append({{"event", "freeze"}, {"layer", layer}, {"iteration", iteration}, {"channels", added}});
        grown += added.size();
        q.candidates = sel.unselected(layer);
      }
      if (!q.candidates.empty()) {
        log.append({{"event", "query"}, {"layer", layer}, {"iteration", iteration}, {"candidates", q.candidates}});
        const auto anns = annotator.annotate(model, q);
        const Provenance prov = annotator.provenance();
        log.append({{"event", "response"},
                    {"layer", layer},
                    {"iteration", iteration},
                    {"provenance", provenance_name(prov)},
                    {"selections", annotations_json(anns)}});
        const auto added = accept(sel, model, layer, iteration, prov, anns);
        if (!added.empty()) log.append({{"event", "freeze"}, {"layer", layer}, {"iteration", iteration}, {"channels", added}});
        grown += added.size();
      }

      if (sel.unselected(layer).empty()) {
        reason = "all_selected";
      } else if (grown == 0 && iteration > 1) {
        reason = "no_growth";
      } else if (iteration >= cfg.max_iterations_per_layer) {
        reason = "max_iterations";
      }
    }
    model.freeze_layer(layer);
    res.stop_reasons.push_back(reason);
    log.append({{"event", "layer_end"},
                {"layer", layer},
                {"reason", reason},
                {"iterations", iteration},
                {"selected", sel.selected(layer)},
                {"completeness", sel.completeness(layer)}});
  }

  if (cfg.fc_finetune_epochs > 0) {
    Adam adam;
    const BatchPlan plan(train.size(), cfg.batch, mix_seed(cfg.seed, 0xFC, 0), true);
    for (int e = 0; e < cfg.fc_finetune_epochs; ++e) {
      const auto l = run_epoch(model, adam, train, plan, e, cfg.lr, pred_only(cfg.pred_loss), hooks);
      json ev = {{"event", "fc_finetune"}, {"epoch", e + 1}};
      ev.update(loss_json(l));
      log.append(std::move(ev));
    }
  }

  apply_incomplete_policy(model, sel, train, cfg, &log);

  model.provenance["training"] = "algorithm1";
  model.provenance["train_config"] = cfg.to_json();
  model.provenance["selection"] = sel.to_json();
  log.append({{"event", "run_end"}, {"param_digest", hex64(model.param_digest())}, {"selection", sel.to_json()}});
  return res;
}

void apply_incomplete_policy(Model& model, const SelectionState& sel, const LabeledDataset& train,
                             const TrainConfig& cfg, SessionLog* log) {
  json completeness = json::array();
  bool complete = true;
  for (int l = 1; l <= sel.num_layers(); ++l) {
    completeness.push_back({{"layer", l}, {"selected", sel.selected(l).size()}, {"channels", sel.channels(l)},
                            {"ratio", sel.completeness(l)}});
    complete = complete && sel.unselected(l).empty();
  }
  const bool prune = cfg.on_incomplete == OnIncomplete::kPrune && !complete;
  if (prune) {
    for (int l = 1; l <= sel.num_layers(); ++l) {
      const auto u = sel.unselected(l);
      auto& w = model.conv_weight(l);
      auto& b = model.conv_bias(l);
      for (int c : u) {
        std::fill(w.value.ptr() + c * w.row_size(), w.value.ptr() + (c + 1) * w.row_size(), 0.0f);
        b.value[static_cast<std::size_t>(c)] = 0.0f;
      }
      model.freeze_channels(l, u);
    }
    Adam adam;
    const BatchPlan plan(train.size(), cfg.batch, mix_seed(cfg.seed, 0x9E, 0), true);
    for (int e = 0; e < cfg.prune_finetune_epochs; ++e) {
      const auto l = run_epoch(model, adam, train, plan, e, cfg.lr, pred_only(cfg.pred_loss), {});
      if (log) {
        json ev = {{"event", "prune_finetune"}, {"epoch", e + 1}};
        ev.update(loss_json(l));
        log->append(std::move(ev));
      }
    }
  }
  if (log) {
    log->append({{"event", "policy"},
                 {"policy", cfg.on_incomplete == OnIncomplete::kKeep ? "keep" : "prune"},
                 {"applied", prune},
                 {"completeness", completeness}});
  }
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kSparse: return "sparse";
    case Variant::kOurs: return "ours";
  }
  return "baseline";
}

Variant variant_from(const std::string& s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "sparse") return Variant::kSparse;
  if (s == "ours") return Variant::kOurs;
  throw InvalidArgument("unknown model variant '" + s + "' (expected baseline, sparse or ours)");
}

void ConventionalConfig::validate() const {
  if (!(lr > 0)) throw InvalidArgument("lr must be positive");
  if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
  if (batch < 2) throw InvalidArgument("batch must be >= 2");
  if (!(lambda_s >= 0)) throw InvalidArgument("lambda_s must be >= 0");
}

json ConventionalConfig::to_json() const {
  return {{"lr", lr}, {"batch", batch}, {"epochs", epochs}, {"lambda_s", lambda_s}, {"seed", seed}};
}

ConventionalConfig ConventionalConfig::from_json(const json& j, const ConventionalConfig& base) {
  ConventionalConfig c = base;
  if (!j.is_object()) throw InvalidArgument("training config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<float>();
      else if (key == "batch") c.batch = v.get<int>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "lambda_s") c.lambda_s = v.get<float>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw InvalidArgument("unknown training config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad training config value: ") + e.what());
  }
  c.validate();
  return c;
}

void train_conventional(Model& model, const LabeledDataset& train, Variant variant, const ConventionalConfig& cfg,
                        SessionLog* log, const RunHooks& hooks) {
  if (variant == Variant::kOurs) throw InvalidArgument("the interpretable variant is trained by run_algorithm1");
  cfg.validate();
  check_compatible(model, train);
  model.unfreeze_all();
  const bool sparse = variant == Variant::kSparse;
  LossBuilder build = [&](const ForwardTrace<float>& tr, std::span<const int> labels) {
    LossTerms<float> t;
    t.pred = softmax_cross_entropy(tr.logits, labels);
    t.total = t.pred;
    t.correlation = tr.logits.tape()->constant(Tensor::scalar(0.0f));
    t.sparsity = t.correlation;
    if (sparse) {
      for (std::size_t l = 0; l < tr.layers.size(); ++l) {
        std::vector<int> all(static_cast<std::size_t>(tr.layers[l].post_pool.value().dim(1)));
        std::iota(all.begin(), all.end(), 0);
        const auto ls = loss_sparsity(tr.layers[l].post_pool, std::span<const int>(all));
        t.sparsity = add(t.sparsity, ls);
        t.total = add(t.total, scale(ls, cfg.lambda_s));
      }
    }
    return t;
  };
  Adam adam;
  const BatchPlan plan(train.size(), cfg.batch, cfg.seed, true);
  if (log) {
    log->append({{"event", "run_start"},
                 {"variant", variant_name(variant)},
                 {"arch", model.arch().to_json()},
                 {"model_seed", model.seed()},
                 {"epochs", cfg.epochs},
                 {"lr", cfg.lr},
                 {"lambda_s", sparse ? cfg.lambda_s : 0.0f}});
  }
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto l = run_epoch(model, adam, train, plan, e, cfg.lr, build, hooks);
    if (log) {
      json ev = {{"event", "epoch"}, {"epoch", e + 1}};
      ev.update(loss_json(l));
      log->append(std::move(ev));
    }
  }
  model.provenance["training"] = variant_name(variant);
  model.provenance["epochs"] = cfg.epochs;
  model.provenance["lambda_s"] = sparse ? cfg.lambda_s : 0.0f;
  model.provenance["train_seed"] = cfg.seed;
  if (log) log->append({{"event", "run_end"}, {"param_digest", hex64(model.param_digest())}});
}

std::vector<int> predict(const Model& model, const Tensor& images_nchw) {
  const auto inf = model.infer(images_nchw);
  const int n = inf.logits.dim(0), k = inf.logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const float* row = inf.logits.ptr() + static_cast<std::size_t>(r) * k;
    out[static_cast<std::size_t>(r)] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

double accuracy(const Model& model, const LabeledDataset& ds, int batch) {
  if (ds.size() == 0) throw InvalidArgument("accuracy of an empty dataset");
  int correct = 0;
  for (int start = 0; start < ds.size(); start += batch) {
    const Batch b = make_batch(ds, start, std::min(ds.size(), start + batch));
    const auto pred = predict(model, b.images);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  }
  return static_cast<double>(correct) / ds.size();
}

}  // namespace lucid
