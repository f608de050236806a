#pragma once

// Losses of the interpretable training objective and the layer-wise,
// annotator-in-the-loop training procedure.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "lucid/data.hpp"
#include "lucid/error.hpp"
#include "lucid/model.hpp"

namespace lucid {

// ---- losses -----------------------------------------------------------------------

// L1 of the post-pool output x [M,K,h,w] over the unselected channels,
// divided by M * |unselected|. Zero when every channel is selected.
template <typename T>
BasicVar<T> loss_sparsity(const BasicVar<T>& x, std::span<const int> unselected);

// Mean |Pearson correlation| between every selected and every unselected
// channel's pooled scalars (pooled [M,K]). Zero when either set is empty.
template <typename T>
BasicVar<T> loss_correlation(const BasicVar<T>& pooled, std::span<const int> selected, std::span<const int> unselected);

enum class PredLoss { kCrossEntropy, kMse };

template <typename T>
struct LossTerms {
  BasicVar<T> total;
  BasicVar<T> pred;
  BasicVar<T> sparsity;
  BasicVar<T> correlation;
};

// L = L_pred + lambda_s * L_s + lambda_c * L_c with the regularizers on conv
// layer `layer` (1-based). kMse compares logits against one-hot targets.
template <typename T>
LossTerms<T> loss_total(const ForwardTrace<T>& trace, std::span<const int> labels, int layer,
                        std::span<const int> selected, std::span<const int> unselected, T lambda_s, T lambda_c,
                        PredLoss pred = PredLoss::kCrossEntropy);

// ---- selection state -------------------------------------------------------------------

enum class Provenance { kHuman, kOracle, kPool };
std::string provenance_name(Provenance p);
Provenance provenance_from(const std::string& s);

struct Selection {
  int channel = 0;
  std::string concept_name;
  Provenance provenance = Provenance::kHuman;
  int iteration = 0;
};

// S_i per conv layer; the complement is everything else.
class SelectionState {
 public:
  SelectionState() = default;
  explicit SelectionState(std::vector<int> channels_per_layer);
  static SelectionState for_model(const Model& m);

  int num_layers() const { return static_cast<int>(channels_.size()); }
  int channels(int layer) const;
  bool is_selected(int layer, int channel) const;
  // Throws Conflict on a repeated channel, InvalidArgument on an empty name.
  void add(int layer, Selection s);
  std::vector<int> selected(int layer) const;
  std::vector<int> unselected(int layer) const;
  const std::map<int, Selection>& entries(int layer) const;
  double completeness(int layer) const;

  nlohmann::json to_json() const;
  static SelectionState from_json(const nlohmann::json& j);
  bool operator==(const SelectionState& o) const;

 private:
  void check(int layer, int channel) const;
  std::vector<int> channels_;
  std::vector<std::map<int, Selection>> sel_;
};

// ---- configuration -------------------------------------------------------------------

enum class OnIncomplete { kKeep, kPrune };

struct TrainConfig {
  float lr = 0.001f;
  float lambda_s = 0.8f;
  float lambda_c = 0.1f;
  int batch = 128;
  int epochs_per_iteration = 5;
  int max_iterations_per_layer = 10;
  OnIncomplete on_incomplete = OnIncomplete::kKeep;
  std::uint64_t seed = 0;
  int fc_finetune_epochs = 1;
  int prune_finetune_epochs = 2;
  PredLoss pred_loss = PredLoss::kCrossEntropy;
  // Iteration 1 of every layer trains on the prediction loss alone; the
  // regularizers join from iteration 2 on.
  bool pred_only_first_iteration = true;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
};

// ---- session log ------------------------------------------------------------------------

// Ordered training events. When bound to a file every event is appended as
// one JSON line and flushed, so an interrupted run can be resumed.
class SessionLog {
 public:
  SessionLog() = default;
  explicit SessionLog(const std::filesystem::path& file, bool truncate = true);

  void append(nlohmann::json event);
  std::vector<nlohmann::json> events() const;
  std::vector<nlohmann::json> events_of(const std::string& kind) const;
  std::size_t size() const;

  using Listener = std::function<void(const nlohmann::json&)>;
  void set_listener(Listener l);

  static std::vector<nlohmann::json> parse_lines(const std::filesystem::path& file);

 private:
  mutable std::mutex mu_;
  std::vector<nlohmann::json> events_;
  std::unique_ptr<std::ofstream> out_;
  Listener listener_;
};

// ---- annotators ------------------------------------------------------------------------

struct Annotation {
  int channel = 0;
  std::string concept_name;
};

struct Query {
  int layer = 1;
  int iteration = 1;
  std::vector<int> candidates;  // current complement of S_i
};

class Annotator {
 public:
  virtual ~Annotator() = default;
  // Channels (from q.candidates) judged interpretable, with concept names.
  virtual std::vector<Annotation> annotate(const Model& model, const Query& q) = 0;
  virtual Provenance provenance() const = 0;
};

// Answers from a recorded log, then defers to `live` (may be null) once the
// recording runs out.
class ReplayAnnotator : public Annotator {
 public:
  ReplayAnnotator(const std::vector<nlohmann::json>& events, Annotator* live);
  std::vector<Annotation> annotate(const Model& model, const Query& q) override;
  Provenance provenance() const override;
  bool exhausted() const { return next_ >= recorded_.size(); }
  std::size_t recorded() const { return recorded_.size(); }

 private:
  struct Recorded {
    int layer;
    int iteration;
    Provenance provenance;
    std::vector<Annotation> selections;
  };
  std::vector<Recorded> recorded_;
  std::size_t next_ = 0;
  Annotator* live_;
  Provenance last_ = Provenance::kHuman;
};

// Module-1 hook: channels auto-selected from a concept pool before the
// annotator is queried.
using PreMapper = std::function<std::vector<Annotation>(const Model&, const Query&)>;

// ---- training ---------------------------------------------------------------------------

struct RunHooks {
  std::function<bool()> cancelled;  // polled between batches
};

class Cancelled : public Error {
 public:
  Cancelled() : Error("training cancelled") {}
};

struct Algorithm1Result {
  SelectionState selection;
  std::vector<std::string> stop_reasons;  // per layer
};

// Trains `model` in place layer by layer. Every query, response, freeze and
// per-epoch loss goes to `log`.
Algorithm1Result run_algorithm1(Model& model, const LabeledDataset& train, Annotator& annotator,
                                const TrainConfig& cfg, SessionLog& log, const PreMapper& premap = {},
                                const RunHooks& hooks = {});

// Applied after the layer loop. kPrune zeroes and freezes every unselected
// channel and fine-tunes the remaining trainable parameters on L_pred.
void apply_incomplete_policy(Model& model, const SelectionState& sel, const LabeledDataset& train,
                             const TrainConfig& cfg, SessionLog* log = nullptr);

enum class Variant { kBaseline, kSparse, kOurs };
std::string variant_name(Variant v);
Variant variant_from(const std::string& s);

struct ConventionalConfig {
  float lr = 0.001f;
  int batch = 128;
  int epochs = 15;
  float lambda_s = 0.8f;  // sparse only: L1 on every conv layer's output
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ConventionalConfig from_json(const nlohmann::json& j, const ConventionalConfig& base);
};

// Baseline (plain cross-entropy) or Sparse training of every parameter.
void train_conventional(Model& model, const LabeledDataset& train, Variant variant, const ConventionalConfig& cfg,
                        SessionLog* log = nullptr, const RunHooks& hooks = {});

double accuracy(const Model& model, const LabeledDataset& ds, int batch = 256);
// Predicted labels for an NCHW batch.
std::vector<int> predict(const Model& model, const Tensor& images_nchw);

}  // namespace lucid
