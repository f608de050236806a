#pragma once

// L-infinity bounded PGD and C&W-margin attacks and the robustness grid runner.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lucid/data.hpp"
#include "lucid/model.hpp"
#include "lucid/train.hpp"

namespace lucid {

enum class AttackKind { kPgd, kCw };
std::string attack_name(AttackKind k);
AttackKind attack_from(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  float epsilon = 0.2f;
  int steps = 40;
  float alpha = 0.01f;
  bool random_start = true;
  float kappa = 0.0f;
  std::uint64_t seed = 0;

  // pgd: 40 steps, alpha = eps/20, random start. cw: 100 steps, alpha = eps/25,
  // no random start, kappa = 0.
  static AttackConfig defaults(AttackKind kind, float epsilon, std::uint64_t seed = 0);

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep the values of `base`; unknown keys are rejected.
  static AttackConfig from_json(const nlohmann::json& j, const AttackConfig& base);
};

// Logits [N,classes] for an NCHW input variable.
using LogitFn = std::function<Var(Tape&, const Var&)>;
LogitFn model_logits(const Model& model);

// Sign-gradient steps that increase the summed cross-entropy (pgd) or decrease
// the summed C&W margin max(Z_y - max_{t!=y} Z_t, -kappa) (cw); after every
// step each pixel is clamped to [max(0, x - eps), min(1, x + eps)].
Tensor attack(const LogitFn& fn, const Tensor& x_nchw, std::span<const int> labels, const AttackConfig& cfg);
Tensor pgd_attack(const LogitFn& fn, const Tensor& x_nchw, std::span<const int> labels, const AttackConfig& cfg);
Tensor cw_attack(const LogitFn& fn, const Tensor& x_nchw, std::span<const int> labels, const AttackConfig& cfg);
Tensor pgd_attack(const Model& model, const Tensor& x_nchw, std::span<const int> labels, const AttackConfig& cfg);
Tensor cw_attack(const Model& model, const Tensor& x_nchw, std::span<const int> labels, const AttackConfig& cfg);

// Accuracy on attacked copies of `ds` (all of it).
double adversarial_accuracy(const Model& model, const LabeledDataset& ds, const AttackConfig& cfg, int batch = 128);

struct AttackRow {
  std::string dataset;
  std::string variant;
  std::string attack;
  double epsilon = 0.0;
  double accuracy = 0.0;
  int n = 0;
  std::uint64_t seed = 0;
};

struct AttackReport {
  std::vector<AttackRow> rows;
  bool partial = false;
  std::vector<std::string> missing;  // variants requested but not supplied

  static constexpr const char* kCsvHeader = "dataset,variant,attack,epsilon,accuracy,n,seed";
  std::string to_csv() const;
  static AttackReport from_csv(const std::string& text);
  nlohmann::json to_json() const;
  void append(const AttackReport& other);
  // Rows matching every given field.
  std::vector<AttackRow> select(const std::string& dataset, const std::string& variant, const std::string& attack,
                                double epsilon) const;
};

struct RobustnessOptions {
  std::string dataset = "dataset";
  std::optional<int> n;                 // evaluate a seeded subsample of this size
  std::uint64_t subsample_seed = 0;
  std::vector<std::string> expected{"baseline", "sparse", "ours"};
  int batch = 128;
};

// One row per (variant, config). A null or absent expected variant marks the
// report partial and lists it in `missing`.
AttackReport evaluate_robustness(const std::map<std::string, const Model*>& models, const LabeledDataset& test,
                                 const std::vector<AttackConfig>& configs, const RobustnessOptions& opt = {});

}  // namespace lucid
