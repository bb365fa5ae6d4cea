#pragma once

#include <map>
#include <string>
#include <vector>

#include "nsns/attacks.hpp"
#include "nsns/model.hpp"

namespace nsns {

enum class NeuronMode { Sen, Dyn, All, Rand };

NeuronMode neuron_mode_from_string(const std::string& s);
std::string to_string(NeuronMode mode);

struct LrSchedule {
  double lr = 0.05;
  double decay_factor = 1.0;  // multiplies the rate every decay_every epochs
  int decay_every = 0;        // 0 disables decay

  double at(int epoch) const;
};

struct TrainConfig {
  ModelSpec spec;
  int epochs = 4;
  int batch = 64;
  LrSchedule schedule;
  double momentum = 0.9;
  uint64_t seed = 0;
  AttackSpec attack;  // training-time adversary and per-epoch robust eval

  // SNS
  double lambda = 5.0;
  std::vector<std::string> layer_set;  // S; empty selects every conv layer
  NeuronMode mode = NeuronMode::Sen;
  double sensitive_fraction = 0.10;
  int dyn_sample_count = 200;
  bool static_pairs = false;   // reuse the step-1 adversaries instead of regenerating
  bool freeze_below = true;    // lock parameters of layers below S
  bool pure_adversarial = false;  // adv-only CE instead of the 1:1 clean/adv mixture

  // ALP
  double alp_lambda = 0.5;

  bool eval_robust = true;  // per-epoch robust accuracy on the val split
};

struct EpochStats {
  int epoch = 0;
  double loss_clean = 0.0;
  double loss_adv = 0.0;
  double loss_sns = 0.0;
  double clean_acc = 0.0;
  std::vector<std::pair<std::string, double>> robust_acc;
};

struct TrainReport {
  std::string method;
  std::vector<EpochStats> epochs;
  std::map<std::string, std::vector<int>> omega;  // SNS: stabilized channels per layer
  std::vector<std::string> frozen_layers;
  double wall_seconds = 0.0;  // printed, never serialized: reports stay byte-stable

  /// One record per epoch plus a final summary record.
  std::string to_jsonl() const;
};

struct DataSplits {
  Dataset train;
  Dataset val;
};

struct TrainResult {
  Model model;
  TrainReport report;
};

/// Eq.12: summed per-neuron mean absolute deviation over the selected layers,
/// averaged over the batch. omega must hold a non-empty entry for every layer.
double sns_loss(const ActivationRecord& clean, const ActivationRecord& adv,
                const std::map<std::string, std::vector<int>>& omega,
                const std::vector<std::string>& layer_set);

TrainResult train_vanilla(const TrainConfig& config, const DataSplits& data);

/// PGD adversarial training: per batch the adversaries are generated against the
/// current parameters and the loss is the mean CE over the 1:1 clean/adv mixture.
TrainResult train_pat(const TrainConfig& config, const DataSplits& data);
/// Same dynamics from an explicit starting model (fine-tuning).
TrainResult train_pat(const TrainConfig& config, const DataSplits& data, const Model& init);

/// PAT plus alp_lambda * ||logits(x) - logits(x')||^2 (batch mean).
TrainResult train_alp(const TrainConfig& config, const DataSplits& data);

/// The k deepest eligible layers (conv layers when the spec has any, otherwise
/// dense layers). The SNS trainer freezes parameters strictly below the set.
std::vector<std::string> select_layers_topk(const ModelSpec& spec, int k);

/// Builds a PGD dual-pair set on the base model, selects the stabilized neurons
/// per `mode`, then fine-tunes with L_adv + lambda * L_sns. Layers below the
/// selected set are frozen while freeze_below holds.
TrainResult train_sns(const TrainConfig& config, const DataSplits& data, const Model& base);

struct EvalResult {
  double clean_acc = 0.0;
  std::vector<std::pair<std::string, double>> robust_acc;
};

EvalResult evaluate(const Model& model, const Dataset& dataset,
                    const std::vector<AttackSpec>& attacks);

}  // namespace nsns
