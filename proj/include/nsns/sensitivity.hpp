#pragma once

#include <string>
#include <vector>

#include "nsns/attacks.hpp"
#include "nsns/model.hpp"

namespace nsns {

struct SensitivityRow {
  int channel = 0;
  double sigma = 0.0;
  double sigma_ratio = 0.0;
  bool dead = false;  // every pair had a near-zero benign activation norm
};

/// Per-neuron sigma and sigma ratio for one layer, by ascending channel.
struct SensitivityTable {
  std::string layer;
  std::vector<SensitivityRow> rows;
  int n_pairs = 0;
  std::string attack;

  std::string to_csv() const;  // layer,channel,sigma,sigma_ratio,n_pairs
};

/// Top-k neurons of a layer by descending sigma; ties keep the lower channel.
struct SensitiveSet {
  std::string layer;
  std::vector<NeuronRef> neurons;
  int k = 0;

  std::string to_json() const;
  std::vector<int> channels() const;
};

/// Mean per-element l1 deviation of the neuron's output across the pair set.
double neuron_sensitivity(const Model& model, const DualPairSet& pairs, const NeuronRef& ref);

/// Mean over pairs of |F(x)-F(x')|_1 / |F(x)|_1; near-zero denominators are
/// skipped (all skipped -> 0 with the dead flag in table form).
double sensitivity_ratio(const Model& model, const DualPairSet& pairs, const NeuronRef& ref);

SensitivityTable layer_table(const Model& model, const DualPairSet& pairs,
                             const std::string& layer);

/// One shared forward pass per sample across all requested layers.
std::vector<SensitivityTable> layer_tables(const Model& model, const DualPairSet& pairs,
                                           const std::vector<std::string>& layers);

SensitiveSet select_sensitive(const SensitivityTable& table, int k);
/// fraction in (0,1], rounded up to at least one neuron.
SensitiveSet select_sensitive_fraction(const SensitivityTable& table, double fraction);

std::vector<std::string> conv_layer_names(const ModelSpec& spec);
std::vector<std::string> conv_and_relu_layer_names(const ModelSpec& spec);

struct ProfilePoint {
  std::string layer;
  double mean_sigma_ratio = 0.0;
  int neurons_used = 0;
};

/// Per-layer mean sigma ratio in spec order. By default the mean is restricted
/// to each layer's top-`fraction` sensitive set; sensitive_only=false averages
/// every channel.
std::vector<ProfilePoint> amplification_profile(const Model& model, const DualPairSet& pairs,
                                                const std::vector<std::string>& layers,
                                                double fraction = 0.10,
                                                bool sensitive_only = true);

struct SuppressionRow {
  double beta = 1.0;
  std::string group;  // "sensitive" or "random"
  double clean_acc = 0.0;
  std::vector<std::pair<std::string, double>> attack_acc;
  int trials = 1;
  std::vector<uint64_t> trial_seeds;
};

/// Suppresses the top-`fraction` sensitive neurons of every conv layer with each
/// beta and measures clean/robust accuracy; the control group suppresses equal
/// counts of randomly chosen other neurons, averaged over `trials` draws.
/// attacks[0] builds the pair set that defines sensitivity.
std::vector<SuppressionRow> suppression_experiment(const Model& model, const Dataset& dataset,
                                                   const std::vector<AttackSpec>& attacks,
                                                   const std::vector<double>& betas, int trials,
                                                   double fraction = 0.10, uint64_t seed = 0);

}  // namespace nsns
