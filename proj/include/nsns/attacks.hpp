#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nsns/data.hpp"
#include "nsns/model.hpp"

namespace nsns {

enum class AttackKind { Fgsm, PgdLinf, PgdL2, Gaussian };

/// Budgets are in normalized pixel units ([0,1] scale); values quoted on the
/// 0-255 integer scale belong in epsilon_255 config keys and are divided by 255.
struct AttackSpec {
  AttackKind kind = AttackKind::Fgsm;
  double epsilon = 0.0;
  int steps = 1;            // pgd iterations k
  double step_size = 0.0;   // pgd alpha
  bool targeted = false;
  int target_class = -1;
  int severity = 0;         // gaussian, 1..5
  uint64_t seed = 0;
  bool random_start = true; // pgd start uniform in the epsilon ball

  void validate() const;
  std::string name() const;

  static AttackSpec fgsm(double epsilon, uint64_t seed = 0);
  /// alpha defaults to epsilon/sqrt(k).
  static AttackSpec pgd_linf(double epsilon, int k, double alpha = 0.0, uint64_t seed = 0);
  static AttackSpec pgd_l2(double epsilon, int k, double alpha = 0.0, uint64_t seed = 0);
  static AttackSpec gaussian(int severity, uint64_t seed = 0);

  AttackSpec with_target(int target) const;
};

/// Gaussian severity -> noise std in unit scale.
double gaussian_severity_std(int severity);

/// Gradient of the summed cross-entropy w.r.t. the input batch.
Tensor input_gradient(const Model& model, const Tensor& x, const std::vector<int>& labels);

/// Aligned benign/adversarial pairs with their labels.
struct DualPairSet {
  Tensor clean;  // [N,C,H,W]
  Tensor adv;    // [N,C,H,W]
  std::vector<int> labels;
  std::optional<int> target_class;

  int size() const { return static_cast<int>(labels.size()); }
  Tensor clean_sample(int i) const;
  Tensor adv_sample(int i) const;
  void validate() const;
};

/// File format: magic "NSNSPAIR", u16 version, u32 N, per pair a u16 label and
/// the two [C,H,W] tensors in the f32 encoding, then u16 target class
/// (0xFFFF = absent).
void save_pairs(const DualPairSet& pairs, const std::string& path);
DualPairSet load_pairs(const std::string& path);

Tensor fgsm(const Model& model, const Tensor& x, const std::vector<int>& y,
            const AttackSpec& spec);

/// k projected gradient iterations with per-iteration norm-constraint checks.
/// Per-sample randomness derives from (spec.seed, first_sample_index + i).
/// `observer` sees the perturbed batch after every iteration.
Tensor pgd(const Model& model, const Tensor& x, const std::vector<int>& y, const AttackSpec& spec,
           uint64_t first_sample_index = 0,
           const std::function<void(const Tensor&)>& observer = {});

Tensor gaussian_corrupt(const Tensor& x, const AttackSpec& spec,
                        uint64_t first_sample_index = 0);

/// Dispatch on spec.kind. Targeted specs attack toward spec.target_class.
Tensor perturb(const Model& model, const Tensor& x, const std::vector<int>& y,
               const AttackSpec& spec, uint64_t first_sample_index = 0);

DualPairSet build_dual_pairs(const Model& model, const Dataset& dataset, const AttackSpec& spec);

struct TargetedResult {
  DualPairSet set;   // only pairs the model classifies as the target class
  int attempted = 0; // pool size after excluding samples already labeled y
  double success_rate() const {
    return attempted == 0 ? 0.0 : static_cast<double>(set.size()) / attempted;
  }
};

/// Targeted protocol: pool excludes samples labeled y; retains pairs with
/// adversarial prediction y. An empty result is valid.
TargetedResult targeted_set(const Model& model, const Dataset& dataset, int target_class,
                            const AttackSpec& spec);

double clean_accuracy(const Model& model, const Dataset& dataset);
double robust_accuracy(const Model& model, const Dataset& dataset, const AttackSpec& spec);

}  // namespace nsns
