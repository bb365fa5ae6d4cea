#pragma once

#include <string>
#include <vector>

#include "nsns/attacks.hpp"
#include "nsns/model.hpp"

namespace nsns {

/// Ordered channel indices, most significant first.
struct NeuronSequence {
  std::vector<int> neurons;
  std::string source;  // "sensitivity", "importance" or "votes"
};

struct VoteTally {
  std::vector<long long> votes;  // per channel
  int k = 0;                     // per-image sequence length
};

/// Direct contribution of penultimate neuron m to the y-logit:
/// activation times the final-layer weight W[y,m].
double contribution(const ActivationRecord& record, const std::string& penultimate_layer,
                    const Tensor& final_weights, int m, int y, int sample = 0);

/// Top-k penultimate channels of one adversarial input by contribution toward y.
NeuronSequence important_neurons(const Model& model, const Tensor& x_adv, int y, int k);

/// Ranks receive votes k..1 per image; returns the tally over the whole set.
VoteTally vote_tally(const Model& model, const DualPairSet& targeted, int k);

/// Top-k channels by total votes; ties keep the lower channel index.
NeuronSequence vote_important(const Model& model, const DualPairSet& targeted, int k);

/// Spearman rank correlation of two tie-free rankings (permutations of 1..n).
double spearman(const std::vector<int>& rank_a, const std::vector<int>& rank_b);

/// Minimum insert/delete/substitute edits between two sequences.
int levenshtein_distance(const std::vector<int>& a, const std::vector<int>& b);

/// 1 - distance/(|a|+|b|), in [0,1]; undefined when both sequences are empty.
double levenshtein_similarity(const std::vector<int>& a, const std::vector<int>& b);

/// Mean pair similarity over all unordered distinct pairs.
double avg_pair_similarity(const std::vector<std::vector<int>>& sequences);

/// Size of the common intersection over the union, sequences taken as sets.
double total_jaccard(const std::vector<std::vector<int>>& sequences);

enum class ImportanceRanking {
  Voting,  // full-width Eq.5 voting over the targeted set
  MeanPhi  // rank channels by mean contribution across the set
};

struct ClassSimilarity {
  int cls = 0;
  double spearman = 0.0;     // sensitivity vs importance ranking, penultimate layer
  double levenshtein = 0.0;  // S(GAMMA^y, OMEGA^y) at the penultimate layer
  int targeted_count = 0;
};

struct LayerSimilarity {
  std::string layer;
  double avg_pair = 0.0;
  double total_jaccard = 0.0;
};

struct SimilarityStudy {
  std::vector<ClassSimilarity> classes;
  std::vector<LayerSimilarity> layers;
  std::vector<int> excluded_classes;

  std::string to_json() const;
  std::string to_csv() const;
};

/// Per class: targeted set, Spearman of the sensitivity/importance rankings and
/// the Levenshtein similarity of the top-k sequences on the penultimate layer.
/// Per layer: Eq.9/Eq.10 across the per-class sensitive sets. Classes with empty
/// targeted sets are excluded and reported; fewer than two usable classes is an
/// error for the per-layer aggregates.
SimilarityStudy per_class_similarity_study(const Model& model, const Dataset& dataset,
                                           const std::vector<int>& classes,
                                           const std::vector<std::string>& layers, int k,
                                           const AttackSpec& attack,
                                           ImportanceRanking ranking = ImportanceRanking::Voting);

}  // namespace nsns
