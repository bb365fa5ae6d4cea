#include "nsns/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "json.hpp"
#include "nsns/sensitivity.hpp"

namespace nsns {

namespace {

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

/// Descending by value, ties broken by ascending index.
std::vector<int> order_desc(const std::vector<double>& values) {
  std::vector<int> order(values.size());
  for (size_t i = 0; i < values.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (values[static_cast<size_t>(a)] != values[static_cast<size_t>(b)])
      return values[static_cast<size_t>(a)] > values[static_cast<size_t>(b)];
    return a < b;
  });
  return order;
}

/// 1-based rank position of each element given its sort order.
std::vector<int> ranks_from_order(const std::vector<int>& order) {
  std::vector<int> ranks(order.size());
  for (size_t pos = 0; pos < order.size(); ++pos)
    ranks[static_cast<size_t>(order[pos])] = static_cast<int>(pos) + 1;
  return ranks;
}

std::vector<double> contributions_for_sample(const Tensor& penult, const Tensor& weights, int y,
                                             int sample) {
  const int width = penult.dim(1);
  std::vector<double> phi(static_cast<size_t>(width));
  for (int m = 0; m < width; ++m)
    phi[static_cast<size_t>(m)] =
        penult[size_t(sample) * width + m] * weights[size_t(y) * width + m];
  return phi;
}

}  // namespace

double contribution(const ActivationRecord& record, const std::string& penultimate_layer,
                    const Tensor& final_weights, int m, int y, int sample) {
  const Tensor& penult = record.at(penultimate_layer);
  if (penult.rank() != 2)
    throw std::invalid_argument("contribution: penultimate activations must be [N,width], got " +
                                penult.shape_str());
  const int width = penult.dim(1);
  if (final_weights.rank() != 2 || final_weights.dim(1) != width)
    throw std::invalid_argument("contribution: weights " + final_weights.shape_str() +
                                " do not match penultimate width " + std::to_string(width));
  if (m < 0 || m >= width)
    throw std::invalid_argument("contribution: neuron " + std::to_string(m) +
                                " out of range [0," + std::to_string(width) + ")");
  if (y < 0 || y >= final_weights.dim(0))
    throw std::invalid_argument("contribution: class " + std::to_string(y) + " out of range [0," +
                                std::to_string(final_weights.dim(0)) + ")");
  if (sample < 0 || sample >= penult.dim(0))
    throw std::invalid_argument("contribution: sample out of range");
  return penult[size_t(sample) * width + m] * final_weights[size_t(y) * width + m];
}

NeuronSequence important_neurons(const Model& model, const Tensor& x_adv, int y, int k) {
  const std::string penult_name = model.spec.penultimate_layer();
  const Tensor& weights = model.param(model.spec.final_dense_layer() + ".weight");
  auto [logits, record] = forward_record(model, x_adv);
  (void)logits;
  const Tensor& penult = record.at(penult_name);
  const int width = penult.dim(1);
  if (k < 1 || k > width)
    throw std::invalid_argument("important_neurons: k=" + std::to_string(k) +
                                " out of range [1," + std::to_string(width) + "]");
  if (y < 0 || y >= weights.dim(0))
    throw std::invalid_argument("important_neurons: class " + std::to_string(y) +
                                " out of range");
  std::vector<double> phi = contributions_for_sample(penult, weights, y, 0);
  std::vector<int> order = order_desc(phi);
  NeuronSequence seq;
  seq.source = "importance";
  seq.neurons.assign(order.begin(), order.begin() + k);
  return seq;
}

VoteTally vote_tally(const Model& model, const DualPairSet& targeted, int k) {
  if (targeted.size() == 0)
    throw std::invalid_argument("vote_important: no successful targeted examples");
  if (!targeted.target_class)
    throw std::invalid_argument("vote_important: pair set carries no target class");
  const int y = *targeted.target_class;
  const std::string penult_name = model.spec.penultimate_layer();
  const Tensor& weights = model.param(model.spec.final_dense_layer() + ".weight");
  const int width = model.spec.channel_count(penult_name);
  if (k < 1 || k > width)
    throw std::invalid_argument("vote_important: k=" + std::to_string(k) + " out of range [1," +
                                std::to_string(width) + "]");
  VoteTally tally;
  tally.k = k;
  tally.votes.assign(static_cast<size_t>(width), 0);

  const int chunk = 64;
  for (int start = 0; start < targeted.size(); start += chunk) {
    const int end = std::min(targeted.size(), start + chunk);
    std::vector<int> shape = targeted.adv.shape;
    shape[0] = end - start;
    const size_t stride = targeted.adv.numel() / static_cast<size_t>(targeted.size());
    Tensor batch(shape);
    std::copy(targeted.adv.data.begin() + static_cast<long>(stride * static_cast<size_t>(start)),
              targeted.adv.data.begin() + static_cast<long>(stride * static_cast<size_t>(end)),
              batch.data.begin());
    auto [logits, record] = forward_record(model, batch);
    (void)logits;
    const Tensor& penult = record.at(penult_name);
    for (int s = 0; s < end - start; ++s) {
      std::vector<double> phi = contributions_for_sample(penult, weights, y, s);
      std::vector<int> order = order_desc(phi);
      for (int pos = 0; pos < k; ++pos)
        tally.votes[static_cast<size_t>(order[static_cast<size_t>(pos)])] += k - pos;
    }
  }
  return tally;
}

NeuronSequence vote_important(const Model& model, const DualPairSet& targeted, int k) {
  VoteTally tally = vote_tally(model, targeted, k);
  std::vector<double> as_double(tally.votes.begin(), tally.votes.end());
  std::vector<int> order = order_desc(as_double);
  NeuronSequence seq;
  seq.source = "votes";
  seq.neurons.assign(order.begin(), order.begin() + k);
  return seq;
}

double spearman(const std::vector<int>& rank_a, const std::vector<int>& rank_b) {
  const size_t n = rank_a.size();
  if (rank_b.size() != n)
    throw std::invalid_argument("spearman: rankings differ in length (" + std::to_string(n) +
                                " vs " + std::to_string(rank_b.size()) + ")");
  if (n < 2) throw std::invalid_argument("spearman: need n >= 2");
  auto check_permutation = [n](const std::vector<int>& r, const char* which) {
    std::vector<char> seen(n + 1, 0);
    for (int v : r) {
      if (v < 1 || v > static_cast<int>(n) || seen[static_cast<size_t>(v)])
        throw std::invalid_argument(std::string("spearman: ") + which +
                                    " is not a permutation of 1.." + std::to_string(n));
      seen[static_cast<size_t>(v)] = 1;
    }
  };
  check_permutation(rank_a, "first ranking");
  check_permutation(rank_b, "second ranking");
  double sum_d2 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = rank_a[i] - rank_b[i];
    sum_d2 += d * d;
  }
  const double nn = static_cast<double>(n);
  return 1.0 - 6.0 * sum_d2 / (nn * nn * nn - nn);
}

int levenshtein_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t la = a.size(), lb = b.size();
  std::vector<int> prev(lb + 1), cur(lb + 1);
  for (size_t j = 0; j <= lb; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= la; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= lb; ++j) {
      const int subst = prev[j - 1] + (a[i - 1] != b[j - 1] ? 1 : 0);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, subst});
    }
    std::swap(prev, cur);
  }
  return prev[lb];
}

double levenshtein_similarity(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty())
    throw std::invalid_argument("levenshtein_similarity: undefined for two empty sequences");
  const double total = static_cast<double>(a.size() + b.size());
  return 1.0 - levenshtein_distance(a, b) / total;
}

double avg_pair_similarity(const std::vector<std::vector<int>>& sequences) {
  const size_t y = sequences.size();
  if (y < 2) throw std::invalid_argument("avg_pair_similarity: need >= 2 sequences");
  double sum = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < y; ++i)
    for (size_t j = i + 1; j < y; ++j) {
      sum += levenshtein_similarity(sequences[i], sequences[j]);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

double total_jaccard(const std::vector<std::vector<int>>& sequences) {
  if (sequences.size() < 2) throw std::invalid_argument("total_jaccard: need >= 2 sequences");
  std::set<int> inter(sequences[0].begin(), sequences[0].end());
  std::set<int> uni(sequences[0].begin(), sequences[0].end());
  for (size_t i = 1; i < sequences.size(); ++i) {
    std::set<int> s(sequences[i].begin(), sequences[i].end());
    std::set<int> next_inter;
    for (int v : inter)
      if (s.count(v)) next_inter.insert(v);
    inter = std::move(next_inter);
    uni.insert(s.begin(), s.end());
  }
  if (uni.empty()) throw std::invalid_argument("total_jaccard: union of sequences is empty");
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

std::string SimilarityStudy::to_json() const {
  nlohmann::json j;
  nlohmann::json cls = nlohmann::json::object();
  for (const ClassSimilarity& c : classes) {
    nlohmann::json e;
    e["spearman"] = c.spearman;
    e["levenshtein"] = c.levenshtein;
    e["targeted_count"] = c.targeted_count;
    cls[std::to_string(c.cls)] = e;
  }
  j["classes"] = cls;
  nlohmann::json lay = nlohmann::json::object();
  for (const LayerSimilarity& l : layers) {
    nlohmann::json e;
    e["avg_pair"] = l.avg_pair;
    e["total_jaccard"] = l.total_jaccard;
    lay[l.layer] = e;
  }
  j["layers"] = lay;
  j["excluded_classes"] = excluded_classes;
  return j.dump();
}

std::string SimilarityStudy::to_csv() const {
  std::string out = "kind,key,metric,value\n";
  for (const ClassSimilarity& c : classes) {
    out += "class," + std::to_string(c.cls) + ",spearman," + fmt_g(c.spearman) + "\n";
    out += "class," + std::to_string(c.cls) + ",levenshtein," + fmt_g(c.levenshtein) + "\n";
  }
  for (const LayerSimilarity& l : layers) {
    out += "layer," + l.layer + ",avg_pair," + fmt_g(l.avg_pair) + "\n";
    out += "layer," + l.layer + ",total_jaccard," + fmt_g(l.total_jaccard) + "\n";
  }
  return out;
}

SimilarityStudy per_class_similarity_study(const Model& model, const Dataset& dataset,
                                           const std::vector<int>& classes,
                                           const std::vector<std::string>& layers, int k,
                                           const AttackSpec& attack, ImportanceRanking ranking) {
  if (classes.size() < 2)
    throw std::invalid_argument("similarity study: need >= 2 classes");
  const std::string penult_name = model.spec.penultimate_layer();
  const Tensor& weights = model.param(model.spec.final_dense_layer() + ".weight");
  const int width = model.spec.channel_count(penult_name);

  SimilarityStudy study;
  // per layer, the usable classes' top-k sensitive sequences
  std::vector<std::vector<std::vector<int>>> layer_sequences(layers.size());

  for (int y : classes) {
    TargetedResult targeted = targeted_set(model, dataset, y, attack.with_target(y));
    if (targeted.set.size() == 0) {
      study.excluded_classes.push_back(y);
      continue;
    }
    ClassSimilarity cs;
    cs.cls = y;
    cs.targeted_count = targeted.set.size();

    // sensitivity side: full sigma ranking on the penultimate layer
    SensitivityTable penult_table = layer_table(model, targeted.set, penult_name);
    std::vector<double> sigmas(static_cast<size_t>(width));
    for (int c = 0; c < width; ++c)
      sigmas[static_cast<size_t>(c)] = penult_table.rows[static_cast<size_t>(c)].sigma;
    std::vector<int> sigma_ranks = ranks_from_order(order_desc(sigmas));

    // importance side
    std::vector<int> importance_ranks;
    if (ranking == ImportanceRanking::Voting) {
      VoteTally tally = vote_tally(model, targeted.set, width);
      std::vector<double> votes(tally.votes.begin(), tally.votes.end());
      importance_ranks = ranks_from_order(order_desc(votes));
    } else {
      std::vector<double> mean_phi(static_cast<size_t>(width), 0.0);
      for (int s = 0; s < targeted.set.size(); ++s) {
        auto [logits, record] = forward_record(model, targeted.set.adv_sample(s));
        (void)logits;
        const Tensor& penult = record.at(penult_name);
        for (int m = 0; m < width; ++m)
          mean_phi[static_cast<size_t>(m)] +=
              penult[static_cast<size_t>(m)] * weights[size_t(y) * width + m];
      }
      importance_ranks = ranks_from_order(order_desc(mean_phi));
    }
    cs.spearman = spearman(sigma_ranks, importance_ranks);

    NeuronSequence gamma = vote_important(model, targeted.set, std::min(k, width));
    SensitiveSet omega = select_sensitive(penult_table, std::min(k, width));
    cs.levenshtein = levenshtein_similarity(gamma.neurons, omega.channels());
    study.classes.push_back(cs);

    std::vector<SensitivityTable> tables = layer_tables(model, targeted.set, layers);
    for (size_t li = 0; li < layers.size(); ++li) {
      const int channels = static_cast<int>(tables[li].rows.size());
      SensitiveSet set = select_sensitive(tables[li], std::min(k, channels));
      layer_sequences[li].push_back(set.channels());
    }
  }

  if (study.classes.size() < 2)
    throw std::runtime_error("similarity study: need >= 2 classes with non-empty targeted sets (" +
                             std::to_string(study.classes.size()) + " usable)");
  for (size_t li = 0; li < layers.size(); ++li) {
    LayerSimilarity ls;
    ls.layer = layers[li];
    ls.avg_pair = avg_pair_similarity(layer_sequences[li]);
    ls.total_jaccard = total_jaccard(layer_sequences[li]);
    study.layers.push_back(ls);
  }
  return study;
}

}  // namespace nsns
