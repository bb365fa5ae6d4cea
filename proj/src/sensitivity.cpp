#include "nsns/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "nsns/rng.hpp"

namespace nsns {

namespace {

constexpr double kDeadNorm = 1e-12;

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct LayerStats {
  std::vector<double> sigma;
  std::vector<double> ratio;
  std::vector<int> live_pairs;  // pairs with a usable Eq.11 denominator
};

/// Accumulates per-channel sums over all pairs, batched, in sample order.
std::vector<LayerStats> layer_stats(const Model& model, const DualPairSet& pairs,
                                    const std::vector<std::string>& layers) {
  pairs.validate();
  std::vector<int> channels(layers.size());
  for (size_t li = 0; li < layers.size(); ++li)
    channels[li] = model.spec.channel_count(layers[li]);

  std::vector<LayerStats> stats(layers.size());
  for (size_t li = 0; li < layers.size(); ++li) {
    stats[li].sigma.assign(static_cast<size_t>(channels[li]), 0.0);
    stats[li].ratio.assign(static_cast<size_t>(channels[li]), 0.0);
    stats[li].live_pairs.assign(static_cast<size_t>(channels[li]), 0);
  }

  const int n = pairs.size();
  const int chunk = 64;
  for (int start = 0; start < n; start += chunk) {
    const int end = std::min(n, start + chunk);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<size_t>(i - start)] = i;

    std::vector<int> shape = pairs.clean.shape;
    shape[0] = end - start;
    const size_t stride = pairs.clean.numel() / static_cast<size_t>(n);
    Tensor xb(shape), ab(shape);
    std::copy(pairs.clean.data.begin() + static_cast<long>(stride * static_cast<size_t>(start)),
              pairs.clean.data.begin() + static_cast<long>(stride * static_cast<size_t>(end)),
              xb.data.begin());
    std::copy(pairs.adv.data.begin() + static_cast<long>(stride * static_cast<size_t>(start)),
              pairs.adv.data.begin() + static_cast<long>(stride * static_cast<size_t>(end)),
              ab.data.begin());

    auto [logits_c, rec_c] = forward_record(model, xb);
    auto [logits_a, rec_a] = forward_record(model, ab);
    (void)logits_c;
    (void)logits_a;

    for (size_t li = 0; li < layers.size(); ++li) {
      const Tensor& tc = rec_c.at(layers[li]);
      const Tensor& ta = rec_a.at(layers[li]);
      const int c = channels[li];
      const int b = tc.dim(0);
      const size_t plane = tc.numel() / static_cast<size_t>(b) / static_cast<size_t>(c);
      for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
          const double* pc = tc.data.data() + (size_t(bi) * c + ci) * plane;
          const double* pa = ta.data.data() + (size_t(bi) * c + ci) * plane;
          double diff = 0.0, norm = 0.0;
          for (size_t j = 0; j < plane; ++j) {
            diff += std::abs(pc[j] - pa[j]);
            norm += std::abs(pc[j]);
          }
          stats[li].sigma[static_cast<size_t>(ci)] += diff / static_cast<double>(plane);
          if (norm >= kDeadNorm) {
            stats[li].ratio[static_cast<size_t>(ci)] += diff / norm;
            stats[li].live_pairs[static_cast<size_t>(ci)] += 1;
          }
        }
    }
  }
  for (size_t li = 0; li < layers.size(); ++li)
    for (size_t ci = 0; ci < stats[li].sigma.size(); ++ci) {
      stats[li].sigma[ci] /= static_cast<double>(n);
      if (stats[li].live_pairs[ci] > 0)
        stats[li].ratio[ci] /= static_cast<double>(stats[li].live_pairs[ci]);
      else
        stats[li].ratio[ci] = 0.0;
    }
  return stats;
}

}  // namespace

std::string SensitivityTable::to_csv() const {
  std::string out = "layer,channel,sigma,sigma_ratio,n_pairs\n";
  for (const SensitivityRow& r : rows)
    out += layer + "," + std::to_string(r.channel) + "," + fmt_g(r.sigma) + "," +
           fmt_g(r.sigma_ratio) + "," + std::to_string(n_pairs) + "\n";
  return out;
}

std::string SensitiveSet::to_json() const {
  nlohmann::json j;
  j["layer"] = layer;
  j["k"] = k;
  j["neurons"] = channels();
  j["tie_rule"] = "sigma_desc_then_index";
  return j.dump();
}

std::vector<int> SensitiveSet::channels() const {
  std::vector<int> out;
  out.reserve(neurons.size());
  for (const NeuronRef& r : neurons) out.push_back(r.channel);
  return out;
}

double neuron_sensitivity(const Model& model, const DualPairSet& pairs, const NeuronRef& ref) {
  int channels = model.spec.channel_count(ref.layer);
  if (ref.channel < 0 || ref.channel >= channels)
    throw std::invalid_argument("neuron_sensitivity: channel " + std::to_string(ref.channel) +
                                " out of range [0," + std::to_string(channels) + ") in '" +
                                ref.layer + "'");
  std::vector<LayerStats> stats = layer_stats(model, pairs, {ref.layer});
  return stats[0].sigma[static_cast<size_t>(ref.channel)];
}

double sensitivity_ratio(const Model& model, const DualPairSet& pairs, const NeuronRef& ref) {
  int channels = model.spec.channel_count(ref.layer);
  if (ref.channel < 0 || ref.channel >= channels)
    throw std::invalid_argument("sensitivity_ratio: channel " + std::to_string(ref.channel) +
                                " out of range [0," + std::to_string(channels) + ") in '" +
                                ref.layer + "'");
  std::vector<LayerStats> stats = layer_stats(model, pairs, {ref.layer});
  return stats[0].ratio[static_cast<size_t>(ref.channel)];
}

std::vector<SensitivityTable> layer_tables(const Model& model, const DualPairSet& pairs,
                                           const std::vector<std::string>& layers) {
  std::vector<LayerStats> stats = layer_stats(model, pairs, layers);
  std::vector<SensitivityTable> tables(layers.size());
  for (size_t li = 0; li < layers.size(); ++li) {
    tables[li].layer = layers[li];
    tables[li].n_pairs = pairs.size();
    for (size_t ci = 0; ci < stats[li].sigma.size(); ++ci) {
      SensitivityRow row;
      row.channel = static_cast<int>(ci);
      row.sigma = stats[li].sigma[ci];
      row.sigma_ratio = stats[li].ratio[ci];
      row.dead = stats[li].live_pairs[ci] == 0;
      tables[li].rows.push_back(row);
    }
  }
  return tables;
}

SensitivityTable layer_table(const Model& model, const DualPairSet& pairs,
                             const std::string& layer) {
  return layer_tables(model, pairs, {layer})[0];
}

SensitiveSet select_sensitive(const SensitivityTable& table, int k) {
  const int channels = static_cast<int>(table.rows.size());
  if (k < 1 || k > channels)
    throw std::invalid_argument("select_sensitive: k=" + std::to_string(k) +
                                " out of range [1," + std::to_string(channels) + "]");
  std::vector<int> order(static_cast<size_t>(channels));
  for (int i = 0; i < channels; ++i) order[static_cast<size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    double sa = table.rows[static_cast<size_t>(a)].sigma;
    double sb = table.rows[static_cast<size_t>(b)].sigma;
    if (sa != sb) return sa > sb;
    return a < b;
  });
  SensitiveSet set;
  set.layer = table.layer;
  set.k = k;
  for (int i = 0; i < k; ++i) set.neurons.push_back({table.layer, order[static_cast<size_t>(i)]});
  return set;
}

SensitiveSet select_sensitive_fraction(const SensitivityTable& table, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("select_sensitive: fraction must be in (0,1]");
  const int channels = static_cast<int>(table.rows.size());
  int k = static_cast<int>(std::ceil(fraction * channels));
  k = std::max(1, std::min(channels, k));
  return select_sensitive(table, k);
}

std::vector<std::string> conv_layer_names(const ModelSpec& spec) {
  std::vector<std::string> names = spec.layer_names();
  std::vector<std::string> out;
  for (size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::Conv) out.push_back(names[i]);
  return out;
}

std::vector<std::string> conv_and_relu_layer_names(const ModelSpec& spec) {
  std::vector<std::string> names = spec.layer_names();
  std::vector<std::string> out;
  for (size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::Conv || spec.layers[i].kind == LayerKind::Relu)
      out.push_back(names[i]);
  return out;
}

std::vector<ProfilePoint> amplification_profile(const Model& model, const DualPairSet& pairs,
                                                const std::vector<std::string>& layers,
                                                double fraction, bool sensitive_only) {
  // keep spec order regardless of the order given
  std::vector<std::string> ordered = layers;
  std::sort(ordered.begin(), ordered.end(), [&](const std::string& a, const std::string& b) {
    return model.spec.layer_index(a) < model.spec.layer_index(b);
  });
  std::vector<SensitivityTable> tables = layer_tables(model, pairs, ordered);
  std::vector<ProfilePoint> profile;
  for (const SensitivityTable& table : tables) {
    ProfilePoint p;
    p.layer = table.layer;
    if (sensitive_only) {
      SensitiveSet set = select_sensitive_fraction(table, fraction);
      for (const NeuronRef& ref : set.neurons)
        p.mean_sigma_ratio += table.rows[static_cast<size_t>(ref.channel)].sigma_ratio;
      p.neurons_used = static_cast<int>(set.neurons.size());
    } else {
      for (const SensitivityRow& row : table.rows) p.mean_sigma_ratio += row.sigma_ratio;
      p.neurons_used = static_cast<int>(table.rows.size());
    }
    p.mean_sigma_ratio /= std::max(1, p.neurons_used);
    profile.push_back(p);
  }
  return profile;
}

std::vector<SuppressionRow> suppression_experiment(const Model& model, const Dataset& dataset,
                                                   const std::vector<AttackSpec>& attacks,
                                                   const std::vector<double>& betas, int trials,
                                                   double fraction, uint64_t seed) {
  if (attacks.empty()) throw std::invalid_argument("suppression_experiment: need >= 1 attack");
  if (trials < 1) throw std::invalid_argument("suppression_experiment: trials must be >= 1");
  for (double b : betas)
    if (!(b >= 0.0 && b <= 1.0))
      throw std::invalid_argument("suppression_experiment: beta grid must lie in [0,1]");

  DualPairSet pairs = build_dual_pairs(model, dataset, attacks[0]);
  std::vector<std::string> layers = conv_layer_names(model.spec);
  std::vector<SensitivityTable> tables = layer_tables(model, pairs, layers);

  std::vector<NeuronRef> sensitive;
  std::vector<std::vector<int>> complement_per_layer(layers.size());
  std::vector<int> count_per_layer(layers.size());
  for (size_t li = 0; li < layers.size(); ++li) {
    SensitiveSet set = select_sensitive_fraction(tables[li], fraction);
    count_per_layer[li] = static_cast<int>(set.neurons.size());
    const std::vector<int> chans = set.channels();
    std::set<int> chosen(chans.begin(), chans.end());
    for (const NeuronRef& ref : set.neurons) sensitive.push_back(ref);
    for (int c = 0; c < static_cast<int>(tables[li].rows.size()); ++c)
      if (!chosen.count(c)) complement_per_layer[li].push_back(c);
  }

  auto measure = [&](const Model& m, SuppressionRow& row) {
    row.clean_acc = clean_accuracy(m, dataset);
    for (const AttackSpec& spec : attacks)
      row.attack_acc.emplace_back(spec.name(), robust_accuracy(m, dataset, spec));
  };

  std::vector<SuppressionRow> rows;
  for (double beta : betas) {
    SuppressionRow srow;
    srow.beta = beta;
    srow.group = "sensitive";
    measure(apply_suppression(model, sensitive, beta), srow);
    rows.push_back(std::move(srow));

    SuppressionRow rrow;
    rrow.beta = beta;
    rrow.group = "random";
    rrow.trials = trials;
    rrow.clean_acc = 0.0;
    std::vector<double> acc_sums(attacks.size(), 0.0);
    for (int t = 0; t < trials; ++t) {
      const uint64_t trial_seed = derive_seed(seed, static_cast<uint64_t>(t) + 1);
      rrow.trial_seeds.push_back(trial_seed);
      std::vector<NeuronRef> random_refs;
      for (size_t li = 0; li < layers.size(); ++li) {
        std::vector<int> pool = complement_per_layer[li];
        Rng rng(derive_seed(trial_seed, li));
        rng.shuffle(pool);
        const int want = std::min<int>(count_per_layer[li], static_cast<int>(pool.size()));
        for (int i = 0; i < want; ++i) random_refs.push_back({layers[li], pool[static_cast<size_t>(i)]});
      }
      SuppressionRow tmp;
      measure(apply_suppression(model, random_refs, beta), tmp);
      rrow.clean_acc += tmp.clean_acc;
      for (size_t a = 0; a < attacks.size(); ++a) acc_sums[a] += tmp.attack_acc[a].second;
    }
    rrow.clean_acc /= trials;
    for (size_t a = 0; a < attacks.size(); ++a)
      rrow.attack_acc.emplace_back(attacks[a].name(), acc_sums[a] / trials);
    rows.push_back(std::move(rrow));
  }
  return rows;
}

}  // namespace nsns
