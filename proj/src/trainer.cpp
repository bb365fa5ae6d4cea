#include "nsns/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "json.hpp"
#include "nsns/rng.hpp"
#include "nsns/sensitivity.hpp"

namespace nsns {

namespace {

enum : uint64_t {
  kTagShuffle = 1,
  kTagAttack = 2,
  kTagDyn = 3,
  kTagRand = 4,
  kTagDynAttack = 5,
  kTagStepOne = 6,
};

enum class Method { Vanilla, Pat, Alp, Sns };

const char* method_name(Method m) {
  switch (m) {
    case Method::Vanilla: return "vanilla";
    case Method::Pat: return "pat";
    case Method::Alp: return "alp";
    case Method::Sns: return "sns";
  }
  return "?";
}

struct Sgd {
  std::vector<Tensor> velocity;

  explicit Sgd(const Model& model) {
    for (const auto& [name, t] : model.params) velocity.push_back(Tensor::zeros(t.shape));
  }

  void step(Model& model, const std::vector<Tensor>& grads, const std::vector<char>& trainable,
            double lr, double momentum) {
    for (size_t p = 0; p < model.params.size(); ++p) {
      if (!trainable[p]) continue;
      Tensor& v = velocity[p];
      Tensor& w = model.params[p].second;
      const Tensor& g = grads[p];
      for (size_t i = 0; i < w.numel(); ++i) {
        v.data[i] = momentum * v.data[i] + g[i];
        w.data[i] -= lr * v.data[i];
      }
    }
  }
};

/// Spec indices of the param-bearing layers named in S; empty S is an error here.
int shallowest_layer_index(const ModelSpec& spec, const std::vector<std::string>& layer_set) {
  int min_idx = static_cast<int>(spec.layers.size());
  for (const std::string& name : layer_set) {
    int idx = spec.layer_index(name);
    if (idx < 0) throw std::invalid_argument("layer set: unknown layer '" + name + "'");
    min_idx = std::min(min_idx, idx);
  }
  return min_idx;
}

/// trainable[p] per parameter; frozen parameters belong to layers strictly
/// below the shallowest selected layer.
std::vector<char> trainable_mask(const Model& model, const std::vector<std::string>& layer_set,
                                 bool freeze_below, std::vector<std::string>* frozen_out) {
  std::vector<char> mask(model.params.size(), 1);
  if (!freeze_below || layer_set.empty()) return mask;
  const int min_idx = shallowest_layer_index(model.spec, layer_set);
  std::vector<std::string> names = model.spec.layer_names();
  for (size_t p = 0; p < model.params.size(); ++p) {
    const std::string& pname = model.params[p].first;
    const std::string layer = pname.substr(0, pname.find('.'));
    const int idx = model.spec.layer_index(layer);
    if (idx < min_idx) {
      mask[p] = 0;
      if (frozen_out && (frozen_out->empty() || frozen_out->back() != layer))
        frozen_out->push_back(layer);
    }
  }
  return mask;
}

Var sns_term_on_tape(Tape& tape, const TapedForward& clean,
                     const TapedForward& adv,
                     const std::map<std::string, std::vector<int>>& omega,
                     const std::vector<std::string>& layer_set, int batch) {
  Var acc;
  for (const std::string& layer : layer_set) {
    auto it = omega.find(layer);
    if (it == omega.end() || it->second.empty())
      throw std::invalid_argument("sns: empty sensitive-neuron set for layer '" + layer + "'");
    const Tensor& act = tape.value(clean.activation(layer));
    const int channels = act.dim(1);
    const size_t plane =
        act.numel() / static_cast<size_t>(act.dim(0)) / static_cast<size_t>(channels);
    std::vector<double> mask(static_cast<size_t>(channels), 0.0);
    for (int m : it->second) {
      if (m < 0 || m >= channels)
        throw std::invalid_argument("sns: channel " + std::to_string(m) +
                                    " out of range in layer '" + layer + "'");
      mask[static_cast<size_t>(m)] = 1.0 / static_cast<double>(plane);
    }
    Var diff = tape.sub(clean.activation(layer), adv.activation(layer));
    Var masked = tape.channel_scale(diff, std::move(mask));
    Var zeros = tape.leaf(Tensor::zeros(tape.value(masked).shape));
    Var term = tape.l1_distance(masked, zeros);
    acc = acc.valid() ? tape.add(acc, term) : term;
  }
  return tape.scale(acc, 1.0 / batch);
}

struct Trainer {
  const TrainConfig& config;
  const DataSplits& data;
  Method method;
  Model model;
  std::map<std::string, std::vector<int>> omega;
  std::vector<std::string> layer_set;
  std::vector<char> trainable;
  std::vector<std::string> frozen;
  DualPairSet static_pairs;  // step-1 adversaries when config.static_pairs
  bool have_static_pairs = false;

  TrainResult run() {
    const auto t0 = std::chrono::steady_clock::now();
    data.train.validate();
    if (data.train.size() == 0) throw std::invalid_argument("train: empty training split");
    config.spec.validate();

    TrainReport report;
    report.method = method_name(method);
    report.omega = omega;
    report.frozen_layers = frozen;

    Sgd sgd(model);
    std::vector<int> indices(static_cast<size_t>(data.train.size()));
    for (int i = 0; i < data.train.size(); ++i) indices[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      Rng shuffle_rng(derive_seed(config.seed, kTagShuffle, static_cast<uint64_t>(epoch)));
      shuffle_rng.shuffle(indices);
      const double lr = config.schedule.at(epoch);

      double sum_clean = 0.0, sum_adv = 0.0, sum_sns = 0.0;
      int batches = 0;
      for (size_t start = 0; start < indices.size(); start += config.batch) {
        const size_t end = std::min(indices.size(), start + static_cast<size_t>(config.batch));
        std::vector<int> idx(indices.begin() + static_cast<long>(start),
                             indices.begin() + static_cast<long>(end));
        try {
          run_batch(sgd, idx, epoch, batches, lr, sum_clean, sum_adv, sum_sns);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " +
                                   e.what());
        }
        ++batches;
      }

      EpochStats stats;
      stats.epoch = epoch;
      stats.loss_clean = sum_clean / std::max(1, batches);
      stats.loss_adv = sum_adv / std::max(1, batches);
      stats.loss_sns = sum_sns / std::max(1, batches);
      if (data.val.size() > 0) {
        stats.clean_acc = clean_accuracy(model, data.val);
        if (config.eval_robust && config.attack.epsilon > 0.0)
          stats.robust_acc.emplace_back(config.attack.name(),
                                        robust_accuracy(model, data.val, config.attack));
      }
      report.epochs.push_back(std::move(stats));

      if (method == Method::Sns && config.mode == NeuronMode::Dyn &&
          epoch + 1 < config.epochs)
        recompute_dyn_omega(epoch);
    }

    report.omega = omega;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(model), std::move(report)};
  }

  void run_batch(Sgd& sgd, const std::vector<int>& idx, int epoch, int batch_idx, double lr,
                 double& sum_clean, double& sum_adv, double& sum_sns) {
    const int b = static_cast<int>(idx.size());
    Tensor xb = data.train.batch(idx);
    std::vector<int> yb = data.train.batch_labels(idx);

    Tensor xa;
    const bool adversarial = method != Method::Vanilla;
    if (adversarial) {
      if (have_static_pairs) {
        std::vector<int> shape = static_pairs.adv.shape;
        shape[0] = b;
        xa = Tensor(shape);
        const size_t stride = static_pairs.adv.numel() / static_cast<size_t>(static_pairs.size());
        for (int r = 0; r < b; ++r)
          std::copy(
              static_pairs.adv.data.begin() + static_cast<long>(stride * size_t(idx[size_t(r)])),
              static_pairs.adv.data.begin() +
                  static_cast<long>(stride * (size_t(idx[size_t(r)]) + 1)),
              xa.data.begin() + static_cast<long>(stride * static_cast<size_t>(r)));
      } else {
        AttackSpec spec = config.attack;
        spec.seed = derive_seed(config.seed, kTagAttack, static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(batch_idx));
        xa = perturb(model, xb, yb, spec);
      }
    }

    Tape tape;
    std::vector<std::pair<std::string, Var>> param_vars;
    for (const auto& [name, t] : model.params) param_vars.emplace_back(name, tape.leaf(t));
    TapedForward fwd_c = forward_with_params(model, tape, param_vars, xb);

    Var total;
    double loss_clean = 0.0, loss_adv = 0.0, loss_sns = 0.0;
    if (!adversarial) {
      Var ce = tape.softmax_cross_entropy(fwd_c.logits, yb);
      total = tape.scale(ce, 1.0 / b);
      loss_clean = tape.value(total)[0];
    } else {
      TapedForward fwd_a = forward_with_params(model, tape, param_vars, xa);
      Var ce_c = tape.softmax_cross_entropy(fwd_c.logits, yb);
      Var ce_a = tape.softmax_cross_entropy(fwd_a.logits, yb);
      Var adv_loss = config.pure_adversarial && method == Method::Sns
                         ? tape.scale(ce_a, 1.0 / b)
                         : tape.scale(tape.add(ce_c, ce_a), 1.0 / (2.0 * b));
      loss_clean = tape.value(ce_c)[0] / b;
      loss_adv = tape.value(adv_loss)[0];
      total = adv_loss;
      if (method == Method::Alp) {
        Var pairing = tape.l2_norm_squared(tape.sub(fwd_c.logits, fwd_a.logits));
        total = tape.add(total, tape.scale(pairing, config.alp_lambda / b));
      } else if (method == Method::Sns) {
        Var sns = sns_term_on_tape(tape, fwd_c, fwd_a, omega, layer_set, b);
        loss_sns = tape.value(sns)[0];
        total = tape.add(total, tape.scale(sns, config.lambda));
        // Eq.13 bookkeeping identity
        const double recomposed = loss_adv + config.lambda * loss_sns;
        if (std::abs(tape.value(total)[0] - recomposed) > 1e-9)
          throw std::logic_error("sns: loss decomposition mismatch");
      }
    }
    if (!std::isfinite(tape.value(total)[0]))
      throw std::runtime_error("non-finite training loss");

    std::vector<Var> wrt;
    std::vector<size_t> wrt_param;
    for (size_t p = 0; p < param_vars.size(); ++p)
      if (trainable[p]) {
        wrt.push_back(param_vars[p].second);
        wrt_param.push_back(p);
      }
    std::vector<Tensor> grads = tape.backward(total, wrt);

    std::vector<Tensor> full(model.params.size());
    for (size_t g = 0; g < wrt_param.size(); ++g) full[wrt_param[g]] = std::move(grads[g]);
    for (size_t p = 0; p < full.size(); ++p)
      if (!trainable[p]) full[p] = Tensor::zeros(model.params[p].second.shape);
    sgd.step(model, full, trainable, lr, config.momentum);

    sum_clean += loss_clean;
    sum_adv += loss_adv;
    sum_sns += loss_sns;
  }

  void recompute_dyn_omega(int epoch) {
    const int n = data.train.size();
    const int want = std::min(config.dyn_sample_count, n);
    std::vector<int> all(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(config.seed, kTagDyn, static_cast<uint64_t>(epoch)));
    rng.shuffle(all);
    all.resize(static_cast<size_t>(want));

    Dataset subset;
    subset.class_count = data.train.class_count;
    subset.images = data.train.batch(all);
    subset.labels = data.train.batch_labels(all);

    AttackSpec spec = config.attack;
    spec.seed = derive_seed(config.seed, kTagDynAttack, static_cast<uint64_t>(epoch));
    DualPairSet pairs = build_dual_pairs(model, subset, spec);
    std::vector<SensitivityTable> tables = layer_tables(model, pairs, layer_set);
    for (size_t li = 0; li < layer_set.size(); ++li)
      omega[layer_set[li]] =
          select_sensitive_fraction(tables[li], config.sensitive_fraction).channels();
  }
};

Trainer make_trainer(const TrainConfig& config, const DataSplits& data, Method method,
                     Model initial) {
  Trainer t{config, data, method, std::move(initial), {}, {}, {}, {}, {}, false};
  t.trainable.assign(t.model.params.size(), 1);
  return t;
}

}  // namespace

NeuronMode neuron_mode_from_string(const std::string& s) {
  if (s == "sen") return NeuronMode::Sen;
  if (s == "dyn") return NeuronMode::Dyn;
  if (s == "all") return NeuronMode::All;
  if (s == "rand") return NeuronMode::Rand;
  throw std::invalid_argument("unknown neuron mode '" + s + "' (sen, dyn, all, rand)");
}

std::string to_string(NeuronMode mode) {
  switch (mode) {
    case NeuronMode::Sen: return "sen";
    case NeuronMode::Dyn: return "dyn";
    case NeuronMode::All: return "all";
    case NeuronMode::Rand: return "rand";
  }
  return "?";
}

double LrSchedule::at(int epoch) const {
  if (decay_every <= 0 || decay_factor == 1.0) return lr;
  return lr * std::pow(decay_factor, epoch / decay_every);
}

std::string TrainReport::to_jsonl() const {
  std::string out;
  for (const EpochStats& e : epochs) {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["loss_clean"] = e.loss_clean;
    j["loss_adv"] = e.loss_adv;
    j["loss_sns"] = e.loss_sns;
    j["clean_acc"] = e.clean_acc;
    nlohmann::json robust = nlohmann::json::object();
    for (const auto& [name, acc] : e.robust_acc) robust[name] = acc;
    j["robust_acc"] = robust;
    out += j.dump() + "\n";
  }
  nlohmann::json summary;
  summary["summary"] = true;
  summary["method"] = method;
  summary["epochs"] = static_cast<int>(epochs.size());
  if (!epochs.empty()) {
    summary["final_clean_acc"] = epochs.back().clean_acc;
    nlohmann::json robust = nlohmann::json::object();
    for (const auto& [name, acc] : epochs.back().robust_acc) robust[name] = acc;
    summary["final_robust_acc"] = robust;
  }
  if (!omega.empty()) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [layer, channels] : omega) o[layer] = channels;
    summary["omega"] = o;
  }
  summary["frozen_layers"] = frozen_layers;
  out += summary.dump() + "\n";
  return out;
}

double sns_loss(const ActivationRecord& clean, const ActivationRecord& adv,
                const std::map<std::string, std::vector<int>>& omega,
                const std::vector<std::string>& layer_set) {
  if (clean.entries.size() != adv.entries.size())
    throw std::invalid_argument("sns_loss: records cover different layer sets");
  const int batch = clean.batch_size();
  if (batch == 0 || batch != adv.batch_size())
    throw std::invalid_argument("sns_loss: records have mismatched batch sizes");
  double total = 0.0;
  for (const std::string& layer : layer_set) {
    auto it = omega.find(layer);
    if (it == omega.end() || it->second.empty())
      throw std::invalid_argument("sns_loss: empty sensitive-neuron set for layer '" + layer +
                                  "'");
    const Tensor& tc = clean.at(layer);
    const Tensor& ta = adv.at(layer);
    require_same_shape(tc, ta, "sns_loss");
    const int channels = tc.dim(1);
    const size_t plane =
        tc.numel() / static_cast<size_t>(batch) / static_cast<size_t>(channels);
    for (int m : it->second) {
      if (m < 0 || m >= channels)
        throw std::invalid_argument("sns_loss: channel " + std::to_string(m) +
                                    " out of range in layer '" + layer + "'");
      for (int bi = 0; bi < batch; ++bi) {
        const double* pc = tc.data.data() + (size_t(bi) * channels + m) * plane;
        const double* pa = ta.data.data() + (size_t(bi) * channels + m) * plane;
        double diff = 0.0;
        for (size_t j = 0; j < plane; ++j) diff += std::abs(pc[j] - pa[j]);
        total += diff / static_cast<double>(plane);
      }
    }
  }
  return total / batch;
}

TrainResult train_vanilla(const TrainConfig& config, const DataSplits& data) {
  Trainer t = make_trainer(config, data, Method::Vanilla, build_model(config.spec, config.seed));
  return t.run();
}

TrainResult train_pat(const TrainConfig& config, const DataSplits& data) {
  return train_pat(config, data, build_model(config.spec, config.seed));
}

TrainResult train_pat(const TrainConfig& config, const DataSplits& data, const Model& init) {
  if (config.attack.kind != AttackKind::PgdLinf)
    throw std::invalid_argument("pat: training attack must be pgd_linf");
  Trainer t = make_trainer(config, data, Method::Pat, init);
  return t.run();
}

TrainResult train_alp(const TrainConfig& config, const DataSplits& data) {
  if (config.attack.kind != AttackKind::PgdLinf)
    throw std::invalid_argument("alp: training attack must be pgd_linf");
  Trainer t = make_trainer(config, data, Method::Alp, build_model(config.spec, config.seed));
  return t.run();
}

std::vector<std::string> select_layers_topk(const ModelSpec& spec, int k) {
  std::vector<std::string> eligible = conv_layer_names(spec);
  if (eligible.empty()) {
    std::vector<std::string> names = spec.layer_names();
    for (size_t i = 0; i < spec.layers.size(); ++i)
      if (spec.layers[i].kind == LayerKind::Dense) eligible.push_back(names[i]);
  }
  if (k < 1 || k > static_cast<int>(eligible.size()))
    throw std::invalid_argument("select_layers_topk: k=" + std::to_string(k) +
                                " out of range [1," + std::to_string(eligible.size()) + "]");
  return {eligible.end() - k, eligible.end()};
}

TrainResult train_sns(const TrainConfig& config, const DataSplits& data, const Model& base) {
  if (base.spec.to_json() != config.spec.to_json())
    throw std::invalid_argument("sns: base checkpoint spec differs from the configured spec");
  Trainer t = make_trainer(config, data, Method::Sns, base);
  t.layer_set = config.layer_set.empty() ? conv_layer_names(config.spec) : config.layer_set;
  if (t.layer_set.empty()) throw std::invalid_argument("sns: empty layer set");
  t.trainable = trainable_mask(t.model, t.layer_set, config.freeze_below, &t.frozen);

  // Step 1: dual pairs by PGD on the base model, then the stabilized neuron sets
  const bool needs_pairs =
      config.static_pairs || config.mode == NeuronMode::Sen || config.mode == NeuronMode::Dyn;
  DualPairSet pairs;
  if (needs_pairs) {
    AttackSpec spec = config.attack;
    spec.seed = derive_seed(config.seed, kTagStepOne);
    pairs = build_dual_pairs(base, data.train, spec);
    if (config.static_pairs) {
      t.static_pairs = pairs;
      t.have_static_pairs = true;
    }
  }
  switch (config.mode) {
    case NeuronMode::Sen:
    case NeuronMode::Dyn: {
      std::vector<SensitivityTable> tables = layer_tables(base, pairs, t.layer_set);
      for (size_t li = 0; li < t.layer_set.size(); ++li)
        t.omega[t.layer_set[li]] =
            select_sensitive_fraction(tables[li], config.sensitive_fraction).channels();
      break;
    }
    case NeuronMode::All: {
      for (const std::string& layer : t.layer_set) {
        const int c = config.spec.channel_count(layer);
        std::vector<int> all(static_cast<size_t>(c));
        for (int i = 0; i < c; ++i) all[static_cast<size_t>(i)] = i;
        t.omega[layer] = all;
      }
      break;
    }
    case NeuronMode::Rand: {
      Rng rng(derive_seed(config.seed, kTagRand));
      for (const std::string& layer : t.layer_set) {
        const int c = config.spec.channel_count(layer);
        const int want = std::max(
            1, std::min(c, static_cast<int>(std::ceil(config.sensitive_fraction * c))));
        std::vector<int> all(static_cast<size_t>(c));
        for (int i = 0; i < c; ++i) all[static_cast<size_t>(i)] = i;
        rng.shuffle(all);
        all.resize(static_cast<size_t>(want));
        std::sort(all.begin(), all.end());
        t.omega[layer] = all;
      }
      break;
    }
  }
  for (const std::string& layer : t.layer_set)
    if (t.omega[layer].empty())
      throw std::invalid_argument("sns: empty sensitive-neuron set for layer '" + layer + "'");
  return t.run();
}

EvalResult evaluate(const Model& model, const Dataset& dataset,
                    const std::vector<AttackSpec>& attacks) {
  if (dataset.size() == 0) throw std::invalid_argument("evaluate: empty split");
  EvalResult result;
  result.clean_acc = clean_accuracy(model, dataset);
  for (const AttackSpec& spec : attacks)
    result.robust_acc.emplace_back(spec.name(), robust_accuracy(model, dataset, spec));
  return result;
}

}  // namespace nsns
