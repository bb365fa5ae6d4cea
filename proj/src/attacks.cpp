#include "nsns/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nsns/binio.hpp"
#include "nsns/rng.hpp"

namespace nsns {

namespace {

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void clamp01(Tensor& t) {
  for (double& v : t.data) v = std::min(1.0, std::max(0.0, v));
}

size_t per_sample(const Tensor& x) { return x.numel() / static_cast<size_t>(x.dim(0)); }

}  // namespace

void AttackSpec::validate() const {
  if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (kind == AttackKind::PgdLinf || kind == AttackKind::PgdL2) {
    if (steps < 1) throw std::invalid_argument("attack: pgd needs k >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("attack: pgd needs step size alpha > 0");
  }
  if (kind == AttackKind::Gaussian && (severity < 1 || severity > 5))
    throw std::invalid_argument("attack: gaussian severity must be in 1..5, got " +
                                std::to_string(severity));
  if (targeted && target_class < 0)
    throw std::invalid_argument("attack: targeted spec needs a target class");
}

std::string AttackSpec::name() const {
  switch (kind) {
    case AttackKind::Fgsm: return "fgsm_e" + fmt_g(epsilon);
    case AttackKind::PgdLinf:
      return "pgd_linf_e" + fmt_g(epsilon) + "_k" + std::to_string(steps);
    case AttackKind::PgdL2: return "pgd_l2_e" + fmt_g(epsilon) + "_k" + std::to_string(steps);
    case AttackKind::Gaussian: return "gaussian_s" + std::to_string(severity);
  }
  return "?";
}

AttackSpec AttackSpec::fgsm(double epsilon, uint64_t seed) {
  AttackSpec s;
  s.kind = AttackKind::Fgsm;
  s.epsilon = epsilon;
  s.seed = seed;
  s.validate();
  return s;
}

AttackSpec AttackSpec::pgd_linf(double epsilon, int k, double alpha, uint64_t seed) {
  AttackSpec s;
  s.kind = AttackKind::PgdLinf;
  s.epsilon = epsilon;
  s.steps = k;
  s.step_size = alpha > 0.0 ? alpha : epsilon / std::sqrt(static_cast<double>(k));
  if (!(s.step_size > 0.0)) s.step_size = 1e-12;  // epsilon == 0 degenerate case
  s.seed = seed;
  s.validate();
  return s;
}

AttackSpec AttackSpec::pgd_l2(double epsilon, int k, double alpha, uint64_t seed) {
  AttackSpec s = pgd_linf(epsilon, k, alpha, seed);
  s.kind = AttackKind::PgdL2;
  return s;
}

AttackSpec AttackSpec::gaussian(int severity, uint64_t seed) {
  AttackSpec s;
  s.kind = AttackKind::Gaussian;
  s.severity = severity;
  s.seed = seed;
  s.validate();
  return s;
}

AttackSpec AttackSpec::with_target(int target) const {
  AttackSpec s = *this;
  s.targeted = true;
  s.target_class = target;
  s.validate();
  return s;
}

double gaussian_severity_std(int severity) {
  static const double table[5] = {0.04, 0.08, 0.12, 0.16, 0.20};
  if (severity < 1 || severity > 5)
    throw std::invalid_argument("gaussian severity must be in 1..5, got " +
                                std::to_string(severity));
  return table[severity - 1];
}

Tensor input_gradient(const Model& model, const Tensor& x, const std::vector<int>& labels) {
  Tape tape;
  TapedForward tf = forward_on_tape(model, tape, x);
  Var loss = tape.softmax_cross_entropy(tf.logits, labels);
  Tensor g = tape.backward_one(loss, tf.input);
  if (!g.all_finite()) throw std::runtime_error("attack: non-finite input gradient");
  return g;
}

Tensor DualPairSet::clean_sample(int i) const {
  const size_t stride = per_sample(clean);
  std::vector<int> shape(clean.shape.begin() + 1, clean.shape.end());
  Tensor out(shape);
  std::copy(clean.data.begin() + static_cast<long>(stride * static_cast<size_t>(i)),
            clean.data.begin() + static_cast<long>(stride * (static_cast<size_t>(i) + 1)),
            out.data.begin());
  return out;
}

Tensor DualPairSet::adv_sample(int i) const {
  const size_t stride = per_sample(adv);
  std::vector<int> shape(adv.shape.begin() + 1, adv.shape.end());
  Tensor out(shape);
  std::copy(adv.data.begin() + static_cast<long>(stride * static_cast<size_t>(i)),
            adv.data.begin() + static_cast<long>(stride * (static_cast<size_t>(i) + 1)),
            out.data.begin());
  return out;
}

void DualPairSet::validate() const {
  if (labels.empty()) throw std::runtime_error("dual pair set: empty");
  if (!clean.same_shape(adv))
    throw std::runtime_error("dual pair set: clean shape " + clean.shape_str() +
                             " != adversarial shape " + adv.shape_str());
  if (clean.dim(0) != static_cast<int>(labels.size()))
    throw std::runtime_error("dual pair set: label count mismatch");
}

namespace {
constexpr char kPairMagic[8] = {'N', 'S', 'N', 'S', 'P', 'A', 'I', 'R'};
constexpr uint16_t kPairVersion = 1;
}  // namespace

void save_pairs(const DualPairSet& pairs, const std::string& path) {
  pairs.validate();
  std::ostringstream out(std::ios::binary);
  out.write(kPairMagic, 8);
  write_u16(out, kPairVersion);
  write_u32(out, static_cast<uint32_t>(pairs.size()));
  for (int i = 0; i < pairs.size(); ++i) {
    write_u16(out, static_cast<uint16_t>(pairs.labels[static_cast<size_t>(i)]));
    write_tensor_f32(out, pairs.clean_sample(i));
    write_tensor_f32(out, pairs.adv_sample(i));
  }
  write_u16(out, pairs.target_class ? static_cast<uint16_t>(*pairs.target_class) : 0xFFFF);
  atomic_write_file(path, out.str());
}

DualPairSet load_pairs(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open pair file '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kPairMagic, 8) != 0)
    throw std::runtime_error("bad pair-file magic in '" + path + "'");
  uint16_t version = read_u16(in, "pair-file version");
  if (version != kPairVersion)
    throw std::runtime_error("unsupported pair-file version " + std::to_string(version) +
                             " in '" + path + "' (supported: 1)");
  uint32_t n = read_u32(in, "pair count");
  if (n == 0) throw std::runtime_error("pair file '" + path + "' holds no pairs");
  DualPairSet pairs;
  pairs.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    pairs.labels[i] = read_u16(in, "pair label");
    Tensor clean = read_tensor_f32(in, "clean tensor");
    Tensor adv = read_tensor_f32(in, "adversarial tensor");
    require_same_shape(clean, adv, "pair file");
    if (i == 0) {
      std::vector<int> shape{static_cast<int>(n)};
      shape.insert(shape.end(), clean.shape.begin(), clean.shape.end());
      pairs.clean = Tensor(shape);
      pairs.adv = Tensor(shape);
    }
    const size_t stride = clean.numel();
    std::copy(clean.data.begin(), clean.data.end(), pairs.clean.data.begin() + long(stride * i));
    std::copy(adv.data.begin(), adv.data.end(), pairs.adv.data.begin() + long(stride * i));
  }
  uint16_t target = read_u16(in, "pair target class");
  if (target != 0xFFFF) pairs.target_class = target;
  pairs.validate();
  return pairs;
}

Tensor fgsm(const Model& model, const Tensor& x, const std::vector<int>& y,
            const AttackSpec& spec) {
  spec.validate();
  if (spec.kind != AttackKind::Fgsm) throw std::invalid_argument("fgsm: wrong attack kind");
  std::vector<int> labels = y;
  double direction = 1.0;
  if (spec.targeted) {
    labels.assign(y.size(), spec.target_class);
    direction = -1.0;  // descend toward the target class
  }
  Tensor g = input_gradient(model, x, labels);
  Tensor out = x;
  for (size_t i = 0; i < out.numel(); ++i) {
    double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    out.data[i] += direction * spec.epsilon * s;
  }
  clamp01(out);
  return out;
}

Tensor pgd(const Model& model, const Tensor& x, const std::vector<int>& y, const AttackSpec& spec,
           uint64_t first_sample_index, const std::function<void(const Tensor&)>& observer) {
  spec.validate();
  if (spec.kind != AttackKind::PgdLinf && spec.kind != AttackKind::PgdL2)
    throw std::invalid_argument("pgd: wrong attack kind");
  const bool linf = spec.kind == AttackKind::PgdLinf;
  const int n = x.dim(0);
  const size_t stride = per_sample(x);
  const double eps = spec.epsilon;

  std::vector<int> labels = y;
  double direction = 1.0;
  if (spec.targeted) {
    labels.assign(y.size(), spec.target_class);
    direction = -1.0;
  }

  Tensor cur = x;
  if (spec.random_start && eps > 0.0) {
    for (int i = 0; i < n; ++i) {
      Rng rng(derive_seed(spec.seed, first_sample_index + static_cast<uint64_t>(i)));
      double* p = cur.data.data() + stride * static_cast<size_t>(i);
      if (linf) {
        for (size_t j = 0; j < stride; ++j) p[j] += rng.uniform(-eps, eps);
      } else {
        std::vector<double> dir(stride);
        double norm2 = 0.0;
        for (size_t j = 0; j < stride; ++j) {
          dir[j] = rng.normal();
          norm2 += dir[j] * dir[j];
        }
        const double norm = std::sqrt(norm2);
        if (norm > 0.0) {
          const double radius =
              eps * std::pow(rng.uniform01(), 1.0 / static_cast<double>(stride));
          for (size_t j = 0; j < stride; ++j) p[j] += radius * dir[j] / norm;
        }
      }
    }
    clamp01(cur);
  }

  auto project_and_check = [&](Tensor& t) {
    for (int i = 0; i < n; ++i) {
      double* p = t.data.data() + stride * static_cast<size_t>(i);
      const double* p0 = x.data.data() + stride * static_cast<size_t>(i);
      if (linf) {
        for (size_t j = 0; j < stride; ++j)
          p[j] = std::min(p0[j] + eps, std::max(p0[j] - eps, p[j]));
      } else {
        double norm2 = 0.0;
        for (size_t j = 0; j < stride; ++j) {
          const double d = p[j] - p0[j];
          norm2 += d * d;
        }
        const double norm = std::sqrt(norm2);
        if (norm > eps && norm > 0.0) {
          const double f = eps / norm;
          for (size_t j = 0; j < stride; ++j) p[j] = p0[j] + f * (p[j] - p0[j]);
        }
      }
    }
    clamp01(t);
    // projection invariant, enforced after every iteration
    for (int i = 0; i < n; ++i) {
      const double* p = t.data.data() + stride * static_cast<size_t>(i);
      const double* p0 = x.data.data() + stride * static_cast<size_t>(i);
      double measure = 0.0;
      if (linf) {
        for (size_t j = 0; j < stride; ++j) measure = std::max(measure, std::abs(p[j] - p0[j]));
      } else {
        for (size_t j = 0; j < stride; ++j) measure += (p[j] - p0[j]) * (p[j] - p0[j]);
        measure = std::sqrt(measure);
      }
      if (measure > eps * (1.0 + 1e-9) + 1e-12)
        throw std::logic_error("pgd: projection violated the epsilon ball");
    }
  };

  project_and_check(cur);
  for (int step = 0; step < spec.steps; ++step) {
    Tensor g = input_gradient(model, cur, labels);
    if (linf) {
      for (size_t j = 0; j < cur.numel(); ++j) {
        double s = g[j] > 0.0 ? 1.0 : (g[j] < 0.0 ? -1.0 : 0.0);
        cur.data[j] += direction * spec.step_size * s;
      }
    } else {
      for (int i = 0; i < n; ++i) {
        double* p = cur.data.data() + stride * static_cast<size_t>(i);
        const double* gp = g.data.data() + stride * static_cast<size_t>(i);
        double norm2 = 0.0;
        for (size_t j = 0; j < stride; ++j) norm2 += gp[j] * gp[j];
        const double norm = std::sqrt(norm2);
        if (norm > 0.0)
          for (size_t j = 0; j < stride; ++j)
            p[j] += direction * spec.step_size * gp[j] / norm;
      }
    }
    project_and_check(cur);
    if (observer) observer(cur);
  }
  return cur;
}

Tensor gaussian_corrupt(const Tensor& x, const AttackSpec& spec, uint64_t first_sample_index) {
  spec.validate();
  if (spec.kind != AttackKind::Gaussian)
    throw std::invalid_argument("gaussian_corrupt: wrong attack kind");
  const double std_dev = gaussian_severity_std(spec.severity);
  const int n = x.dim(0);
  const size_t stride = per_sample(x);
  Tensor out = x;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(spec.seed, first_sample_index + static_cast<uint64_t>(i)));
    double* p = out.data.data() + stride * static_cast<size_t>(i);
    for (size_t j = 0; j < stride; ++j) p[j] += rng.normal(0.0, std_dev);
  }
  clamp01(out);
  return out;
}

Tensor perturb(const Model& model, const Tensor& x, const std::vector<int>& y,
               const AttackSpec& spec, uint64_t first_sample_index) {
  switch (spec.kind) {
    case AttackKind::Fgsm: return fgsm(model, x, y, spec);
    case AttackKind::PgdLinf:
    case AttackKind::PgdL2: return pgd(model, x, y, spec, first_sample_index);
    case AttackKind::Gaussian: return gaussian_corrupt(x, spec, first_sample_index);
  }
  throw std::invalid_argument("perturb: unknown attack kind");
}

DualPairSet build_dual_pairs(const Model& model, const Dataset& dataset, const AttackSpec& spec) {
  spec.validate();
  if (dataset.size() == 0) throw std::invalid_argument("build_dual_pairs: empty dataset");
  DualPairSet pairs;
  pairs.labels = dataset.labels;
  pairs.clean = dataset.images;
  pairs.adv = Tensor(dataset.images.shape);

  const int chunk = 64;
  const size_t stride = per_sample(dataset.images);
  for (int start = 0; start < dataset.size(); start += chunk) {
    const int end = std::min(dataset.size(), start + chunk);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<size_t>(i - start)] = i;
    Tensor xb = dataset.batch(idx);
    Tensor xa = perturb(model, xb, dataset.batch_labels(idx), spec,
                        static_cast<uint64_t>(start));
    std::copy(xa.data.begin(), xa.data.end(),
              pairs.adv.data.begin() + static_cast<long>(stride * static_cast<size_t>(start)));
  }
  pairs.validate();
  return pairs;
}

TargetedResult targeted_set(const Model& model, const Dataset& dataset, int target_class,
                            const AttackSpec& spec) {
  spec.validate();
  if (!spec.targeted || spec.target_class != target_class)
    throw std::invalid_argument("targeted_set: spec must be targeted at class " +
                                std::to_string(target_class));
  std::vector<int> pool;
  for (int i = 0; i < dataset.size(); ++i)
    if (dataset.labels[static_cast<size_t>(i)] != target_class) pool.push_back(i);

  TargetedResult result;
  result.attempted = static_cast<int>(pool.size());
  if (pool.empty()) return result;

  std::vector<int> kept;
  std::vector<Tensor> kept_adv;
  const int chunk = 64;
  for (size_t start = 0; start < pool.size(); start += chunk) {
    const size_t end = std::min(pool.size(), start + chunk);
    std::vector<int> idx(pool.begin() + static_cast<long>(start),
                         pool.begin() + static_cast<long>(end));
    Tensor xb = dataset.batch(idx);
    // per-sample seeds follow the pool position
    Tensor xa = perturb(model, xb, dataset.batch_labels(idx), spec, start);
    std::vector<int> pred = predict_labels(model, xa);
    const size_t stride = xa.numel() / idx.size();
    for (size_t r = 0; r < idx.size(); ++r)
      if (pred[r] == target_class) {
        kept.push_back(idx[r]);
        std::vector<int> shape(xa.shape.begin() + 1, xa.shape.end());
        Tensor t(shape);
        std::copy(xa.data.begin() + static_cast<long>(stride * r),
                  xa.data.begin() + static_cast<long>(stride * (r + 1)), t.data.begin());
        kept_adv.push_back(std::move(t));
      }
  }
  if (kept.empty()) return result;

  DualPairSet& pairs = result.set;
  pairs.target_class = target_class;
  pairs.labels = dataset.batch_labels(kept);
  pairs.clean = dataset.batch(kept);
  pairs.adv = Tensor(pairs.clean.shape);
  const size_t stride = per_sample(pairs.clean);
  for (size_t r = 0; r < kept_adv.size(); ++r)
    std::copy(kept_adv[r].data.begin(), kept_adv[r].data.end(),
              pairs.adv.data.begin() + static_cast<long>(stride * r));
  pairs.validate();
  return result;
}

double clean_accuracy(const Model& model, const Dataset& dataset) {
  if (dataset.size() == 0) throw std::invalid_argument("clean_accuracy: empty dataset");
  int hits = 0;
  const int chunk = 128;
  for (int start = 0; start < dataset.size(); start += chunk) {
    const int end = std::min(dataset.size(), start + chunk);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<size_t>(i - start)] = i;
    std::vector<int> pred = predict_labels(model, dataset.batch(idx));
    for (size_t r = 0; r < idx.size(); ++r)
      if (pred[r] == dataset.labels[static_cast<size_t>(idx[r])]) ++hits;
  }
  return static_cast<double>(hits) / dataset.size();
}

double robust_accuracy(const Model& model, const Dataset& dataset, const AttackSpec& spec) {
  if (dataset.size() == 0) throw std::invalid_argument("robust_accuracy: empty dataset");
  int hits = 0;
  const int chunk = 64;
  for (int start = 0; start < dataset.size(); start += chunk) {
    const int end = std::min(dataset.size(), start + chunk);
    std::vector<int> idx(static_cast<size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<size_t>(i - start)] = i;
    std::vector<int> labels = dataset.batch_labels(idx);
    Tensor xa = perturb(model, dataset.batch(idx), labels, spec, static_cast<uint64_t>(start));
    std::vector<int> pred = predict_labels(model, xa);
    for (size_t r = 0; r < idx.size(); ++r)
      if (pred[r] == labels[r]) ++hits;
  }
  return static_cast<double>(hits) / dataset.size();
}

}  // namespace nsns
