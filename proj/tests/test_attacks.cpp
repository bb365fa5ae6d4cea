#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "nsns/attacks.hpp"
#include "nsns/rng.hpp"
#include "nsns/trainer.hpp"

using namespace nsns;

namespace {

std::string temp_path(const char* name) {
  return std::string("/tmp/nsns_atk_") + name + "_" + std::to_string(::getpid());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// flatten + dense(2) with weights making grad CE w.r.t. x = [+g, -g] at x=[.5,.5].
Model two_feature_model() {
  ModelSpec spec;
  spec.input_shape = {2, 1, 1};
  spec.class_count = 2;
  spec.layers = {LayerDesc::flatten(), LayerDesc::dense(2)};
  Model m = build_model(spec, 0);
  m.param("fc1.weight") = Tensor({2, 2}, {0.0, 0.0, 2.0, -2.0});
  return m;
}

Model tiny_conv_model(uint64_t seed) {
  ModelSpec spec;
  spec.input_shape = {3, 8, 8};
  spec.class_count = 4;
  spec.layers = {LayerDesc::conv(6, 3, 1, 1), LayerDesc::relu(), LayerDesc::global_avg_pool(),
                 LayerDesc::dense(4)};
  return build_model(spec, seed);
}

double linf_dist(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("fgsm with zero budget returns the input") {
  Model m = two_feature_model();
  Tensor x({1, 2, 1, 1}, {0.5, 0.5});
  Tensor xa = fgsm(m, x, {0}, AttackSpec::fgsm(0.0));
  CHECK(xa.data == x.data);
}

TEST_CASE("fgsm follows the analytic gradient sign of a linear-softmax model") {
  Model m = two_feature_model();
  Tensor x({1, 2, 1, 1}, {0.5, 0.5});
  Tensor g = input_gradient(m, x, {0});
  CHECK(g[0] > 0.0);
  CHECK(g[1] < 0.0);
  Tensor xa = fgsm(m, x, {0}, AttackSpec::fgsm(0.1));
  CHECK(xa[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(xa[1] == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("fgsm clamps to the pixel range") {
  Model m = two_feature_model();
  Tensor x({1, 2, 1, 1}, {0.99, 0.5});
  Tensor xa = fgsm(m, x, {0}, AttackSpec::fgsm(0.1));
  CHECK(xa[0] == 1.0);
}

TEST_CASE("pgd keeps every iterate inside the linf ball and the pixel range") {
  Model m = tiny_conv_model(3);
  Rng rng(4);
  Tensor x({8, 3, 8, 8});
  for (double& v : x.data) v = rng.uniform01();
  std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  const double eps = 0.05;
  AttackSpec spec = AttackSpec::pgd_linf(eps, 7, 0.0, 11);
  int iterations = 0;
  Tensor xa = pgd(m, x, y, spec, 0, [&](const Tensor& cur) {
    ++iterations;
    for (int i = 0; i < 8; ++i) {
      double d = 0.0;
      for (int p = 0; p < 192; ++p)
        d = std::max(d, std::abs(cur[size_t(i) * 192 + p] - x[size_t(i) * 192 + p]));
      CHECK(d <= eps + 1e-9);
    }
    for (double v : cur.data) CHECK((v >= 0.0 && v <= 1.0));
  });
  CHECK(iterations == 7);
  CHECK(linf_dist(xa, x) <= eps + 1e-9);
}

TEST_CASE("pgd l2 projects exactly onto the ball surface when it overshoots") {
  Model m = tiny_conv_model(5);
  Rng rng(6);
  Tensor x({4, 3, 8, 8});
  for (double& v : x.data) v = rng.uniform(0.3, 0.7);  // keep clamp inactive
  std::vector<int> y{0, 1, 2, 3};
  const double eps = 0.01;  // small enough that steps overshoot
  AttackSpec spec = AttackSpec::pgd_l2(eps, 5, 0.02, 21);
  Tensor xa = pgd(m, x, y, spec);
  for (int i = 0; i < 4; ++i) {
    double norm2 = 0.0;
    for (int p = 0; p < 192; ++p) {
      double d = xa[size_t(i) * 192 + p] - x[size_t(i) * 192 + p];
      norm2 += d * d;
    }
    double norm = std::sqrt(norm2);
    CHECK(norm <= eps * (1.0 + 1e-9));
    CHECK(norm == doctest::Approx(eps).epsilon(1e-9));
  }
}

TEST_CASE("single-step pgd without random start matches an fgsm-style step") {
  Model m = tiny_conv_model(7);
  Rng rng(8);
  Tensor x({2, 3, 8, 8});
  for (double& v : x.data) v = rng.uniform01();
  std::vector<int> y{1, 2};
  AttackSpec spec = AttackSpec::pgd_linf(0.03, 1, 0.03, 0);
  spec.random_start = false;
  Tensor via_pgd = pgd(m, x, y, spec);
  Tensor via_fgsm = fgsm(m, x, y, AttackSpec::fgsm(0.03));
  CHECK(via_pgd.data == via_fgsm.data);
}

TEST_CASE("paper pgd parameterization wires alpha = eps/sqrt(k)") {
  AttackSpec spec = AttackSpec::pgd_linf(8.0 / 255.0, 10);
  CHECK(spec.step_size == doctest::Approx(8.0 / 255.0 / std::sqrt(10.0)).epsilon(1e-12));
}

TEST_CASE("gaussian corruption is deterministic with the configured spread") {
  Tensor x({1000, 1, 32, 32});
  for (double& v : x.data) v = 0.5;
  AttackSpec spec = AttackSpec::gaussian(3, 17);
  Tensor a = gaussian_corrupt(x, spec);
  Tensor b = gaussian_corrupt(x, spec);
  CHECK(a.data == b.data);

  // empirical spread of the additive noise before clamping
  double mean = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) mean += a[i] - x[i];
  mean /= static_cast<double>(a.numel());
  double var = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    double d = (a[i] - x[i]) - mean;
    var += d * d;
  }
  var /= static_cast<double>(a.numel());
  CHECK(std::abs(std::sqrt(var) - 0.12) <= 0.02 * 0.12);

  AttackSpec s1 = AttackSpec::gaussian(1, 3);
  Tensor c = gaussian_corrupt(x, s1);
  double m1 = 0.0;
  for (double v : c.data) m1 += v;
  m1 /= static_cast<double>(c.numel());
  CHECK(std::abs(m1 - 0.5) <= 0.003);

  AttackSpec bad;
  bad.kind = AttackKind::Gaussian;
  bad.severity = 6;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("severity"), std::invalid_argument);
}

TEST_CASE("dual pair sets align, preserve labels and reproduce bitwise") {
  Dataset ds = synth_dataset(SynthKind::Blobs, 4, 100, 8, 0.1, 31);
  ModelSpec spec1 = ModelSpec::mlp_small({1, 8, 8}, 4);
  Model mlp = build_model(spec1, 1);
  AttackSpec attack = AttackSpec::pgd_linf(0.03, 3, 0.0, 5);
  DualPairSet pairs = build_dual_pairs(mlp, ds, attack);
  CHECK(pairs.size() == 100);
  CHECK(pairs.labels == ds.labels);
  CHECK(pairs.clean.data == ds.images.data);
  for (size_t i = 0; i < pairs.adv.numel(); ++i)
    CHECK(std::abs(pairs.adv[i] - pairs.clean[i]) <= 0.03 + 1e-9);

  DualPairSet again = build_dual_pairs(mlp, ds, attack);
  CHECK(again.adv.data == pairs.adv.data);

  AttackSpec zero = AttackSpec::pgd_linf(0.0, 3, 0.0, 5);
  DualPairSet still = build_dual_pairs(mlp, ds, zero);
  CHECK(still.adv.data == still.clean.data);
}

TEST_CASE("pair files round-trip bit-exactly and reject corruption") {
  ModelSpec spec = ModelSpec::mlp_small({1, 6, 6}, 3);
  Model m = build_model(spec, 2);
  Dataset ds = synth_dataset(SynthKind::Blobs, 3, 12, 6, 0.1, 8);
  DualPairSet pairs = build_dual_pairs(m, ds, AttackSpec::fgsm(0.02, 3));
  pairs.target_class = 1;

  std::string path = temp_path("pairs");
  save_pairs(pairs, path);
  DualPairSet loaded = load_pairs(path);
  CHECK(loaded.size() == pairs.size());
  CHECK(loaded.labels == pairs.labels);
  CHECK(loaded.target_class == pairs.target_class);

  std::string bytes = slurp(path);
  std::string path2 = temp_path("pairs2");
  save_pairs(loaded, path2);  // f32 storage makes the second save bit-identical
  CHECK(slurp(path2) == bytes);

  std::string bad = bytes;
  bad[0] = 'Z';
  std::ofstream(path, std::ios::binary | std::ios::trunc).write(bad.data(), bad.size());
  CHECK_THROWS_WITH_AS(load_pairs(path), doctest::Contains("bad pair-file magic"),
                       std::runtime_error);
  bad = bytes;
  bad[8] = 9;
  std::ofstream(path, std::ios::binary | std::ios::trunc).write(bad.data(), bad.size());
  CHECK_THROWS_WITH_AS(load_pairs(path), doctest::Contains("unsupported pair-file version"),
                       std::runtime_error);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("targeted sets follow the selection protocol") {
  ModelSpec spec = ModelSpec::mlp_small({1, 8, 8}, 3);
  Model m = build_model(spec, 4);
  Dataset ds = synth_dataset(SynthKind::Blobs, 3, 60, 8, 0.15, 12);

  AttackSpec spec_t = AttackSpec::pgd_linf(0.2, 5, 0.0, 9).with_target(1);
  TargetedResult result = targeted_set(m, ds, 1, spec_t);
  int pool = 0;
  for (int y : ds.labels)
    if (y != 1) ++pool;
  CHECK(result.attempted == pool);
  for (int i = 0; i < result.set.size(); ++i)
    CHECK(result.set.labels[size_t(i)] != 1);
  if (result.set.size() > 0) {
    std::vector<int> pred = predict_labels(m, result.set.adv);
    for (int p : pred) CHECK(p == 1);
    CHECK(result.set.target_class == 1);
  }

  // a dataset entirely of the target class leaves nothing to attack
  Dataset only;
  only.class_count = 3;
  only.images = ds.images;
  only.labels.assign(ds.labels.size(), 1);
  TargetedResult none = targeted_set(m, only, 1, spec_t);
  CHECK(none.attempted == 0);
  CHECK(none.set.size() == 0);
  CHECK(none.success_rate() == 0.0);
}

TEST_CASE("untargeted pgd pushes the true-class loss up on a trained model") {
  Dataset ds = synth_dataset(SynthKind::Blobs, 3, 120, 8, 0.1, 21);
  auto [train, val, test] = split(ds, 0.8, 0.2, 0.0, 2);
  TrainConfig config;
  config.spec = ModelSpec::mlp_small({1, 8, 8}, 3);
  config.epochs = 4;
  config.batch = 32;
  config.schedule.lr = 0.2;
  config.seed = 5;
  config.eval_robust = false;
  TrainResult trained = train_vanilla(config, {train, val});

  AttackSpec attack = AttackSpec::pgd_linf(0.05, 5, 0.0, 77);
  int improved = 0;
  const int n = train.size();
  Tensor x = train.images;
  Tensor xa = pgd(trained.model, x, train.labels, attack);
  for (int i = 0; i < n; ++i) {
    auto ce = [&](const Tensor& batch, int row) {
      Tensor logits = forward(trained.model, batch);
      const int k = logits.dim(1);
      const double* r = logits.data.data() + size_t(row) * k;
      double mx = r[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, r[j]);
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += std::exp(r[j] - mx);
      return mx + std::log(z) - r[train.labels[size_t(i)]];
    };
    if (ce(xa, i) >= ce(x, i) - 1e-6) ++improved;
  }
  CHECK(improved >= static_cast<int>(0.95 * n));
}
