#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "nsns/attribution.hpp"
#include "nsns/rng.hpp"
#include "nsns/sensitivity.hpp"
#include "nsns/trainer.hpp"
#include "oracles.hpp"

using namespace nsns;

namespace {

std::vector<int> random_sequence(Rng& rng, int max_len, int alphabet) {
  const int len = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_len) + 1));
  std::vector<int> out(static_cast<size_t>(len));
  for (int& v : out) v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(alphabet)));
  return out;
}

/// width-8 penultimate layer with controllable activations via a 1x1 conv.
Model probe_model(uint64_t seed) {
  ModelSpec spec;
  spec.input_shape = {8, 1, 1};
  spec.class_count = 3;
  spec.layers = {LayerDesc::conv(8, 1, 1, 0), LayerDesc::global_avg_pool(),
                 LayerDesc::dense(3)};
  return build_model(spec, seed);
}

}  // namespace

TEST_CASE("contribution is activation times weight") {
  Model m = probe_model(1);
  ActivationRecord record;
  Tensor penult({1, 8});
  penult.data = {2.0, 0.0, 1.0, 0.5, -1.0, 3.0, 0.25, 1.5};
  record.entries.emplace_back("gap1", penult);
  Tensor weights({3, 8});
  for (size_t i = 0; i < weights.numel(); ++i) weights[i] = 0.1 * static_cast<double>(i);

  CHECK(contribution(record, "gap1", weights, 0, 0) == doctest::Approx(0.0).epsilon(1e-12));
  weights[0] = 0.5;
  CHECK(contribution(record, "gap1", weights, 0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(contribution(record, "gap1", weights, 1, 0) == 0.0);  // zero activation
  CHECK_THROWS_AS(contribution(record, "gap1", weights, 8, 0), std::invalid_argument);
  CHECK_THROWS_AS(contribution(record, "gap1", weights, 0, 3), std::invalid_argument);
}

TEST_CASE("contributions plus bias reconstruct the logit") {
  Rng rng(7);
  Model m = probe_model(2);
  const Tensor& weights = m.param("fc1.weight");
  const Tensor& bias = m.param("fc1.bias");
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({1, 8, 1, 1});
    for (double& v : x.data) v = rng.uniform01();
    auto [logits, record] = forward_record(m, x);
    for (int y = 0; y < 3; ++y) {
      double sum = bias[static_cast<size_t>(y)];
      for (int mm = 0; mm < 8; ++mm) sum += contribution(record, "gap1", weights, mm, y);
      CHECK(sum == doctest::Approx(logits[static_cast<size_t>(y)]).epsilon(1e-9));
    }
  }
}

TEST_CASE("important neurons rank the full width and break ties by index") {
  Model m = probe_model(3);
  // all-zero input gives all-zero penultimate activations -> phi all zero
  Tensor zero({1, 8, 1, 1});
  NeuronSequence seq = important_neurons(m, zero, 1, 5);
  CHECK(seq.neurons == std::vector<int>{0, 1, 2, 3, 4});

  Rng rng(8);
  Tensor x({1, 8, 1, 1});
  for (double& v : x.data) v = rng.uniform01();
  NeuronSequence full = important_neurons(m, x, 2, 8);
  std::vector<int> sorted = full.neurons;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(8);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(sorted == expect);
  CHECK_THROWS_AS(important_neurons(m, x, 1, 9), std::invalid_argument);
}

TEST_CASE("voting aggregates per-image rankings with k..1 votes") {
  Model m = probe_model(4);

  DualPairSet single;
  single.target_class = 1;
  single.labels = {0};
  single.clean = Tensor({1, 8, 1, 1});
  single.adv = Tensor({1, 8, 1, 1});
  Rng rng(9);
  for (double& v : single.adv.data) v = rng.uniform01();
  NeuronSequence gamma = vote_important(m, single, 4);
  NeuronSequence pi = important_neurons(m, single.adv_sample(0), 1, 4);
  CHECK(gamma.neurons == pi.neurons);  // a single voter decides alone

  DualPairSet empty;
  empty.target_class = 1;
  CHECK_THROWS_WITH_AS(vote_important(m, empty, 3),
                       doctest::Contains("no successful targeted examples"),
                       std::invalid_argument);
}

TEST_CASE("voting equals the brute-force tally on exhaustive small cases") {
  Model m = probe_model(5);
  Rng rng(10);
  for (int images = 1; images <= 10; ++images) {
    for (int k : {1, 3, 5}) {
      DualPairSet set;
      set.target_class = 2;
      set.labels.assign(static_cast<size_t>(images), 0);
      set.clean = Tensor({images, 8, 1, 1});
      set.adv = Tensor({images, 8, 1, 1});
      for (double& v : set.adv.data) v = rng.uniform01();

      std::vector<std::vector<int>> per_image;
      for (int i = 0; i < images; ++i)
        per_image.push_back(important_neurons(m, set.adv_sample(i), 2, k).neurons);
      std::vector<int> expect = oracle::vote_brute(per_image, k, 8);
      CHECK(vote_important(m, set, k).neurons == expect);
    }
  }
}

TEST_CASE("hand-run voting example with the tie rule") {
  // two voters: [3,7] and [7,3] with k=2 -> tallies {3: 2+1, 7: 1+2} -> tie -> [3,7]
  std::vector<std::vector<int>> orders{{3, 7}, {7, 3}};
  CHECK(oracle::vote_brute(orders, 2, 8) == std::vector<int>{3, 7});
}

TEST_CASE("spearman identities and hand values") {
  for (int n : {3, 10, 50}) {
    std::vector<int> id(static_cast<size_t>(n));
    std::iota(id.begin(), id.end(), 1);
    CHECK(spearman(id, id) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<int> rev(id.rbegin(), id.rend());
    CHECK(spearman(id, rev) == doctest::Approx(-1.0).epsilon(1e-12));
  }
  CHECK(spearman({1, 2, 3}, {2, 1, 3}) == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(spearman({1, 2, 3}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_WITH_AS(spearman({1, 2, 2}, {1, 2, 3}), doctest::Contains("not a permutation"),
                       std::invalid_argument);
  CHECK_THROWS_AS(spearman({1}, {1}), std::invalid_argument);
}

TEST_CASE("levenshtein distance on the worked examples") {
  CHECK(levenshtein_distance({5, 6, 7}, {5, 6, 7}) == 0);
  CHECK(levenshtein_distance({1, 2, 3, 4}, {1, 3, 4}) == 1);
  CHECK(levenshtein_distance({1, 2}, {3, 4}) == 2);
  CHECK(levenshtein_distance({}, {1, 2, 3}) == 3);
}

TEST_CASE("levenshtein dp equals the memoized oracle and is a metric") {
  Rng rng(11);
  std::vector<std::vector<int>> pool;
  for (int i = 0; i < 60; ++i) pool.push_back(random_sequence(rng, 12, 8));
  for (int i = 0; i < 400; ++i) {
    const std::vector<int>& a = pool[rng.uniform_int(pool.size())];
    const std::vector<int>& b = pool[rng.uniform_int(pool.size())];
    const std::vector<int>& c = pool[rng.uniform_int(pool.size())];
    int ab = levenshtein_distance(a, b);
    CHECK(ab == oracle::levenshtein_memo(a, b));
    CHECK(ab == levenshtein_distance(b, a));
    CHECK(levenshtein_distance(a, a) == 0);
    CHECK(levenshtein_distance(a, c) <= ab + levenshtein_distance(b, c));
  }
}

TEST_CASE("levenshtein similarity normalizes into [0,1]") {
  CHECK(levenshtein_similarity({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}) == 1.0);
  CHECK(levenshtein_similarity({1, 2}, {3, 4}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(levenshtein_similarity({1, 2, 3}, {}) == 0.0);
  CHECK_THROWS_AS(levenshtein_similarity({}, {}), std::invalid_argument);

  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    std::vector<int> a = random_sequence(rng, 10, 5);
    std::vector<int> b = random_sequence(rng, 10, 5);
    if (a.empty() && b.empty()) continue;
    double s = levenshtein_similarity(a, b);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("average pair similarity over sequence lists") {
  std::vector<std::vector<int>> identical{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}};
  CHECK(avg_pair_similarity(identical) == 1.0);

  std::vector<std::vector<int>> two{{1, 2}, {3, 4}};
  CHECK(avg_pair_similarity(two) == doctest::Approx(0.5).epsilon(1e-12));

  // pair similarities 1.0, 0.5, 0.5 -> mean 2/3
  std::vector<std::vector<int>> three{{1, 2}, {1, 2}, {3, 4}};
  CHECK(avg_pair_similarity(three) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  CHECK_THROWS_AS(avg_pair_similarity({{1, 2}}), std::invalid_argument);

  // permutation invariance
  std::vector<std::vector<int>> shuffled{{3, 4}, {1, 2}, {1, 2}};
  CHECK(avg_pair_similarity(shuffled) == doctest::Approx(avg_pair_similarity(three)));
}

TEST_CASE("total jaccard over sequence lists") {
  CHECK(total_jaccard({{1, 2, 3}, {3, 2, 1}}) == 1.0);
  CHECK(total_jaccard({{1, 2}, {3, 4}}) == 0.0);
  CHECK(total_jaccard({{1, 2}, {2, 3}}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(total_jaccard({{2, 3}, {1, 2}}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(total_jaccard({{1}}), std::invalid_argument);
  CHECK_THROWS_AS(total_jaccard({{}, {}}), std::invalid_argument);
}

TEST_CASE("per-class study runs end to end and reports exclusions") {
  Dataset ds = synth_dataset(SynthKind::Blobs, 3, 150, 8, 0.12, 41);
  auto [train, val, test] = split(ds, 0.8, 0.2, 0.0, 1);
  TrainConfig config;
  config.spec = ModelSpec::vgg_mini({1, 8, 8}, 3);
  config.epochs = 3;
  config.batch = 32;
  config.schedule.lr = 0.08;
  config.seed = 6;
  config.eval_robust = false;
  Model model = train_vanilla(config, {train, val}).model;

  AttackSpec attack = AttackSpec::pgd_linf(0.25, 6, 0.0, 13);
  std::vector<std::string> layers = conv_layer_names(config.spec);
  SimilarityStudy study =
      per_class_similarity_study(model, val, {0, 1, 2}, layers, 10, attack);
  CHECK(study.classes.size() + study.excluded_classes.size() == 3);
  REQUIRE(study.classes.size() >= 2);
  for (const ClassSimilarity& c : study.classes) {
    CHECK(c.spearman >= -1.0);
    CHECK(c.spearman <= 1.0);
    CHECK(c.levenshtein >= 0.0);
    CHECK(c.levenshtein <= 1.0);
    CHECK(c.targeted_count > 0);
  }
  REQUIRE(study.layers.size() == layers.size());
  for (const LayerSimilarity& l : study.layers) {
    CHECK(l.avg_pair >= 0.0);
    CHECK(l.avg_pair <= 1.0);
    CHECK(l.total_jaccard >= 0.0);
    CHECK(l.total_jaccard <= 1.0);
  }
  // json/csv render without error and mention every layer
  std::string json = study.to_json();
  std::string csv = study.to_csv();
  for (const std::string& layer : layers) {
    CHECK(json.find(layer) != std::string::npos);
    CHECK(csv.find(layer) != std::string::npos);
  }

  CHECK_THROWS_WITH_AS(
      per_class_similarity_study(model, val, {0}, layers, 10, attack),
      doctest::Contains("need >= 2 classes"), std::invalid_argument);
}
