#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "nsns/checkpoint.hpp"
#include "nsns/model.hpp"
#include "nsns/rng.hpp"

using namespace nsns;

namespace {

std::string temp_path(const char* name) {
  return std::string("/tmp/nsns_test_") + name + "_" + std::to_string(::getpid());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// One 1x1 conv whose output equals the input channel, then pooling and a head.
Model passthrough_conv_model() {
  ModelSpec spec;
  spec.input_shape = {1, 1, 2};
  spec.class_count = 2;
  spec.layers = {LayerDesc::conv(1, 1, 1, 0), LayerDesc::global_avg_pool(),
                 LayerDesc::flatten(), LayerDesc::dense(2)};
  Model m = build_model(spec, 0);
  m.param("conv1.weight") = Tensor({1, 1, 1, 1}, {1.0});
  return m;
}

}  // namespace

TEST_CASE("build_model is deterministic per seed") {
  ModelSpec spec = ModelSpec::vgg_mini({1, 8, 8}, 10);
  Model a = build_model(spec, 42);
  Model b = build_model(spec, 42);
  Model c = build_model(spec, 43);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].first == b.params[i].first);
    CHECK(a.params[i].second.data == b.params[i].second.data);
  }
  bool any_diff = false;
  for (size_t i = 0; i < a.params.size() && !any_diff; ++i)
    any_diff = a.params[i].second.data != c.params[i].second.data;
  CHECK(any_diff);
}

TEST_CASE("inconsistent specs are rejected naming the offending layer") {
  ModelSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.class_count = 10;
  spec.layers = {LayerDesc::flatten(), LayerDesc::dense(7)};  // head != class_count
  CHECK_THROWS_WITH_AS(spec.validate(),
                       doctest::Contains("fc1 must be a dense layer with out == class_count"),
                       std::invalid_argument);

  ModelSpec bad;
  bad.input_shape = {1, 4, 4};
  bad.class_count = 2;
  bad.layers = {LayerDesc::dense(2)};  // dense straight on an image
  CHECK_THROWS_WITH_AS(bad.shape_chain(), doctest::Contains("fc1 needs a flat input"),
                       std::invalid_argument);
}

TEST_CASE("vgg-mini carries the canonical names") {
  ModelSpec spec = ModelSpec::vgg_mini({3, 32, 32}, 10);
  std::vector<std::string> names = spec.layer_names();
  int convs = 0;
  for (const std::string& n : names)
    if (n.rfind("conv", 0) == 0) ++convs;
  CHECK(convs == 6);
  CHECK(names.front() == "conv1");
  CHECK(names.back() == "fc1");
  CHECK(spec.layer_index("conv6") >= 0);
  CHECK(spec.penultimate_layer() == "gap1");
  CHECK(spec.channel_count("conv5") == 64);
}

TEST_CASE("forward records every named layer in spec order") {
  ModelSpec spec = ModelSpec::vgg_mini({1, 8, 8}, 10);
  Model m = build_model(spec, 3);
  Rng rng(4);
  Tensor x({2, 1, 8, 8});
  for (double& v : x.data) v = rng.uniform01();
  auto [logits, record] = forward_record(m, x);
  CHECK(logits.shape == std::vector<int>{2, 10});
  std::vector<std::string> names = spec.layer_names();
  REQUIRE(record.entries.size() == names.size());
  for (size_t i = 0; i < names.size(); ++i) CHECK(record.entries[i].first == names[i]);
}

TEST_CASE("a dense layer with identity weights is the identity map") {
  ModelSpec spec;
  spec.input_shape = {2, 1, 1};
  spec.class_count = 2;
  spec.layers = {LayerDesc::flatten(), LayerDesc::dense(2)};
  Model m = build_model(spec, 0);
  m.param("fc1.weight") = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor logits = forward(m, Tensor({2, 1, 1}, {3.0, 4.0}));
  CHECK(logits.data == std::vector<double>{3.0, 4.0});
}

TEST_CASE("suppression scales recorded activations and is idempotent over duplicates") {
  Model m = passthrough_conv_model();
  Tensor x({1, 1, 2}, {2.0 / 8, 4.0 / 8});
  m.param("conv1.weight") = Tensor({1, 1, 1, 1}, {8.0});  // activation [2,4]

  Model half = apply_suppression(m, {{"conv1", 0}, {"conv1", 0}}, 0.5);
  auto [logits, record] = forward_record(half, x);
  (void)logits;
  Tensor act = neuron_output(record, {"conv1", 0});
  CHECK(act.data == std::vector<double>{1.0, 2.0});

  Model ident = apply_suppression(m, {{"conv1", 0}}, 1.0);
  CHECK(forward(ident, x).data == forward(m, x).data);

  Model zero = apply_suppression(m, {{"conv1", 0}}, 0.0);
  auto [l2, r2] = forward_record(zero, x);
  (void)l2;
  CHECK(neuron_output(r2, {"conv1", 0}).data == std::vector<double>{0.0, 0.0});

  CHECK_THROWS_AS(apply_suppression(m, {{"conv1", 5}}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(apply_suppression(m, {{"conv1", 0}}, 1.5), std::invalid_argument);
}

TEST_CASE("suppression scales gradients through the channel by beta") {
  ModelSpec spec = ModelSpec::vgg_mini({1, 8, 8}, 10);
  Model m = build_model(spec, 9);
  Model sup = apply_suppression(m, {{"conv2", 3}}, 0.25);
  Rng rng(10);
  Tensor x({1, 1, 8, 8});
  for (double& v : x.data) v = rng.uniform01();

  auto grad_of_channel_sum = [&](const Model& model) {
    Tape tape;
    TapedForward tf = forward_on_tape(model, tape, x);
    // sum over the conv2 output channel 3 only
    std::vector<double> mask(16, 0.0);
    mask[3] = 1.0;
    Var picked = tape.channel_scale(tf.activation("conv2"), mask);
    return tape.backward_one(tape.sum(picked), tf.input);
  };
  Tensor g_plain = grad_of_channel_sum(m);
  Tensor g_sup = grad_of_channel_sum(sup);
  for (size_t i = 0; i < g_plain.numel(); ++i)
    CHECK(g_sup[i] == doctest::Approx(0.25 * g_plain[i]).epsilon(1e-12));
}

TEST_CASE("neuron_output slices channels and checks bounds") {
  ModelSpec spec = ModelSpec::vgg_mini({1, 8, 8}, 10);
  Model m = build_model(spec, 5);
  Rng rng(6);
  Tensor x({1, 1, 8, 8});
  for (double& v : x.data) v = rng.uniform01();
  auto [logits, record] = forward_record(m, x);
  (void)logits;
  CHECK(neuron_output(record, {"conv3", 2}).numel() == 16);  // 4x4 after one pool
  CHECK(neuron_output(record, {"fc1", 5}).numel() == 1);
  CHECK_THROWS_WITH_AS(neuron_output(record, {"conv1", 16}),
                       doctest::Contains("channel 16 out of range"), std::invalid_argument);
  CHECK_THROWS_AS(neuron_output(record, {"nope", 0}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip within f32 precision and are byte-stable") {
  ModelSpec spec = ModelSpec::vgg_mini({1, 8, 8}, 10);
  Model m = build_model(spec, 77);
  std::string path = temp_path("ckpt");
  save_checkpoint(m, path);
  Model loaded = load_checkpoint(path);

  Rng rng(78);
  Tensor x({4, 1, 8, 8});
  for (double& v : x.data) v = rng.uniform01();
  Tensor a = forward(m, x);
  Tensor b = forward(loaded, x);
  for (size_t i = 0; i < a.numel(); ++i) {
    double rel = std::abs(a[i] - b[i]) / std::max(1e-9, std::abs(a[i]));
    CHECK(rel <= 1e-6);
  }

  std::string bytes = slurp(path);
  save_checkpoint(m, path);
  CHECK(slurp(path) == bytes);

  // save(load(ckpt)) is bit-identical: parameters are already f32-rounded
  std::string path2 = temp_path("ckpt2");
  save_checkpoint(loaded, path2);
  CHECK(slurp(path2) == bytes);

  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("corrupted checkpoints are rejected with the documented errors") {
  ModelSpec spec = ModelSpec::mlp_small({1, 4, 4}, 3);
  Model m = build_model(spec, 1);
  std::string path = temp_path("ckpt_bad");
  save_checkpoint(m, path);
  std::string bytes = slurp(path);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  spit(path, bad_magic);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad checkpoint magic"),
                       std::runtime_error);

  std::string bad_version = bytes;
  bad_version[8] = 99;
  spit(path, bad_version);
  CHECK_THROWS_WITH_AS(load_checkpoint(path),
                       doctest::Contains("unsupported checkpoint version 99"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("supported: 1"),
                       std::runtime_error);

  spit(path, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"),
                       std::runtime_error);

  std::remove(path.c_str());
}

TEST_CASE("model spec json round-trips") {
  ModelSpec spec = ModelSpec::vgg_mini({3, 16, 16}, 10);
  ModelSpec back = ModelSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  CHECK(back.layer_names() == spec.layer_names());
}
