#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "nsns/autodiff.hpp"
#include "nsns/rng.hpp"
#include "oracles.hpp"

using namespace nsns;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// Nudges values away from the kinks of relu/clamp/l1 so central differences
/// stay valid near non-smooth points.
void avoid_kinks(Tensor& t, double margin = 1e-2) {
  for (double& v : t.data)
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
}

}  // namespace

TEST_CASE("relu matches its definition") {
  Tape tape;
  Var x = tape.leaf(Tensor({3}, {-1.0, 0.0, 2.0}));
  Var y = tape.relu(x);
  CHECK(tape.value(y).data == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("matmul by the identity is the identity") {
  Tape tape;
  Var i2 = tape.leaf(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Var v = tape.leaf(Tensor({2, 1}, {3.0, 4.0}));
  Var y = tape.matmul(i2, v);
  CHECK(tape.value(y).shape == std::vector<int>{2, 1});
  CHECK(tape.value(y).data == std::vector<double>{3.0, 4.0});
}

TEST_CASE("softmax cross-entropy of uniform logits is ln 2") {
  Tape tape;
  Var logits = tape.leaf(Tensor({2}, {0.0, 0.0}));
  Var loss = tape.softmax_cross_entropy(logits, {0});
  CHECK(tape.value(loss)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("backward of sum is all ones") {
  Tape tape;
  Var x = tape.leaf(Tensor({3}, {0.3, -0.4, 0.9}));
  Var loss = tape.sum(x);
  Tensor g = tape.backward_one(loss, x);
  CHECK(g.data == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("softmax cross-entropy gradient is softmax minus onehot") {
  Tape tape;
  Var logits = tape.leaf(Tensor({2}, {0.0, 0.0}));
  Var loss = tape.softmax_cross_entropy(logits, {0});
  Tensor g = tape.backward_one(loss, logits);
  CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("targets the loss does not depend on get zero gradients") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Var unused = tape.leaf(Tensor({3}, {5.0, 6.0, 7.0}));
  Var loss = tape.sum(x);
  std::vector<Var> wrt{unused};
  Tensor g = tape.backward(loss, wrt)[0];
  CHECK(g.shape == std::vector<int>{3});
  CHECK(g.data == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("grad_check on squares and affine functions") {
  auto square = [](Tape& t, Var x) { return t.l2_norm_squared(x); };
  CHECK(grad_check(square, Tensor({1}, {3.0}), 1e-4) <= 1e-6);

  auto linear = [](Tape& t, Var x) { return t.sum(t.scale(x, 2.5)); };
  CHECK(grad_check(linear, Tensor({4}, {0.1, -0.2, 0.3, 0.7}), 1e-4) <= 1e-10);
}

TEST_CASE("grad_check on a random three-layer net") {
  Rng rng(77);
  Tensor w1 = random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor b1 = random_tensor({4}, rng, -0.1, 0.1);
  Tensor w2 = random_tensor({3, 4}, rng, -0.5, 0.5);
  Tensor b2 = random_tensor({3}, rng, -0.1, 0.1);
  auto net = [&](Tape& t, Var x) {
    Var c = t.conv2d(x, t.leaf(w1), t.leaf(b1), 1, 1);
    Var r = t.relu(c);
    Var p = t.global_avg_pool(r);
    Var logits = t.dense(p, t.leaf(w2), t.leaf(b2));
    return t.softmax_cross_entropy(logits, {1});
  };
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  CHECK(grad_check(net, x, 1e-4) <= 1e-4);
}

TEST_CASE("grad_check across every primitive at random points") {
  Rng rng(123);
  using Fn = std::function<Var(Tape&, Var)>;
  Rng aux(9);
  Tensor other = random_tensor({2, 3, 4, 4}, aux);
  Tensor w = random_tensor({5, 3, 3, 3}, aux, -0.4, 0.4);
  Tensor b = random_tensor({5}, aux, -0.2, 0.2);
  Tensor dw = random_tensor({4, 48}, aux, -0.3, 0.3);
  Tensor db = random_tensor({4}, aux, -0.2, 0.2);
  Tensor mm = random_tensor({4, 7}, aux);

  std::vector<std::pair<const char*, Fn>> cases = {
      {"add", [&](Tape& t, Var x) { return t.sum(t.add(x, t.leaf(other))); }},
      {"add_scalar", [&](Tape& t, Var x) { return t.sum(t.add(x, t.leaf(Tensor::scalar(0.7)))); }},
      {"sub", [&](Tape& t, Var x) { return t.sum(t.sub(t.leaf(other), x)); }},
      {"scale", [&](Tape& t, Var x) { return t.sum(t.scale(x, -1.7)); }},
      {"relu", [&](Tape& t, Var x) { return t.sum(t.relu(x)); }},
      {"clamp", [&](Tape& t, Var x) { return t.sum(t.clamp(x, -0.5, 0.5)); }},
      {"sign", [&](Tape& t, Var x) { return t.sum(t.sign(x)); }},
      {"channel_scale",
       [&](Tape& t, Var x) { return t.sum(t.channel_scale(x, {0.3, 1.0, 2.0})); }},
      {"l1_distance", [&](Tape& t, Var x) { return t.l1_distance(x, t.leaf(other)); }},
      {"l2_norm_squared", [&](Tape& t, Var x) { return t.l2_norm_squared(x); }},
      {"conv2d", [&](Tape& t, Var x) { return t.sum(t.conv2d(x, t.leaf(w), t.leaf(b), 1, 1)); }},
      {"maxpool", [&](Tape& t, Var x) { return t.sum(t.maxpool2d(x, 2)); }},
      {"gap", [&](Tape& t, Var x) { return t.sum(t.global_avg_pool(x)); }},
      {"flatten",
       [&](Tape& t, Var x) {
         return t.sum(t.dense(t.flatten(x), t.leaf(dw), t.leaf(db)));
       }},
      {"softmax_ce",
       [&](Tape& t, Var x) {
         return t.softmax_cross_entropy(t.dense(t.flatten(x), t.leaf(dw), t.leaf(db)),
                                        {0, 2});
       }},
  };

  for (auto& [name, fn] : cases) {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = random_tensor({2, 3, 4, 4}, rng);
      avoid_kinks(x);
      // keep clamp boundaries and maxpool ties away from sampled coordinates
      for (double& v : x.data) {
        if (std::abs(std::abs(v) - 0.5) < 1e-2) v += 3e-2;
      }
      double err = grad_check(fn, x, 1e-5);
      INFO(name << " trial " << trial);
      CHECK(err <= 1e-4);
    }
  }

  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    auto fn_a = [&](Tape& t, Var v) { return t.sum(t.matmul(v, t.leaf(mm))); };
    CHECK(grad_check(fn_a, x, 1e-5) <= 1e-4);
    Tensor y = random_tensor({4, 7}, rng);
    Tensor lhs = random_tensor({3, 4}, rng);
    auto fn_b = [&](Tape& t, Var v) { return t.sum(t.matmul(t.leaf(lhs), v)); };
    CHECK(grad_check(fn_b, y, 1e-5) <= 1e-4);
  }
}

TEST_CASE("conv2d agrees with the quadruple-loop reference") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    for (auto [stride, pad] : {std::pair{1, 1}, {1, 0}, {2, 1}}) {
      Tape tape;
      Var y = tape.conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), stride, pad);
      Tensor ref = oracle::conv2d_reference(x, w, b, stride, pad);
      REQUIRE(tape.value(y).shape == ref.shape);
      for (size_t i = 0; i < ref.numel(); ++i)
        CHECK(tape.value(y)[i] == doctest::Approx(ref[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("channel scale backward multiplies the channel gradient exactly") {
  Tape tape;
  Rng rng(11);
  Tensor x = random_tensor({1, 3, 2, 2}, rng);
  Var vx = tape.leaf(x);
  const std::vector<double> mult{0.25, 1.0, 0.5};
  Var y = tape.channel_scale(vx, mult);
  Tensor g = tape.backward_one(tape.sum(y), vx);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) CHECK(g[size_t(c) * 4 + i] == mult[size_t(c)]);  // bit exact
}

TEST_CASE("maxpool breaks ties toward the first maximal element") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0}));
  Var y = tape.maxpool2d(x, 2);
  Tensor g = tape.backward_one(tape.sum(y), x);
  CHECK(g.data == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("shape mismatches name both shapes") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({3, 3}));
  CHECK_THROWS_WITH_AS(tape.add(a, b), "add: shape mismatch [2,3] vs [3,3]",
                       std::invalid_argument);
  CHECK_THROWS_AS(tape.matmul(a, a), std::invalid_argument);
}

TEST_CASE("non-finite results are rejected") {
  Tape tape;
  CHECK_THROWS_AS(tape.leaf(Tensor({1}, {std::nan("")})), std::runtime_error);
  Var big = tape.leaf(Tensor({1}, {1e308}));
  CHECK_THROWS_AS(tape.add(big, big), std::runtime_error);
}

TEST_CASE("backward demands a scalar loss and a fresh tape") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward_one(x, x), std::invalid_argument);

  Tape tape2;
  Var y = tape2.leaf(Tensor({2}, {1.0, 2.0}));
  Var loss = tape2.sum(y);
  tape2.backward_one(loss, y);
  CHECK_THROWS_AS(tape2.backward_one(loss, y), std::runtime_error);
  CHECK_THROWS_AS(tape2.sum(y), std::runtime_error);
}
