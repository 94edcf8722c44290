#include <cmath>
#include <numeric>

#include "doctest.h"
#include "multirep/adam.hpp"
#include "multirep/graph.hpp"
#include "multirep/ops.hpp"
#include "oracles.hpp"

using namespace multirep;
namespace o = oracle;

namespace {

constexpr double kFdLimit = 1e-3;
constexpr int kConfigs = 20;

void require_fd(const o::FdReport& r) {
  INFO("relative error " << r.rel_error << " over " << r.checked << " entries");
  CHECK(r.checked > 0);
  CHECK(r.rel_error < kFdLimit);
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST_CASE("relu, softmax cross entropy and conv spot values") {
  Tape tape;
  Var x = tape.constant(Tensor({3}, {-1.0f, 0.0f, 2.0f}));
  const Tensor& r = ops::relu(x).value();
  CHECK(r[0] == 0.0f);
  CHECK(r[1] == 0.0f);
  CHECK(r[2] == 2.0f);

  std::vector<std::int32_t> label = {7};
  Var logits = tape.constant(Tensor({1, 10}, 0.0f));
  CHECK(ops::softmax_cross_entropy(logits, label).value()[0] == doctest::Approx(std::log(10.0)).epsilon(1e-6));

  Var img = tape.constant(Tensor({1, 1, 5, 5}, 1.0f));
  Var k = tape.constant(Tensor({1, 1, 3, 3}, 1.0f));
  Var b = tape.constant(Tensor({1}, 0.0f));
  const Tensor& c = ops::conv2d(img, k, b, {1, 1}).value();
  CHECK(c.shape() == Shape{1, 1, 5, 5});
  CHECK(c[12] == 9.0f);
  CHECK(c[0] == 4.0f);
}

TEST_CASE("shape mismatches are rejected with both shapes in the message") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var w = tape.constant(Tensor({4, 5}));
  Var b = tape.constant(Tensor({5}));
  try {
    ops::dense(a, w, b);
    FAIL("dense accepted mismatched shapes");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::add(a, tape.constant(Tensor({3, 2}))), ShapeError);
  std::vector<std::int32_t> bad = {3};
  CHECK_THROWS(ops::softmax_cross_entropy(tape.constant(Tensor({1, 3})), bad));
}

TEST_CASE("linear and quadratic gradients") {
  Tape tape;
  Tensor v({2, 3}, {0.5f, -1.0f, 2.0f, 3.0f, 0.0f, -0.25f});
  Var x = tape.variable(v);
  tape.backward(ops::sum(x));
  for (float g : tape.grad(x)) CHECK(g == 1.0f);

  Tape tape2;
  Var y = tape2.variable(v);
  tape2.backward(ops::scale(ops::sum_squares(y), 0.5f));
  auto g = tape2.grad(y);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(g[i] == v[i]);
}

TEST_CASE("backward without a recorded dependency is rejected") {
  Tape tape;
  Var c = tape.constant(Tensor({1}, 2.0f));
  CHECK_THROWS(tape.backward(c));
  Tape off(false);
  Var v = off.variable(Tensor({1}, 2.0f));
  CHECK_THROWS(off.backward(ops::sum(v)));

  Graph g({2});
  ForwardPass pass(g, Tensor({1, 2}, 1.0f));
  CHECK_THROWS(pass.backward_output(std::vector<float>{1.0f, 1.0f}));
}

TEST_CASE("finite differences: every op over random shapes") {
  for (const auto& op : o::op_cases()) {
    Rng rng(derive_seed(11, op.name));
    for (int t = 0; t < kConfigs; ++t) {
      INFO(op.name << " shape " << t);
      require_fd(op.check(rng));
    }
  }
}

TEST_CASE("finite differences: random 3-layer net through the graph") {
  Rng rng(15);
  for (int t = 0; t < kConfigs; ++t) {
    const std::size_t d = o::pick(rng, 2, 6), h1 = o::pick(rng, 2, 8), h2 = o::pick(rng, 2, 8), c = o::pick(rng, 2, 5);
    Tensor x = o::random_tensor({3, d}, rng);
    Tensor w1 = o::random_tensor({d, h1}, rng), b1 = o::random_tensor({h1}, rng, 0.1, 0.5);
    Tensor w2 = o::random_tensor({h1, h2}, rng), b2 = o::random_tensor({h2}, rng, 0.1, 0.5);
    Tensor w3 = o::random_tensor({h2, c}, rng), b3 = o::random_tensor({c}, rng);
    std::vector<std::int32_t> labels = {0, 1, static_cast<std::int32_t>(c - 1)};
    auto report = o::check_gradients({x, w1, b1, w2, b2, w3, b3}, [&](auto& v) {
      Var a = ops::relu(ops::dense(v[0], v[1], v[2]));
      Var b = ops::relu(ops::dense(a, v[3], v[4]));
      return ops::softmax_cross_entropy(ops::dense(b, v[5], v[6]), labels);
    }, rng.next_u64());
    require_fd(report);
  }
}

TEST_CASE("graph forward: identity, identity weights, hand-computed ReLU net") {
  Graph empty({3});
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(empty.forward(t) == t);

  Graph id({2});
  auto w = id.add_parameter("w", Tensor({2, 2}, {1, 0, 0, 1}));
  auto b = id.add_parameter("b", Tensor({2}, 0.0f));
  id.add_dense(w, b);
  Tensor x({1, 2}, {0.25f, -3.0f});
  CHECK(id.forward(x) == x);
  CHECK_THROWS_AS(id.forward(Tensor({1, 3})), ShapeError);

  // h = relu(x W1 + b1), y = h W2 + b2 with x = [1, -2].
  Graph net({2});
  auto w1 = net.add_parameter("w1", Tensor({2, 2}, {1, 2, 3, -1}));
  auto b1 = net.add_parameter("b1", Tensor({2}, {0.5f, 0.0f}));
  auto w2 = net.add_parameter("w2", Tensor({2, 2}, {2, 0, -1, 1}));
  auto b2 = net.add_parameter("b2", Tensor({2}, {0.0f, 1.0f}));
  net.add_dense(w1, b1);
  net.add_relu();
  net.add_dense(w2, b2);
  // x W1 + b1 = [1 - 6 + 0.5, 2 + 2] = [-4.5, 4] -> relu [0, 4] -> [0*2 + 4*-1, 0*0 + 4*1 + 1] = [-4, 5]
  Tensor y = net.forward(Tensor({1, 2}, {1.0f, -2.0f}));
  CHECK(y[0] == -4.0f);
  CHECK(y[1] == 5.0f);

  Rng rng(3);
  Tensor big = o::random_tensor({5, 2}, rng);
  CHECK(net.forward(big) == net.forward(big));
}

TEST_CASE("graph backward gives parameter and input gradients") {
  Graph net({2});
  auto w = net.add_parameter("w", Tensor({2, 1}, {2.0f, -1.0f}));
  auto b = net.add_parameter("b", Tensor({1}, 0.5f));
  net.add_dense(w, b);
  ForwardPass pass(net, Tensor({1, 2}, {3.0f, 4.0f}), GradMode::params_and_input);
  GradientMap g = pass.backward(ops::sum(pass.output_var()));
  REQUIRE(g.has_input);
  CHECK(g.input[0] == 2.0f);
  CHECK(g.input[1] == -1.0f);
  CHECK(g.params[w.index][0] == 3.0f);
  CHECK(g.params[w.index][1] == 4.0f);
  CHECK(g.params[b.index][0] == 1.0f);
}

TEST_CASE("adam") {
  AdamHyper hyper;
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor p({4}, {1, 2, 3, 4});
    const Tensor before = p;
    AdamState state;
    std::vector<Tensor*> params = {&p};
    std::vector<Tensor> grads = {Tensor({4}, 0.0f)};
    for (int i = 0; i < 5; ++i) adam_step(params, grads, state, hyper);
    CHECK(p == before);
  }
  SUBCASE("first step with constant gradient moves by about lr") {
    Tensor p({3}, 0.0f);
    AdamState state;
    std::vector<Tensor*> params = {&p};
    std::vector<Tensor> grads = {Tensor({3}, {0.7f, -3.0f, 12.0f})};
    adam_step(params, grads, state, hyper);
    CHECK(p[0] == doctest::Approx(-1e-3).epsilon(1e-4));
    CHECK(p[1] == doctest::Approx(1e-3).epsilon(1e-4));
    CHECK(p[2] == doctest::Approx(-1e-3).epsilon(1e-4));
  }
  SUBCASE("identical runs are bitwise identical") {
    auto run = [&] {
      Rng rng(5);
      Tensor p = o::random_tensor({10}, rng);
      AdamState state;
      std::vector<Tensor*> params = {&p};
      for (int i = 0; i < 20; ++i) {
        std::vector<Tensor> grads = {o::random_tensor({10}, rng)};
        adam_step(params, grads, state, hyper);
      }
      return p;
    };
    CHECK(run() == run());
  }
}
