#include "doctest.h"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"
#include "tshamo/diffcore.hpp"
#include "tshamo/random.hpp"

#include <functional>

using namespace tshamo::diffcore;
using tshamo::Rng;
using tshamo::testing::gradient_error;
using tshamo::testing::ScalarFn;
using tshamo::testing::contract;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("matmul by identity returns the operand") {
  Tape tape;
  auto eye = tape.constant(Tensor(Shape{2, 2}, {1, 0, 0, 1}));
  auto a = tape.constant(Tensor(Shape{2, 2}, {1.5, -2, 3, 4}));
  CHECK(matmul(eye, a).value() == a.value());
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  auto y = softmax(tape.constant(Tensor(Shape{3}, {0, 0, 0})));
  for (Index i = 0; i < 3; ++i) CHECK(y.value()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("gelu uses the exact erf formulation") {
  Tape tape;
  auto y = gelu(tape.constant(Tensor(Shape{2}, {1.0, 0.3})));
  // x * Phi(x) evaluated with 30-digit arithmetic.
  CHECK(y.value()[0] == doctest::Approx(0.841344746068542948).epsilon(1e-14));
  CHECK(y.value()[1] == doctest::Approx(0.185373426656685791).epsilon(1e-14));
}

TEST_CASE("shape mismatches name the primitive and both shapes") {
  Tape tape;
  auto a = tape.constant(Tensor(Shape{2, 3}));
  auto b = tape.constant(Tensor(Shape{4, 5}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(subtract(a, b), ShapeError);
  CHECK_THROWS_AS(concat({a, b}, 0), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
  CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
  CHECK_THROWS_AS(embedding(a, {7}), ShapeError);
}

TEST_CASE("non-finite values are hard errors") {
  Tape tape;
  auto a = tape.constant(Tensor(Shape{2}, {1e308, 1.0}));
  CHECK_THROWS_AS(scale(a, 10.0), NonFiniteError);
  Tensor bad(Shape{1});
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(tape.constant(bad), NonFiniteError);
}

TEST_CASE("backward of sum is all ones") {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{3}, {4, -1, 2}));
  auto g = tape.backward(sum(x));
  CHECK(g[x] == Tensor(Shape{3}, {1, 1, 1}));
}

TEST_CASE("backward of mean squared error matches hand differentiation") {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{2}, {1, 2}));
  auto y = tape.constant(Tensor(Shape{2}, {0, 0}));
  auto d = subtract(x, y);
  auto g = tape.backward(mean(multiply(d, d)));
  // d/dx_i = 2 (x_i - y_i) / n
  CHECK(g[x][0] == doctest::Approx(1.0));
  CHECK(g[x][1] == doctest::Approx(2.0));
  CHECK_FALSE(g.has(y));
}

TEST_CASE("backward rejects non-scalar losses and repeated calls") {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{3}, {1, 2, 3}));
  CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ShapeError);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
  tape.reset();
  auto x2 = tape.variable(Tensor(Shape{1}, {2}));
  CHECK(tape.backward(sum(x2))[x2][0] == 1.0);
}

TEST_CASE("fan-out gradients accumulate") {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{2}, {3, -1}));
  auto g = tape.backward(sum(add(multiply(x, x), scale(x, 3.0))));
  CHECK(g[x][0] == doctest::Approx(2 * 3 + 3));
  CHECK(g[x][1] == doctest::Approx(2 * -1 + 3));
}

TEST_CASE("every primitive passes a finite-difference check") {
  Rng rng(11);
  for (const auto& c : tshamo::testing::primitive_cases(rng)) {
    CAPTURE(c.name);
    CHECK(gradient_error(c.fn, c.inputs) <= 1e-4);
  }
}

TEST_CASE("random composites of up to four primitives match finite differences") {
  using Unary = std::function<Var(const Var&, const Var&)>;
  const std::vector<Unary> ops = {
      [](const Var& x, const Var& w) { return matmul(x, w); },
      [](const Var& x, const Var&) { return gelu(x); },
      [](const Var& x, const Var&) { return softmax(x); },
      [](const Var& x, const Var& w) { return add(x, w); },
      [](const Var& x, const Var& w) { return multiply(x, w); },
      [](const Var& x, const Var&) { return transpose(x); },
      [](const Var& x, const Var& w) { return subtract(x, w); },
      [](const Var& x, const Var&) { return scale(x, 0.7); },
  };
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const int depth = 1 + static_cast<int>(rng.below(4));
    std::vector<std::size_t> picks;
    for (int i = 0; i < depth; ++i) picks.push_back(rng.below(ops.size()));
    ScalarFn fn = [&ops, picks](Tape&, const std::vector<Var>& v) {
      Var h = v[0];
      for (std::size_t p : picks) h = ops[p](h, v[1]);
      return contract(h);
    };
    CAPTURE(trial);
    std::string desc; for (auto p : picks) desc += std::to_string(p) + " ";
    CAPTURE(desc);
    CHECK(gradient_error(fn, {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)}) <= 1e-4);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(5);
  const Tensor x0 = random_tensor({3, 3}, rng);
  auto grad_of = [&](double a, double b) {
    Tape tape;
    auto x = tape.variable(x0);
    auto f = sum(gelu(matmul(x, x)));
    auto g = mean(softmax(x));
    return tape.backward(add(scale(f, a), scale(g, b)))[x];
  };
  const Tensor gf = grad_of(1, 0), gg = grad_of(0, 1), combo = grad_of(2.5, -0.75);
  CHECK((combo.data() - (2.5 * gf.data() - 0.75 * gg.data())).norm() <= 1e-12 * (1 + combo.data().norm()));
}

TEST_CASE("identical inputs give bit-identical outputs and gradients") {
  auto run = [] {
    Rng rng(99);
    Tape tape;
    auto x = tape.variable(random_tensor({4, 3}, rng));
    auto w = tape.variable(random_tensor({3, 3}, rng));
    auto y = layer_norm(gelu(matmul(x, w)), tape.constant(Tensor(Shape{3}, {1, 1, 1})), tape.constant(Tensor(Shape{3})));
    auto g = tape.backward(sum(multiply(y, y)));
    return std::make_pair(g[x], g[w]);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("adam: zero gradient from fresh state leaves parameters unchanged") {
  ParameterSet params{{"w", Tensor(Shape{2}, {0.5, -0.25})}};
  AdamState state;
  adam_step(params, {{"w", Tensor(Shape{2})}}, state, 1e-3);
  CHECK(params.at("w") == Tensor(Shape{2}, {0.5, -0.25}));
  CHECK(state.m.at("w").isZero());
  CHECK(state.step == 1);
}

TEST_CASE("adam: zero gradient decays existing moments") {
  ParameterSet params{{"w", Tensor(Shape{1}, {1.0})}};
  AdamState state;
  adam_step(params, {{"w", Tensor(Shape{1}, {2.0})}}, state, 1e-3);
  const double m1 = state.m.at("w")[0], v1 = state.v.at("w")[0];
  adam_step(params, {{"w", Tensor(Shape{1})}}, state, 1e-3);
  CHECK(state.m.at("w")[0] == doctest::Approx(0.9 * m1));
  CHECK(state.v.at("w")[0] == doctest::Approx(0.999 * v1));
}

TEST_CASE("adam: first step with unit gradient moves by the learning rate") {
  ParameterSet params{{"w", Tensor(Shape{1}, {0.0})}};
  AdamState state;
  adam_step(params, {{"w", Tensor(Shape{1}, {1.0})}}, state, 1e-5);
  // m_hat = v_hat = 1 so the step is lr / (1 + eps).
  CHECK(params.at("w")[0] == doctest::Approx(-1e-5 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: identical parameters with identical gradients stay identical") {
  ParameterSet params{{"a", Tensor(Shape{2}, {0.3, 0.3})}, {"b", Tensor(Shape{2}, {0.3, 0.3})}};
  AdamState state;
  for (int i = 0; i < 5; ++i) {
    const Tensor g(Shape{2}, {0.1 * i, -0.2});
    adam_step(params, {{"a", g}, {"b", g}}, state, 1e-2);
  }
  CHECK(params.at("a") == params.at("b"));
}

TEST_CASE("adam: gradient shape mismatch is an error") {
  ParameterSet params{{"w", Tensor(Shape{2})}};
  AdamState state;
  CHECK_THROWS_AS(adam_step(params, {{"w", Tensor(Shape{3})}}, state, 1e-3), ShapeError);
}
