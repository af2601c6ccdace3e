#include <doctest.h>

#include <cmath>
#include <random>

#include "batchrx/autodiff.hpp"

using namespace batchrx::ad;

namespace {

Tensor random_tensor(Tensor::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Points kept away from kinks (|x| >= margin) so central differences are valid
// for relu, clamp, minimum and maximum.
Tensor away_from_zero(Tensor::Shape shape, std::mt19937_64& rng, double margin = 0.05) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (double& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return t;
}

double check(const ScalarFunction& f, std::vector<Tensor*> point) {
  return grad_check(f, point, 1e-6).max_relative_error;
}

}  // namespace

TEST_CASE("forward values of primitives") {
  Tape tape;
  SUBCASE("identity matmul returns the right operand") {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({3, 4}, rng);
    const Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(matmul(tape.constant(eye), tape.constant(x)).value() == x);
  }
  SUBCASE("tanh of zeros is zeros") {
    const Tensor z({2, 3}, 0.0);
    CHECK(batchrx::ad::tanh(tape.constant(z)).value() == z);
  }
  SUBCASE("sigmoid(0.5) matches the scalar formula") {
    const double expected = 1.0 / (1.0 + std::exp(-0.5));
    CHECK(sigmoid(tape.constant(Tensor::scalar(0.5))).value().item() == doctest::Approx(expected).epsilon(1e-15));
    CHECK(expected == doctest::Approx(0.6224593).epsilon(1e-7));
  }
  SUBCASE("elementwise ops and reductions") {
    Var a = tape.constant(Tensor::row({1.0, -2.0, 3.0}));
    Var b = tape.constant(Tensor::row({0.5, 4.0, -1.0}));
    CHECK(add(a, b).value() == Tensor::row({1.5, 2.0, 2.0}));
    CHECK(sub(a, b).value() == Tensor::row({0.5, -6.0, 4.0}));
    CHECK(mul(a, b).value() == Tensor::row({0.5, -8.0, -3.0}));
    CHECK(relu(a).value() == Tensor::row({1.0, 0.0, 3.0}));
    CHECK(square(a).value() == Tensor::row({1.0, 4.0, 9.0}));
    CHECK(minimum(a, b).value() == Tensor::row({0.5, -2.0, -1.0}));
    CHECK(maximum(a, b).value() == Tensor::row({1.0, 4.0, 3.0}));
    CHECK(clamp(a, -1.0, 2.0).value() == Tensor::row({1.0, -1.0, 2.0}));
    CHECK(sum(a).value().item() == 2.0);
    CHECK(mean(a).value().item() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(scale(a, 2.0).value() == Tensor::row({2.0, -4.0, 6.0}));
    CHECK(add_scalar(a, 1.0).value() == Tensor::row({2.0, -1.0, 4.0}));
    CHECK(batchrx::ad::exp(tape.constant(Tensor::scalar(0.0))).value().item() == 1.0);
    CHECK(batchrx::ad::log(tape.constant(Tensor::scalar(1.0))).value().item() == 0.0);
  }
  SUBCASE("concat and slice along both axes") {
    Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var b = tape.constant(Tensor::matrix(2, 1, {5, 6}));
    CHECK(concat({a, b}, 1).value() == Tensor::matrix(2, 3, {1, 2, 5, 3, 4, 6}));
    CHECK(concat({a, a}, 0).value() == Tensor::matrix(4, 2, {1, 2, 3, 4, 1, 2, 3, 4}));
    CHECK(slice(a, 0, 1, 2).value() == Tensor::matrix(1, 2, {3, 4}));
    CHECK(slice(a, 1, 1, 2).value() == Tensor::matrix(2, 1, {2, 4}));
  }
  SUBCASE("broadcasting a row, a column and a scalar") {
    Var m = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    CHECK(add(m, tape.constant(Tensor::row({10, 20}))).value() == Tensor::matrix(2, 2, {11, 22, 13, 24}));
    CHECK(add(m, tape.constant(Tensor::matrix(2, 1, {10, 20}))).value() == Tensor::matrix(2, 2, {11, 12, 23, 24}));
    CHECK(mul(m, tape.constant(Tensor::scalar(2.0))).value() == Tensor::matrix(2, 2, {2, 4, 6, 8}));
  }
  SUBCASE("forward_primitive dispatches by kind") {
    Var a = tape.constant(Tensor::row({0.0, 1.0}));
    std::vector<Var> in{a};
    const Tensor via_dispatch = forward_primitive(OpKind::tanh, in).value();
    CHECK(via_dispatch == batchrx::ad::tanh(a).value());
    OpAttrs attrs;
    attrs.lo = 0.2;
    attrs.hi = 0.8;
    CHECK(forward_primitive(OpKind::clamp, in, attrs).value() == Tensor::row({0.2, 0.8}));
  }
}

TEST_CASE("shape mismatches are rejected with the op name") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({4, 5}));
  auto message = [](auto&& fn) {
    try {
      fn();
    } catch (const ShapeError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message([&] { matmul(a, b); }).find("matmul") != std::string::npos);
  CHECK(message([&] { add(a, b); }).find("add") != std::string::npos);
  CHECK(message([&] { concat({a, b}, 1); }).find("concat") != std::string::npos);
  CHECK(message([&] { slice(a, 1, 2, 5); }).find("slice") != std::string::npos);
}

TEST_CASE("backward produces analytic gradients") {
  Tensor x = Tensor::row({1.0, 2.0, 3.0});
  SUBCASE("sum gives ones") {
    Tape tape;
    tape.backward(sum(tape.parameter(x)));
    CHECK(tape.grad(x) == Tensor::row({1.0, 1.0, 1.0}));
  }
  SUBCASE("sum of squares gives 2x") {
    Tape tape;
    tape.backward(sum(square(tape.parameter(x))));
    CHECK(tape.grad(x) == Tensor::row({2.0, 4.0, 6.0}));
  }
  SUBCASE("mean of four gives quarters") {
    Tensor y = Tensor::row({4.0, -1.0, 0.0, 2.0});
    Tape tape;
    tape.backward(mean(tape.parameter(y)));
    CHECK(tape.grad(y) == Tensor::row({0.25, 0.25, 0.25, 0.25}));
  }
  SUBCASE("non-scalar output is rejected") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(square(tape.parameter(x))), std::invalid_argument);
  }
  SUBCASE("unreachable parameters have zero gradient") {
    Tensor unused = Tensor::row({5.0, 6.0});
    Tape tape;
    tape.parameter(unused);
    tape.backward(sum(tape.parameter(x)));
    CHECK(tape.grad(unused) == Tensor::row({0.0, 0.0}));
  }
  SUBCASE("a non-recording tape refuses backward") {
    Tape tape(false);
    CHECK_THROWS(tape.backward(sum(tape.parameter(x))));
  }
  SUBCASE("frozen tensors receive no gradient and block nothing else") {
    Tensor w = Tensor::row({2.0, 2.0, 2.0});
    Tape tape;
    const Tensor* frozen[] = {&w};
    tape.freeze(frozen);
    tape.backward(sum(mul(tape.parameter(w), tape.parameter(x))));
    CHECK(tape.grad(w) == Tensor::row({0.0, 0.0, 0.0}));
    CHECK(tape.grad(x) == Tensor::row({2.0, 2.0, 2.0}));
  }
}

TEST_CASE("gradient check of every primitive at ten random points") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = away_from_zero({3, 4}, rng);
    Tensor b = away_from_zero({3, 4}, rng);
    Tensor w = random_tensor({4, 2}, rng);
    Tensor row = random_tensor({1, 4}, rng);
    Tensor col = random_tensor({3, 1}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    Tensor weights = random_tensor({3, 4}, rng);  // breaks symmetry in reductions
    auto weighted = [&](Tape& t, Var v) { return sum(mul(v, t.constant(weights))); };
    // Keep the pairs for minimum/maximum apart so no element sits on a tie.
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (std::abs(a[i] - b[i]) < 0.05) b[i] += 0.1;
    }
    CHECK(check([&](Tape& t) { return weighted(t, add(t.parameter(a), t.parameter(b))); }, {&a, &b}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, sub(t.parameter(a), t.parameter(b))); }, {&a, &b}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, mul(t.parameter(a), t.parameter(b))); }, {&a, &b}) < 1e-5);
    CHECK(check([&](Tape& t) { return sum(square(matmul(t.parameter(a), t.parameter(w)))); }, {&a, &w}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, batchrx::ad::tanh(t.parameter(a))); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, sigmoid(t.parameter(a))); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, relu(t.parameter(a))); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, batchrx::ad::exp(t.parameter(a))); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, batchrx::ad::log(t.parameter(pos))); }, {&pos}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, square(t.parameter(a))); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return sum(t.parameter(a)); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return mean(square(t.parameter(a))); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, minimum(t.parameter(a), t.parameter(b))); }, {&a, &b}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, maximum(t.parameter(a), t.parameter(b))); }, {&a, &b}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, clamp(t.parameter(a), -0.5, 0.5)); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, scale(t.parameter(a), -1.5)); }, {&a}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, add_scalar(t.parameter(a), 0.3)); }, {&a}) < 1e-5);
    CHECK(check(
              [&](Tape& t) {
                Var c = concat({t.parameter(a), t.parameter(b)}, 1);
                return sum(square(slice(c, 1, 2, 7)));
              },
              {&a, &b}) < 1e-5);
    CHECK(check(
              [&](Tape& t) {
                Var c = concat({t.parameter(a), t.parameter(b)}, 0);
                return sum(square(slice(c, 0, 1, 5)));
              },
              {&a, &b}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, add(t.parameter(a), t.parameter(row))); }, {&a, &row}) < 1e-5);
    CHECK(check([&](Tape& t) { return weighted(t, mul(t.parameter(a), t.parameter(col))); }, {&a, &col}) < 1e-5);
  }
}

TEST_CASE("grad_check reports") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({4, 3}, rng);
  SUBCASE("sum of squares within 1e-6 at h = 1e-5") {
    CHECK(grad_check([&](Tape& t) { return sum(square(t.parameter(x))); }, std::vector<Tensor*>{&x}, 1e-5)
              .max_relative_error < 1e-6);
  }
  SUBCASE("linear function is exact up to rounding") {
    CHECK(grad_check([&](Tape& t) { return sum(t.parameter(x)); }, std::vector<Tensor*>{&x}, 1e-5).max_relative_error <
          1e-9);
  }
  SUBCASE("tanh of a matmul chain") {
    Tensor w1 = random_tensor({3, 5}, rng);
    Tensor w2 = random_tensor({5, 2}, rng);
    auto f = [&](Tape& t) {
      return sum(batchrx::ad::tanh(matmul(batchrx::ad::tanh(matmul(t.parameter(x), t.parameter(w1))), t.parameter(w2))));
    };
    CHECK(grad_check(f, std::vector<Tensor*>{&x, &w1, &w2}, 1e-6).max_relative_error < 1e-5);
  }
  SUBCASE("perturbation outside [1e-7, 1e-3] is rejected") {
    auto f = [&](Tape& t) { return sum(t.parameter(x)); };
    CHECK_THROWS_AS(grad_check(f, std::vector<Tensor*>{&x}, 1e-2), std::invalid_argument);
    CHECK_THROWS_AS(grad_check(f, std::vector<Tensor*>{&x}, 1e-9), std::invalid_argument);
  }
  SUBCASE("non-finite value is reported with its coordinate") {
    Tensor p = Tensor::row({1.0, 1e-5, 2.0});
    try {
      grad_check([&](Tape& t) { return sum(batchrx::ad::log(t.parameter(p))); }, std::vector<Tensor*>{&p}, 1e-4);
      FAIL("expected GradCheckError");
    } catch (const GradCheckError& e) {
      CHECK(e.block() == 0);
      CHECK(e.index() == 1);
    }
  }
}

TEST_CASE("backward is linear and replays bitwise") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 3}, rng);
  Tensor w = random_tensor({3, 3}, rng);
  auto f = [&](Tape& t) { return sum(batchrx::ad::tanh(matmul(t.parameter(x), t.parameter(w)))); };
  auto g = [&](Tape& t) { return mean(square(matmul(t.parameter(x), t.parameter(w)))); };
  auto grads = [&](auto&& fn) {
    Tape t;
    t.backward(fn(t));
    return std::pair{t.grad(x), t.grad(w)};
  };
  const auto [fx, fw] = grads(f);
  const auto [gx, gw] = grads(g);
  const auto [hx, hw] = grads([&](Tape& t) { return add(f(t), g(t)); });
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(hx[i] == doctest::Approx(fx[i] + gx[i]).epsilon(1e-13));
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(hw[i] == doctest::Approx(fw[i] + gw[i]).epsilon(1e-13));
  const auto [rx, rw] = grads(f);
  CHECK(rx == fx);
  CHECK(rw == fw);
}

TEST_CASE("Adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::row({1.0, -2.0});
    std::vector<Tensor*> params{&p};
    auto state = make_adam_state(params, {});
    std::vector<Tensor> grads{Tensor::row({0.0, 0.0})};
    adam_step(params, grads, state);
    CHECK(p == Tensor::row({1.0, -2.0}));
    CHECK(state.step == 1);
  }
  SUBCASE("first step moves by -lr * sign(g)") {
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params{&p};
    auto state = make_adam_state(params, {.learning_rate = 0.1});
    std::vector<Tensor> grads{Tensor::scalar(1.0)};
    adam_step(params, grads, state);
    CHECK(p.item() == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("constant gradient: update magnitude approaches lr") {
    Tensor p = Tensor::row({0.0, 0.0});
    std::vector<Tensor*> params{&p};
    auto state = make_adam_state(params, {.learning_rate = 0.01});
    std::vector<Tensor> grads{Tensor::row({3.0, -0.5})};
    double before0 = 0.0, before1 = 0.0;
    for (int i = 0; i < 200; ++i) {
      before0 = p[0];
      before1 = p[1];
      adam_step(params, grads, state);
    }
    CHECK(before0 - p[0] == doctest::Approx(0.01).epsilon(1e-4));
    CHECK(p[1] - before1 == doctest::Approx(0.01).epsilon(1e-4));
  }
  SUBCASE("non-finite gradient rejects the whole step and names the block") {
    Tensor a = Tensor::row({1.0});
    Tensor b = Tensor::row({2.0});
    std::vector<Tensor*> params{&a, &b};
    auto state = make_adam_state(params, {});
    std::vector<Tensor> grads{Tensor::row({1.0}), Tensor::row({std::nan("")})};
    try {
      adam_step(params, grads, state);
      FAIL("expected NonFiniteGradient");
    } catch (const NonFiniteGradient& e) {
      CHECK(e.block() == 1);
    }
    CHECK(a == Tensor::row({1.0}));
    CHECK(b == Tensor::row({2.0}));
    CHECK(state.step == 0);
  }
  SUBCASE("non-positive learning rate is rejected") {
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params{&p};
    CHECK_THROWS(make_adam_state(params, {.learning_rate = 0.0}));
  }
  SUBCASE("the tape-bound optimizer descends a quadratic") {
    Tensor p = Tensor::row({2.0, -3.0});
    Adam opt({&p}, {.learning_rate = 0.05});
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 300; ++i) {
      Tape t;
      Var loss = sum(square(t.parameter(p)));
      if (i == 0) first = loss.value().item();
      last = loss.value().item();
      t.backward(loss);
      opt.step(t);
    }
    CHECK(last < 1e-2 * first);
  }
}
