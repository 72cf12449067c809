#include <cmath>

#include "doctest.h"
#include "medgrpo/errors.hpp"
#include "medgrpo/nn.hpp"
#include "support.hpp"

using namespace medgrpo;
using namespace medgrpo::nn;
using testing::random_matrix;
using testing::row;

namespace {

Mlp single_layer(Matrix w, RowVector b, Activation act) {
  Mlp m;
  m.layers.push_back({std::move(w), std::move(b), act});
  return m;
}

}  // namespace

TEST_CASE("forward: identity and relu layers") {
  auto id = single_layer(Matrix::Identity(2, 2), RowVector::Zero(2), Activation::identity);
  Matrix x(1, 2);
  x << -1.0, 2.0;
  CHECK(forward_mlp(id, x).output.isApprox(x));

  auto relu = single_layer(Matrix::Identity(2, 2), RowVector::Zero(2), Activation::relu);
  const Matrix y = forward_mlp(relu, x).output;
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == 2.0);
}

TEST_CASE("forward: two hand-set layers") {
  Mlp m;
  Matrix w1(2, 2);
  w1 << 1, -1, 2, 0.5;
  m.layers.push_back({w1, row({0.5, -3.0}), Activation::relu});
  Matrix w2(1, 2);
  w2 << 2, -1;
  m.layers.push_back({w2, row({1.0}), Activation::identity});
  Matrix x(1, 2);
  x << 3, 1;
  // hidden: relu(3 - 1 + 0.5, 6 + 0.5 - 3) = (2.5, 3.5); out: 5 - 3.5 + 1
  CHECK(forward_mlp(m, x).output(0, 0) == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("forward rejects a width mismatch") {
  Rng rng(1);
  auto m = make_mlp({3, 4, 2}, Activation::tanh, Activation::identity, rng);
  CHECK_THROWS_AS(forward_mlp(m, Matrix::Zero(1, 2)), ConfigError);
}

TEST_CASE("backward: linear layer gives outer product") {
  Matrix w(2, 3);
  w << 1, 2, 3, 4, 5, 6;
  auto m = single_layer(w, RowVector::Zero(2), Activation::identity);
  Matrix x(1, 3);
  x << 0.5, -1, 2;
  Matrix g(1, 2);
  g << 3, -2;
  const auto fwd = forward_mlp(m, x);
  const auto bwd = backward_mlp(m, fwd.cache, g);
  CHECK((bwd.grads.layers[0].weight - g.transpose() * x).norm() == 0.0);
  CHECK((bwd.input_grad - g * w).norm() == 0.0);
}

TEST_CASE("sigmoid derivative at zero") {
  const double y = activate(Activation::sigmoid, 0.0);
  CHECK(y == 0.5);
  CHECK(activate_derivative(Activation::sigmoid, 0.0, y) == 0.25);
}

TEST_CASE("backward on an empty cache is a usage error") {
  Rng rng(2);
  auto m = make_mlp({2, 2}, Activation::tanh, Activation::identity, rng);
  CHECK_THROWS_AS(backward_mlp(m, MlpCache{}, Matrix::Zero(1, 2)), UsageError);
}

TEST_CASE("mlp gradients match finite differences over seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto hidden = seed % 2 ? Activation::tanh : Activation::sigmoid;
    auto m = make_mlp({3, 5, 2}, hidden, Activation::identity, rng);
    const Matrix x = random_matrix(4, 3, rng);
    const Matrix readout = random_matrix(4, 2, rng);
    auto eval = [&](const Mlp& p) {
      const auto fwd = forward_mlp(p, x);
      auto bwd = backward_mlp(p, fwd.cache, readout);
      return std::pair{fwd.output.cwiseProduct(readout).sum(), std::move(bwd.grads)};
    };
    const auto report = gradient_check_params(m, eval);
    CHECK(report.passed(1e-4));
  }
}

TEST_CASE("softmax rows") {
  Matrix m(3, 2);
  m << 0, 0, 1000, 1000, std::log(1.0), std::log(3.0);
  const Matrix p = softmax_rows(m);
  CHECK(p(0, 0) == 0.5);
  CHECK(p(1, 0) == 0.5);
  CHECK(p(1, 1) == 0.5);
  CHECK(p(2, 0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p(2, 1) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Vector z = random_matrix(5, 1, rng, 3.0);
    const Vector a = log_softmax(z);
    const Vector b = softmax(z).array().log().matrix();
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("adam: zero gradient leaves params and decays moments") {
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
  AdamState state;
  adam_step(TensorViews{std::span(p)}, ConstTensorViews{std::span<const double>(g)}, state, 0.1);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
  CHECK(state.first[0][0] == 0.0);
  CHECK(state.second[0][0] == 0.0);
}

TEST_CASE("adam: two steps match the scalar recurrence") {
  // Oracle: the moment recurrences written out for a scalar.
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.1, g = 1.0;
  double m = 0, v = 0, w = 0;
  std::vector<double> expected;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    w -= lr * mhat / (std::sqrt(vhat) + eps);
    expected.push_back(w);
  }

  std::vector<double> p{0.0}, grad{g};
  AdamState state;
  for (int t = 0; t < 2; ++t) {
    adam_step(TensorViews{std::span(p)}, ConstTensorViews{std::span<const double>(grad)}, state, lr);
    CHECK(p[0] == doctest::Approx(expected[static_cast<std::size_t>(t)]).epsilon(1e-14));
  }
  CHECK(p[0] == doctest::Approx(-0.2).epsilon(1e-6));
}

TEST_CASE("adam: first step has the sign of the gradient with magnitude step") {
  std::vector<double> p{0.0, 0.0, 0.0}, g{3.0, -0.5, 0.0};
  AdamState state;
  adam_step(TensorViews{std::span(p)}, ConstTensorViews{std::span<const double>(g)}, state, 0.01);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(p[2] == 0.0);
}

TEST_CASE("gradient_check on a quadratic") {
  auto f = [](const Vector& w) { return w.squaredNorm(); };
  const Vector w = testing::vec({1.0, 2.0});
  const Vector analytic = 2.0 * w;
  const auto report = gradient_check(f, w, analytic);
  CHECK(report.max_rel_error < 1e-6);
  CHECK(report.checked == 2);
}

TEST_CASE("gradient_check catches a wrong gradient and a nondeterministic loss") {
  auto f = [](const Vector& w) { return w.squaredNorm(); };
  const Vector w = testing::vec({1.0, 2.0});
  CHECK_FALSE(gradient_check(f, w, testing::vec({2.0, 4.1})).passed(1e-4));

  int calls = 0;
  auto noisy = [&](const Vector& x) { return x.squaredNorm() + 1e-3 * (calls++ % 2); };
  CHECK_FALSE(gradient_check(noisy, w, 2.0 * w).deterministic);
}

TEST_CASE("flatten and unflatten round trip") {
  Rng rng(4);
  auto m = make_mlp({2, 3, 1}, Activation::relu, Activation::identity, rng);
  const Vector flat = flatten(m);
  CHECK(flat.size() == static_cast<Eigen::Index>(parameter_count(m)));
  auto z = zeros_like(m);
  unflatten(z, flat);
  CHECK((flatten(z) - flat).norm() == 0.0);
}

TEST_CASE("activation names round trip") {
  for (auto a : {Activation::identity, Activation::relu, Activation::sigmoid, Activation::tanh})
    CHECK(activation_from_string(to_string(a)) == a);
  CHECK_THROWS_AS(activation_from_string("gelu"), ConfigError);
}
