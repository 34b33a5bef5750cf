#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "pcml/model.hpp"

using namespace pcml;

namespace {

// Bidirectional toy: z = 0.5 y (ML, W = 0.5 on the y input, no bias) and
// y = z + 1 (offset physics).
PCMLModel linear_bidirectional() {
  MLComponent ml({2, 1});
  return PCMLModel(ml, PhysicsComponent::offset(1, Vector::Ones(1), {false}),
                   Topology::bidirectional);
}

ParameterVector linear_bidirectional_theta(const PCMLModel& m) {
  ParameterVector th = m.init_parameters(0);
  th.values.setZero();
  th.values(1) = 0.5;  // W0 = [0, 0.5]
  th.values(3) = 1.0;  // theta_p
  return th;
}

// Manual tanh MLP, independent of the graph code.
Vector mlp(const std::vector<Matrix>& t, const Vector& x) {
  Vector h = x;
  const std::size_t layers = t.size() / 2;
  for (std::size_t k = 0; k < layers; ++k) {
    h = t[2 * k] * h + t[2 * k + 1];
    if (k + 1 < layers) h = h.array().tanh().matrix();
  }
  return h;
}

}  // namespace

TEST_CASE("parameter count and layout round trip") {
  MLComponent ml({3, 5, 4, 2});
  CHECK(ml.parameter_count() == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
  PCMLModel m(MLComponent({3, 5, 2}), PhysicsComponent::offset(3, Vector{{0.1, 0.2}}, {true, false}),
              Topology::ml_to_p);
  ParameterVector th = m.init_parameters(42);
  CHECK(th.size() == m.layout().size());
  const auto tensors = unflatten(th);
  const ParameterVector back = flatten(m.layout_ptr(), tensors);
  CHECK(back.values == th.values);
  CHECK(*back.layout == m.layout());
}

TEST_CASE("initialization") {
  PCMLModel m(MLComponent({4, 50, 3}), PhysicsComponent::offset(4, Vector{{1, 2, 3}}, {true, true, false}),
              Topology::ml_to_p);
  const ParameterVector a = m.init_parameters(5);
  const ParameterVector b = m.init_parameters(5);
  CHECK(a.values == b.values);
  CHECK(m.init_parameters(6).values != a.values);
  const auto t = unflatten(a);
  CHECK((t[1].array() == 0.0).all());
  CHECK((t[3].array() == 0.0).all());
  CHECK(t[4] == Matrix(Vector{{1, 2, 3}}));
  const double bound0 = std::sqrt(6.0 / (4 + 50));
  CHECK(t[0].cwiseAbs().maxCoeff() <= bound0);
  CHECK(t[0].cwiseAbs().maxCoeff() > 0.9 * bound0);

  const auto mask = m.trainable_mask();
  CHECK(std::count(mask.begin(), mask.end(), false) == 1);
  CHECK_FALSE(mask.back());
}

TEST_CASE("initial weights stay inside the uniform bound over many draws") {
  PCMLModel m(MLComponent({100, 100, 1}), PhysicsComponent::pass_through(100, 1), Topology::ml_to_p);
  const auto t = unflatten(m.init_parameters(1));
  const double bound = std::sqrt(6.0 / 200.0);
  CHECK(t[0].size() == 10000);
  CHECK(t[0].cwiseAbs().maxCoeff() <= bound);
  // Uniform on [-a, a] has variance a^2 / 3.
  const double var = t[0].array().square().mean();
  CHECK(var == doctest::Approx(bound * bound / 3.0).epsilon(0.05));
}

TEST_CASE("ML to physics composite map") {
  SUBCASE("identity physics") {
    PCMLModel m(MLComponent({2, 4, 3}), PhysicsComponent::pass_through(2, 3), Topology::ml_to_p);
    const ParameterVector th = m.init_parameters(3);
    const ForwardResult r = forward(m, Vector{{0.3, -0.7}}, th);
    CHECK(r.y_hat == r.z);
  }
  SUBCASE("bit-identical to manual evaluation") {
    PCMLModel m(MLComponent({2, 6, 2}), PhysicsComponent::offset(2, Vector{{0.25, -1.5}}, {true, true}),
                Topology::ml_to_p);
    ParameterVector th = m.init_parameters(9);
    th.values(m.layout().slices()[1].offset) = 0.1;
    const Vector u{{0.4, 1.1}};
    const auto t = unflatten(th);
    const Vector z = mlp({t.begin(), t.end() - 1}, u);
    const Vector y = z + t.back();
    const ForwardResult r = forward(m, u, th);
    CHECK(r.z == z);
    CHECK(r.y_hat == y);
  }
}

TEST_CASE("physics to ML with zero correction returns the physics prediction") {
  const Matrix G{{1.0, 2.0}, {0.0, -1.0}};
  PCMLModel m(MLComponent({4, 3, 2}), PhysicsComponent::affine_in_input(G, Vector{{0.5, 0.5}}, {true, true}),
              Topology::p_to_ml);
  ParameterVector th = m.init_parameters(1);
  const auto& last = m.layout().slices()[2];  // W1
  th.values.segment(last.offset, last.size()).setZero();
  const Vector u{{1.0, 3.0}};
  const ForwardResult r = forward(m, u, th);
  CHECK(r.y_hat == G * u + Vector{{0.5, 0.5}});
}

TEST_CASE("bidirectional linear fixed point") {
  const PCMLModel m = linear_bidirectional();
  const ParameterVector th = linear_bidirectional_theta(m);
  const ForwardResult r = forward(m, Vector::Zero(1), th);
  CHECK(r.y_hat(0) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(r.z(0) == doctest::Approx(1.0).epsilon(1e-9));
  // Substituting back: z - 0.5 y and y - (z + 1).
  CHECK(std::abs(r.z(0) - 0.5 * r.y_hat(0)) <= 1e-10);
  CHECK(std::abs(r.y_hat(0) - r.z(0) - 1.0) <= 1e-10);
  for (std::size_t k = 1; k < r.residual_history.size(); ++k) {
    CHECK(r.residual_history[k] <= r.residual_history[k - 1]);
  }
}

TEST_CASE("bidirectional divergence carries the residual") {
  MLComponent ml({2, 1});
  FixedPointOptions fp;
  fp.max_iters = 20;
  PCMLModel m(ml, PhysicsComponent::offset(1, Vector::Ones(1), {false}), Topology::bidirectional, fp);
  ParameterVector th = m.init_parameters(0);
  th.values.setZero();
  th.values(1) = 3.5;  // expansive: y <- 0.5 y + 0.5 (3.5 y + 1)
  th.values(3) = 1.0;
  try {
    forward(m, Vector::Zero(1), th);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.residual() > 1.0);
  }
}

TEST_CASE("batch predictions") {
  PCMLModel m(MLComponent({3, 8, 2}), PhysicsComponent::offset(3, Vector{{0.1, 0.2}}, {true, true}),
              Topology::ml_to_p);
  const ParameterVector th = m.init_parameters(17);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  Matrix U(100, 3);
  for (Index k = 0; k < U.size(); ++k) U.data()[k] = nd(rng);

  const auto [Y, Z] = predict_batch(m, U, th);
  for (Index i = 0; i < U.rows(); ++i) {
    const ForwardResult r = forward(m, U.row(i).transpose(), th);
    CHECK(Y.row(i).transpose() == r.y_hat);
    CHECK(Z.row(i).transpose() == r.z);
  }
  const auto [Ys, Zs] = predict_batch(m, U, th, Execution::serial);
  CHECK(Ys == Y);

  std::vector<Index> perm(100);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix P(100, 3);
  for (Index i = 0; i < 100; ++i) P.row(i) = U.row(perm[static_cast<std::size_t>(i)]);
  const Matrix Yp = predict_batch(m, P, th).first;
  for (Index i = 0; i < 100; ++i) CHECK(Yp.row(i) == Y.row(perm[static_cast<std::size_t>(i)]));

  const Matrix one = predict_batch(m, U.topRows(1), th).first;
  CHECK(one.row(0) == Y.row(0));
}

TEST_CASE("batch errors name the row") {
  MLComponent ml({2, 1});
  FixedPointOptions fp;
  fp.max_iters = 200;
  PCMLModel m(ml, PhysicsComponent::offset(1, Vector::Ones(1), {false}), Topology::bidirectional, fp);
  ParameterVector th = m.init_parameters(0);
  th.values.setZero();
  th.values(0) = 1.0;  // rounding at |u| = 1e12 keeps the residual above tol  // weight on u
  th.values(1) = 0.5;
  th.values(3) = 1.0;
  Matrix U(3, 1);
  U << 0.0, 0.0, 1e12;
  try {
    predict_batch(m, U, th);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
}

TEST_CASE("interface mismatches are rejected") {
  CHECK_THROWS_AS(PCMLModel(MLComponent({2, 3}), PhysicsComponent::pass_through(2, 2), Topology::ml_to_p),
                  ShapeError);
  CHECK_THROWS_AS(PCMLModel(MLComponent({2, 2}), PhysicsComponent::offset(2, Vector::Zero(2), {true, true}),
                            Topology::p_to_ml),
                  ShapeError);
  CHECK_THROWS_AS(topology_from_string("sideways"), ValidationError);
  CHECK(topology_from_string(to_string(Topology::bidirectional)) == Topology::bidirectional);
}

TEST_CASE("neural ODE model follows its grid") {
  MLComponent rhs({2, 2});
  NeuralODEModel m(rhs, Vector{{1.0, 0.0}}, 0.0, IntegratorConfig{0.05, 5});
  ParameterVector th = m.init_parameters(0);
  th.values.setZero();
  // W = [[-1, 0], [1, 0]]: x1' = -x1, x2' = x1.
  th.values(0) = -1.0;
  th.values(1) = 1.0;
  Matrix U(3, 1);
  U << 0.0, 1.0, 0.25;
  const Matrix Y = predict_batch(m, U, th).first;
  CHECK(Y(0, 0) == 1.0);
  CHECK(Y(1, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-6));
  CHECK(Y(1, 0) + Y(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(Y(2, 0) == doctest::Approx(std::exp(-0.25)).epsilon(1e-6));
  CHECK_THROWS_AS(m.grid_index(0.1), ValidationError);
}
