#include <doctest.h>

#include <cmath>
#include <random>

#include "pcml/physics.hpp"

using namespace pcml;

namespace {

// exp(M) by scaling and squaring with a Taylor series on the scaled matrix.
Matrix expm(const Matrix& M) {
  const double norm = M.cwiseAbs().rowwise().sum().maxCoeff();
  int s = 0;
  while (norm / std::pow(2.0, s) > 0.5) ++s;
  const Matrix A = M / std::pow(2.0, s);
  Matrix term = Matrix::Identity(M.rows(), M.cols());
  Matrix sum = term;
  for (int k = 1; k < 30; ++k) {
    term = term * A / k;
    sum += term;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum;
}

RhsBuilder linear_rhs(const Matrix& M) {
  return [M](ad::ExprGraph& g, double, ad::Node x, std::span<const ad::Node>) {
    return g.mat_vec(g.constant(M), x);
  };
}

ODESystem decay(double t0, double tf) {
  return ODESystem{1, linear_rhs(Matrix::Constant(1, 1, -1.0)), Vector::Ones(1), t0, tf};
}

}  // namespace

TEST_CASE("linear residuals and jacobians") {
  ConstraintSet cs = ConstraintSet::linear(Matrix{{1.0, 1.0}}, Vector{{1.0}});
  const Vector u;
  CHECK(residual(cs, u, Vector{{0.5, 0.5}})(0) == 0.0);
  CHECK(residual(cs, u, Vector{{1.0, 1.0}})(0) == 1.0);
  CHECK(residual_jacobian(cs, u, Vector{{7.0, -3.0}}) == Matrix{{1.0, 1.0}});
  CHECK_THROWS_AS(residual(cs, u, Vector::Ones(3)), ShapeError);
}

TEST_CASE("circle residual") {
  ConstraintSet cs(2);
  cs.add(circle_residual(1.0));
  const Vector v{{1.0, 0.0}};
  CHECK(residual(cs, Vector(), v)(0) == 0.0);
  CHECK(residual_jacobian(cs, Vector(), v) == Matrix{{2.0, 0.0}});
}

TEST_CASE("constraint set construction guards") {
  CHECK_THROWS_AS(ConstraintSet::linear(Matrix{{1.0, 1.0}, {2.0, 2.0}, {0.0, 1.0}}, Vector::Zero(3)),
                  ValidationError);
  CHECK_THROWS_AS(ConstraintSet::linear(Matrix{{1.0, 1.0, 0.0}, {2.0, 2.0, 0.0}}, Vector::Zero(2)),
                  ValidationError);
  ConstraintSet cs(2);
  cs.add(circle_residual(1.0));
  CHECK_THROWS_AS(cs.add(hyperbola_residual(1.0)), ValidationError);
}

TEST_CASE("residual jacobian matches central differences on random sets") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  const double h = 1e-6;
  for (int set = 0; set < 5; ++set) {
    const Index n = 4;
    Matrix A(1, n);
    for (Index j = 0; j < n; ++j) A(0, j) = nd(rng);
    ConstraintSet cs = ConstraintSet::linear(A, Vector::Constant(1, nd(rng)));
    Matrix Q(n, n);
    Vector q(n);
    for (Index k = 0; k < Q.size(); ++k) Q.data()[k] = nd(rng);
    for (Index k = 0; k < n; ++k) q(k) = nd(rng);
    cs.add(quadratic_residual("q", Q, q, nd(rng)));
    cs.add(hyperbola_residual(0.7, n));
    for (int p = 0; p < 100; ++p) {
      Vector v(n);
      for (Index k = 0; k < n; ++k) v(k) = nd(rng);
      const Matrix J = residual_jacobian(cs, Vector(), v);
      for (Index k = 0; k < n; ++k) {
        Vector vp = v, vm = v;
        vp(k) += h;
        vm(k) -= h;
        const Vector fd = (residual(cs, Vector(), vp) - residual(cs, Vector(), vm)) / (2 * h);
        for (Index r = 0; r < cs.count(); ++r) {
          const double scale = std::max(std::abs(J(r, k)), 1e-3);
          CHECK(std::abs(fd(r) - J(r, k)) / scale <= 1e-5);
        }
      }
    }
  }
}

TEST_CASE("zero field and exponential decay") {
  ODESystem zero{1, linear_rhs(Matrix::Zero(1, 1)), Vector::Constant(1, 5.0), 0.0, 1.0};
  const Matrix traj = integrate(zero, IntegratorConfig{0.1, 1});
  CHECK(traj.rows() == 11);
  CHECK((traj.array() == 5.0).all());

  const Matrix d = integrate(decay(0.0, 1.0), IntegratorConfig{0.01, 100});
  CHECK(std::abs(d(1, 0) - std::exp(-1.0)) < 1e-6);
}

TEST_CASE("linear system matches the matrix exponential") {
  const Matrix M{{-0.5, 1.0}, {-1.0, -0.3}};
  ODESystem sys{2, linear_rhs(M), Vector{{1.0, 0.5}}, 0.0, 2.0};
  IntegratorConfig cfg{0.01, 10};
  const Matrix traj = integrate(sys, cfg);
  const Vector t = observation_times(sys, cfg);
  double worst = 0.0;
  for (Index k = 0; k < t.size(); ++k) {
    const Vector exact = expm(M * t(k)) * sys.x0;
    worst = std::max(worst, (traj.row(k).transpose() - exact).lpNorm<Eigen::Infinity>());
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("fourth-order error ratio under step halving") {
  auto err = [](double h) {
    const int steps = static_cast<int>(std::lround(1.0 / h));
    const Matrix d = integrate(decay(0.0, 1.0), IntegratorConfig{h, steps});
    return std::abs(d(1, 0) - std::exp(-1.0));
  };
  const double ratio = err(0.1) / err(0.05);
  CHECK(ratio >= 12.0);
  CHECK(ratio <= 20.0);
}

TEST_CASE("autonomous systems are time-translation invariant") {
  const Matrix M{{-0.2, 0.4}, {-0.4, -0.2}};
  ODESystem a{2, linear_rhs(M), Vector{{1.0, -1.0}}, 0.0, 1.0};
  ODESystem b = a;
  b.t0 = 3.0;
  b.tf = 4.0;
  IntegratorConfig cfg{0.05, 4};
  CHECK(integrate(a, cfg) == integrate(b, cfg));
}

TEST_CASE("series reaction matches the closed form") {
  const double k1 = 1.0, k2 = 0.5;
  RhsBuilder rhs = [=](ad::ExprGraph& g, double, ad::Node x, std::span<const ad::Node>) {
    return g.mat_vec(g.constant(Matrix{{-k1, 0, 0}, {k1, -k2, 0}, {0, k2, 0}}), x);
  };
  ODESystem sys{3, rhs, Vector{{1.0, 0.0, 0.0}}, 0.0, 5.0};
  IntegratorConfig cfg{0.01, 25};
  const Matrix traj = integrate(sys, cfg);
  const Vector t = observation_times(sys, cfg);
  CHECK(t.size() == 21);
  for (Index k = 0; k < t.size(); ++k) {
    const double ca = std::exp(-k1 * t(k));
    const double cb = k1 / (k2 - k1) * (std::exp(-k1 * t(k)) - std::exp(-k2 * t(k)));
    CHECK(std::abs(traj(k, 0) - ca) <= 1e-6);
    CHECK(std::abs(traj(k, 1) - cb) <= 1e-6);
    CHECK(std::abs(traj.row(k).sum() - 1.0) <= 1e-10);
  }
  CHECK(2.0 * (std::exp(-0.5) - std::exp(-1.0)) == doctest::Approx(0.4773024371).epsilon(1e-10));
}

TEST_CASE("blow-up reports the time") {
  RhsBuilder rhs = [](ad::ExprGraph& g, double, ad::Node x, std::span<const ad::Node>) {
    return g.mul(g.mul(x, x), g.mul(x, x));
  };
  ODESystem sys{1, rhs, Vector::Constant(1, 10.0), 0.0, 1.0};
  try {
    integrate(sys, IntegratorConfig{0.1, 1});
    FAIL("expected blow-up");
  } catch (const BlowUpError& e) {
    CHECK(e.time() >= 0.0);
    CHECK(e.time() < 1.0);
  }
}

TEST_CASE("species balance") {
  Stoichiometry s{Matrix{{-1, 0}, {1, -1}, {0, 1}}, Vector{{1.0, 0.0, 0.0}}};
  ConstraintSet cs = make_species_balance(s);
  CHECK(cs.linear_part(Vector()).A == Matrix::Ones(1, 3));
  CHECK(cs.linear_part(Vector()).b(0) == 1.0);
  Stoichiometry bad{Matrix{{-1}, {2}, {0}}, Vector{{1.0, 0.0, 0.0}}};
  CHECK_THROWS_AS(make_species_balance(bad), ValidationError);
}
