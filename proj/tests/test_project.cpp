#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pcml/project.hpp"

using namespace pcml;

namespace {

Matrix random_full_rank(std::mt19937_64& rng, Index m, Index n) {
  std::normal_distribution<double> nd;
  Matrix A(m, n);
  for (Index k = 0; k < A.size(); ++k) A.data()[k] = nd(rng);
  return A;
}

// Closed-form KKT solve of min |x - v|^2 s.t. Ax = b via the normal equations.
Vector kkt_oracle(const Vector& v, const Matrix& A, const Vector& b) {
  const Index n = v.size(), m = b.size();
  Matrix K = Matrix::Zero(n + m, n + m);
  K.topLeftCorner(n, n).setIdentity();
  K.topRightCorner(n, m) = A.transpose();
  K.bottomLeftCorner(m, n) = A;
  Vector rhs(n + m);
  rhs << v, b;
  return K.fullPivLu().solve(rhs).head(n);
}

// Nearest point on a curve in the plane: dense sweep of a parameterization, then
// golden-section refinement around the best sample.
template <class Curve>
Vector grid_argmin(const Vector& v0, Curve curve, double lo, double hi) {
  const int N = 200000;
  double best_t = lo, best = 1e300;
  for (int i = 0; i <= N; ++i) {
    const double t = lo + (hi - lo) * i / N;
    const double d = (curve(t) - v0).squaredNorm();
    if (d < best) {
      best = d;
      best_t = t;
    }
  }
  double a = best_t - (hi - lo) / N, b = best_t + (hi - lo) / N;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double c = b - phi * (b - a), d = a + phi * (b - a);
    if ((curve(c) - v0).squaredNorm() < (curve(d) - v0).squaredNorm()) {
      b = d;
    } else {
      a = c;
    }
  }
  return curve(0.5 * (a + b));
}

Vector circle_point(double t) { return Vector{{std::cos(t), std::sin(t)}}; }
Vector hyperbola_point(double t) { return Vector{{t, 1.0 / t}}; }

}  // namespace

TEST_CASE("linear projection examples") {
  const Matrix A{{1.0, 1.0}};
  const Vector b{{1.0}};
  const auto r = linear_project(Vector::Zero(2), A, b);
  CHECK(r.v_proj(0) == doctest::Approx(0.5));
  CHECK(r.v_proj(1) == doctest::Approx(0.5));

  const Vector feasible{{0.2, 0.8}};
  CHECK((linear_project(feasible, A, b).v_proj - feasible).norm() < 1e-15);

  const auto r3 = linear_project(Vector{{1.0, 2.0, 3.0}}, Matrix{{1.0, 1.0, 1.0}}, Vector{{3.0}});
  CHECK((r3.v_proj - Vector{{0.0, 1.0, 2.0}}).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("linear projection on a grid agrees with the closed form") {
  // v = (1,2,3) onto x1+x2+x3 = 3: enumerate feasible (x1, x2) on a grid.
  const Vector v{{1.0, 2.0, 3.0}};
  double best = 1e300;
  Vector arg(3);
  for (int i = -200; i <= 200; ++i) {
    for (int j = -200; j <= 300; ++j) {
      const Vector x{{i * 0.01, j * 0.01, 3.0 - i * 0.01 - j * 0.01}};
      const double d = (x - v).squaredNorm();
      if (d < best) {
        best = d;
        arg = x;
      }
    }
  }
  CHECK((arg - Vector{{0.0, 1.0, 2.0}}).norm() < 1e-12);
}

TEST_CASE("linear projection matches the KKT oracle on random instances") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> nd(2, 8);
  std::normal_distribution<double> g;
  double worst = 0.0, worst_idem = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = nd(rng);
    const Index m = std::uniform_int_distribution<int>(1, static_cast<int>(n) - 1)(rng);
    const Matrix A = random_full_rank(rng, m, n);
    Vector b(m), v(n);
    for (Index k = 0; k < m; ++k) b(k) = g(rng);
    for (Index k = 0; k < n; ++k) v(k) = g(rng);
    const auto r = linear_project(v, A, b);
    worst = std::max(worst, (r.v_proj - kkt_oracle(v, A, b)).lpNorm<Eigen::Infinity>());
    const auto again = linear_project(r.v_proj, A, b);
    worst_idem = std::max(worst_idem, (again.v_proj - r.v_proj).lpNorm<Eigen::Infinity>());
    CHECK((r.v_proj - v - A.transpose() * r.multipliers).lpNorm<Eigen::Infinity>() < 1e-10);
  }
  CHECK(worst <= 1e-10);
  CHECK(worst_idem <= 1e-9);
}

TEST_CASE("linear projector is symmetric and idempotent") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix A = random_full_rank(rng, 2, 5);
    const Matrix P = linear_projector(A);
    CHECK((P - P.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((P * P - P).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("rank-deficient linear projection is rejected") {
  CHECK_THROWS_AS(linear_project(Vector::Zero(3), Matrix{{1, 1, 1}, {2, 2, 2}}, Vector::Zero(2)),
                  SingularityError);
}

TEST_CASE("newton projection examples") {
  ConstraintSet circle(2);
  circle.add(circle_residual(1.0));
  const auto r = newton_project(Vector{{2.0, 0.0}}, circle, Vector());
  CHECK((r.v_proj - Vector{{1.0, 0.0}}).norm() < 1e-10);

  const Vector on{{0.6, 0.8}};
  const auto same = newton_project(on, circle, Vector());
  CHECK(same.iterations == 0);
  CHECK(same.v_proj == on);

  ConstraintSet hyp(2);
  hyp.add(hyperbola_residual(1.0));
  const auto h = newton_project(Vector{{2.0, 2.0}}, hyp, Vector());
  CHECK((h.v_proj - Vector{{1.0, 1.0}}).norm() < 1e-10);
}

TEST_CASE("newton projection matches grid search on circle and hyperbola") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> d(-2.5, 2.5);
  ConstraintSet circle(2);
  circle.add(circle_residual(1.0));
  ConstraintSet hyp(2);
  hyp.add(hyperbola_residual(1.0));
  for (int trial = 0; trial < 20; ++trial) {
    Vector v0{{d(rng), d(rng)}};
    if (v0.norm() < 0.2) continue;
    const auto r = newton_project(v0, circle, Vector());
    const Vector ref = grid_argmin(v0, circle_point, -std::numbers::pi, std::numbers::pi);
    CHECK((r.v_proj - ref).norm() <= 1e-6);
    CHECK((newton_project(r.v_proj, circle, Vector()).v_proj - r.v_proj).lpNorm<Eigen::Infinity>() <=
          1e-9);
  }
  for (int trial = 0; trial < 20; ++trial) {
    // Points in the positive quadrant away from the axes, where the nearest
    // branch is unambiguous.
    Vector v0{{0.3 + std::abs(d(rng)), 0.3 + std::abs(d(rng))}};
    const auto r = newton_project(v0, hyp, Vector());
    const Vector ref = grid_argmin(v0, hyperbola_point, 0.05, 20.0);
    CHECK((r.v_proj - ref).norm() <= 1e-6);
    CHECK(std::abs(residual(hyp, Vector(), r.v_proj)(0)) <= 1e-10);
  }
}

TEST_CASE("project dispatches and handles empty sets") {
  ConstraintSet none(3);
  const Vector v{{1.0, 2.0, 3.0}};
  CHECK(project(v, none, Vector()).v_proj == v);
  ConstraintSet lin = ConstraintSet::linear(Matrix{{1.0, 1.0, 1.0}}, Vector{{3.0}});
  CHECK((project(v, lin, Vector()).v_proj - Vector{{0.0, 1.0, 2.0}}).norm() < 1e-14);
}

TEST_CASE("projection backward") {
  const Matrix A{{1.0, 2.0, -1.0}};
  ConstraintSet lin = ConstraintSet::linear(A, Vector{{0.5}});
  const Vector v0{{0.3, -0.2, 0.9}};
  const auto r = project(v0, lin, Vector());
  const Vector g{{1.0, -2.0, 0.5}};
  const Vector back = project_backward(r, lin, Vector(), v0, g);
  CHECK((back - linear_projector(A) * g).norm() < 1e-14);
  CHECK(project_backward(r, lin, Vector(), v0, Vector::Zero(3)).norm() == 0.0);

  ConstraintSet circle(2);
  circle.add(circle_residual(1.0));
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  const double h = 1e-6;
  for (int trial = 0; trial < 10; ++trial) {
    const Vector p{{1.5 + 0.3 * nd(rng), 0.7 + 0.3 * nd(rng)}};
    const Vector up{{nd(rng), nd(rng)}};
    const auto res = newton_project(p, circle, Vector());
    const Vector analytic = project_backward(res, circle, Vector(), p, up);
    for (Index k = 0; k < 2; ++k) {
      Vector a = p, b = p;
      a(k) += h;
      b(k) -= h;
      const double fd = (up.dot(newton_project(a, circle, Vector()).v_proj) -
                         up.dot(newton_project(b, circle, Vector()).v_proj)) /
                        (2 * h);
      CHECK(std::abs(fd - analytic(k)) <= 1e-4 * std::max(1.0, std::abs(analytic(k))));
    }
  }
}

TEST_CASE("newton projection failure carries the best iterate") {
  ConstraintSet circle(2);
  circle.add(circle_residual(1.0));
  ProjectionOptions opts;
  opts.max_iters = 1;
  try {
    newton_project(Vector{{40.0, 3.0}}, circle, Vector(), opts);
    FAIL("expected failure");
  } catch (const ProjectionFailure& e) {
    CHECK(e.best().v_proj.size() == 2);
    CHECK(e.residual() > 0.0);
  }
}

TEST_CASE("newton projection leaves constrained maxima of the distance") {
  // From (a, a) with a > 2, the symmetric point (1, 1) is a KKT point but a
  // local maximum of the distance along the hyperbola.
  ConstraintSet hyp(2);
  hyp.add(hyperbola_residual(1.0));
  for (const double a : {2.5, 3.0, 4.0}) {
    const Vector v0{{a + 1e-3, a}};
    const auto r = newton_project(v0, hyp, Vector());
    const Vector ref = grid_argmin(v0, hyperbola_point, 0.05, 20.0);
    CHECK((r.v_proj - ref).norm() <= 1e-6);
    CHECK(r.v_proj(0) > r.v_proj(1));
    CHECK(std::abs(residual(hyp, Vector(), r.v_proj)(0)) <= 1e-10);
  }
  // Close to the degenerate case the plain Newton line search stalls.
  const Vector near{{2.0335956627880911, 2.0432254988941905}};
  CHECK((newton_project(near, hyp, Vector()).v_proj - grid_argmin(near, hyperbola_point, 0.05, 20.0)).norm() <= 1e-6);
  CHECK((newton_project(Vector{{2.0, 2.0}}, hyp, Vector()).v_proj - Vector{{1.0, 1.0}}).norm() <= 1e-6);
}
