#include "pcml/project.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>
#include <string>

namespace pcml {

namespace {

struct LinearFactor {
  Matrix Q;  // n x m, orthonormal columns spanning range(A')
  Eigen::ColPivHouseholderQR<Matrix> qr;
  Index m = 0;
};

LinearFactor factor_linear(const Matrix& A) {
  LinearFactor f;
  f.m = A.rows();
  f.qr.setThreshold(1e-10);
  f.qr.compute(A.transpose());
  if (f.qr.rank() < f.m) {
    throw SingularityError("linear constraint matrix is rank deficient (rank " +
                           std::to_string(f.qr.rank()) + " < " + std::to_string(f.m) + ")");
  }
  f.Q = f.qr.householderQ() * Matrix::Identity(A.cols(), f.m);
  return f;
}

// KKT matrix [[I - sum lambda_j H_j, -J'], [J, -shift I]].
Matrix kkt_matrix(const ConstraintSet& cs, const Vector& u, const Vector& v, const Vector& lambda,
                  double shift) {
  const Index n = cs.dim();
  const Index m = cs.count();
  const Matrix J = residual_jacobian(cs, u, v);
  Matrix H = Matrix::Identity(n, n);
  if (!cs.nonlinear().empty()) {
    const auto hess = residual_hessians(cs, u, v);
    for (Index j = 0; j < m; ++j) H -= lambda(j) * hess[static_cast<std::size_t>(j)];
  }
  Matrix K = Matrix::Zero(n + m, n + m);
  K.topLeftCorner(n, n) = H + shift * Matrix::Identity(n, n);
  K.topRightCorner(n, m) = -J.transpose();
  K.bottomLeftCorner(m, n) = J;
  K.bottomRightCorner(m, m) = -shift * Matrix::Identity(m, m);
  return K;
}

struct KktState {
  Vector F;  // [stationarity; constraints]
  double stationarity = 0.0;
  double feasibility = 0.0;
  double norm() const { return std::max(stationarity, feasibility); }
};

KktState kkt_residual(const ConstraintSet& cs, const Vector& u, const Vector& v0, const Vector& v,
                      const Vector& lambda) {
  const Index n = cs.dim();
  const Index m = cs.count();
  KktState s;
  s.F.resize(n + m);
  const Matrix J = residual_jacobian(cs, u, v);
  s.F.head(n) = (v - v0) - J.transpose() * lambda;
  s.F.tail(m) = residual(cs, u, v);
  s.stationarity = n > 0 ? s.F.head(n).lpNorm<Eigen::Infinity>() : 0.0;
  s.feasibility = m > 0 ? s.F.tail(m).lpNorm<Eigen::Infinity>() : 0.0;
  return s;
}

bool nearly_singular(const Eigen::FullPivLU<Matrix>& lu) {
  return !lu.isInvertible() || lu.rcond() < 1e-14;
}

// Solves K d = rhs, shifting the diagonal blocks when K is near-singular.
Vector solve_kkt(const ConstraintSet& cs, const Vector& u, const Vector& v, const Vector& lambda,
                 const Vector& rhs, const ProjectionOptions& opts, bool transpose) {
  double shift = 0.0;
  while (true) {
    Matrix K = kkt_matrix(cs, u, v, lambda, shift);
    if (transpose) K.transposeInPlace();
    Eigen::FullPivLU<Matrix> lu(K);
    if (!nearly_singular(lu)) return lu.solve(rhs);
    shift = shift == 0.0 ? opts.initial_shift : shift * 10.0;
    if (shift > opts.max_shift * (1.0 + 1e-12)) {
      throw SingularityError("KKT matrix is singular even after diagonal shifts up to " +
                             std::to_string(opts.max_shift));
    }
  }
}

}  // namespace

ProjectionResult linear_project(const Vector& v, const Matrix& A, const Vector& b) {
  if (A.cols() != v.size() || A.rows() != b.size()) {
    throw ShapeError("linear_project: A is " + std::to_string(A.rows()) + "x" +
                     std::to_string(A.cols()) + ", v has " + std::to_string(v.size()) +
                     " entries, b has " + std::to_string(b.size()));
  }
  const LinearFactor f = factor_linear(A);
  const Index m = f.m;
  // A' P = Q R  =>  A = P R' Q'.
  const auto R = f.qr.matrixR().topLeftCorner(m, m).template triangularView<Eigen::Upper>();
  const Vector r = A * v - b;
  const Vector s = R.transpose().solve(f.qr.colsPermutation().transpose() * r);
  ProjectionResult out;
  out.v_proj = v - f.Q * s;
  out.multipliers = -(f.qr.colsPermutation() * R.solve(s));
  out.iterations = 1;
  out.final_residual_norm = m > 0 ? (A * out.v_proj - b).lpNorm<Eigen::Infinity>() : 0.0;
  return out;
}

Matrix linear_projector(const Matrix& A) {
  const LinearFactor f = factor_linear(A);
  return Matrix::Identity(A.cols(), A.cols()) - f.Q * f.Q.transpose();
}

namespace {

// Newton on the KKT system from (v, lambda), spending at most `budget`
// iterations. Returns true on convergence; `best` tracks the lowest residual.
struct NewtonRun {
  Vector v;
  Vector lambda;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
  std::string failure;
};

NewtonRun run_newton(const ConstraintSet& cs, const Vector& u, const Vector& v0, Vector v, Vector lambda,
                     int budget, const ProjectionOptions& opts, ProjectionResult& best) {
  const Index n = cs.dim();
  const Index m = cs.count();
  KktState state = kkt_residual(cs, u, v0, v, lambda);
  NewtonRun run;
  for (int it = 0;; ++it) {
    if (state.norm() < best.final_residual_norm) best = ProjectionResult{v, it, state.norm(), lambda};
    if (state.stationarity <= opts.tol && state.feasibility <= opts.tol) {
      return NewtonRun{v, lambda, it, state.feasibility, true, ""};
    }
    if (it >= budget) {
      run.failure = "did not converge";
      break;
    }
    const Vector d = solve_kkt(cs, u, v, lambda, -state.F, opts, false);
    double t = 1.0;
    bool accepted = false;
    for (int bt = 0; bt <= opts.max_backtracks; ++bt) {
      const Vector v_try = v + t * d.head(n);
      const Vector l_try = lambda + t * d.tail(m);
      KktState trial = kkt_residual(cs, u, v0, v_try, l_try);
      if (trial.F.allFinite() && trial.norm() < state.norm()) {
        v = v_try;
        lambda = l_try;
        state = std::move(trial);
        accepted = true;
        break;
      }
      t *= opts.backtrack_factor;
    }
    if (!accepted) {
      run.iterations = it + 1;
      run.failure = "line search failed after " + std::to_string(opts.max_backtracks) + " backtracks";
      break;
    }
    run.iterations = it + 1;
  }
  run.v = v;
  run.lambda = lambda;
  run.residual = state.norm();
  return run;
}

// Orthonormal basis of the null space of J.
Matrix tangent_basis(const Matrix& J) {
  const Index n = J.cols();
  Eigen::ColPivHouseholderQR<Matrix> qr(J.transpose());
  qr.setThreshold(1e-10);
  const Index r = qr.rank();
  const Matrix Q = qr.householderQ() * Matrix::Identity(n, n);
  return Q.rightCols(n - r);
}

// Minimum-norm Gauss-Newton steps back onto the manifold.
bool restore(const ConstraintSet& cs, const Vector& u, Vector& v, double tol) {
  for (int k = 0; k < 100; ++k) {
    const Vector c = residual(cs, u, v);
    if (!c.allFinite()) return false;
    if (c.lpNorm<Eigen::Infinity>() <= tol) return true;
    const Vector dv = residual_jacobian(cs, u, v).completeOrthogonalDecomposition().solve(c);
    if (!dv.allFinite()) return false;
    v -= dv;
  }
  return residual(cs, u, v).lpNorm<Eigen::Infinity>() <= tol;
}

// Gradient descent of |v - v0|^2 along the manifold, from a feasible v.
void descend(const ConstraintSet& cs, const Vector& u, const Vector& v0, Vector& v, double tol) {
  for (int k = 0; k < 500; ++k) {
    const Matrix Z = tangent_basis(residual_jacobian(cs, u, v));
    const Vector g = Z * (Z.transpose() * (v - v0));
    if (g.lpNorm<Eigen::Infinity>() <= 1e-6 * std::max(1.0, (v - v0).norm())) return;
    const double f = (v - v0).squaredNorm();
    double alpha = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 30 && !moved; ++bt, alpha *= 0.5) {
      Vector trial = v - alpha * g;
      if (restore(cs, u, trial, tol) && (trial - v0).squaredNorm() < f) {
        v = trial;
        moved = true;
      }
    }
    if (!moved) return;
  }
}

// Smallest eigenvalue of the Lagrangian Hessian on the tangent space with
// its eigenvector, mapped back to the full space.
std::pair<double, Vector> tangent_curvature(const ConstraintSet& cs, const Vector& u, const Vector& v,
                                            const Vector& lambda) {
  const Index n = cs.dim();
  const Matrix Z = tangent_basis(residual_jacobian(cs, u, v));
  if (Z.cols() == 0) return {1.0, Vector::Zero(n)};
  Matrix W = Matrix::Identity(n, n);
  const auto hess = residual_hessians(cs, u, v);
  for (Index j = 0; j < cs.count(); ++j) W -= lambda(j) * hess[static_cast<std::size_t>(j)];
  Eigen::SelfAdjointEigenSolver<Matrix> es(Z.transpose() * W * Z);
  return {es.eigenvalues()(0), Z * es.eigenvectors().col(0)};
}

// Multipliers that best explain v - v0 = J' lambda.
Vector fit_multipliers(const ConstraintSet& cs, const Vector& u, const Vector& v0, const Vector& v) {
  return residual_jacobian(cs, u, v).transpose().completeOrthogonalDecomposition().solve(v - v0);
}

}  // namespace

ProjectionResult newton_project(const Vector& v0, const ConstraintSet& cs, const Vector& u,
                                const ProjectionOptions& opts) {
  if (!(opts.tol > 0.0)) throw ValidationError("projection tolerance must be positive");
  if (v0.size() != cs.dim()) {
    throw ShapeError("newton_project: point has dimension " + std::to_string(v0.size()) +
                     ", constraint set expects " + std::to_string(cs.dim()));
  }
  const Index m = cs.count();
  ProjectionResult best{v0, 0, std::numeric_limits<double>::infinity(), Vector::Zero(m)};
  int used = 0;
  NewtonRun run = run_newton(cs, u, v0, v0, Vector::Zero(m), opts.max_iters, opts, best);
  used += run.iterations;
  // A KKT point can be a constrained maximum or saddle of the distance. Leave
  // it along negative tangent curvature, descend, and polish with Newton;
  // stalled runs restart the same way from their best feasible point.
  for (int round = 0; round < 8; ++round) {
    Vector start;
    if (run.converged) {
      const auto [curvature, dir] = tangent_curvature(cs, u, run.v, run.lambda);
      if (curvature > -1e-8) return ProjectionResult{run.v, used, run.residual, run.lambda};
      const double dist = (run.v - v0).squaredNorm();
      for (double step = std::max(0.5 * std::sqrt(dist), 0.1); step > 1e-6 && start.size() == 0; step *= 0.5) {
        for (const double sign : {1.0, -1.0}) {
          Vector trial = run.v + sign * step * dir;
          if (!restore(cs, u, trial, opts.tol)) continue;
          const double d = (trial - v0).squaredNorm();
          if (d < dist && (start.size() == 0 || d < (start - v0).squaredNorm())) start = trial;
        }
      }
      if (start.size() == 0) return ProjectionResult{run.v, used, run.residual, run.lambda};
    } else {
      start = best.v_proj;
      if (used >= opts.max_iters || !restore(cs, u, start, opts.tol)) break;
    }
    descend(cs, u, v0, start, opts.tol);
    run = run_newton(cs, u, v0, start, fit_multipliers(cs, u, v0, start), opts.max_iters - used, opts, best);
    used += run.iterations;
  }
  if (run.converged) return ProjectionResult{run.v, used, run.residual, run.lambda};
  best.iterations = used;
  if (used >= opts.max_iters) {
    throw ProjectionFailure("newton projection did not converge in " + std::to_string(opts.max_iters) +
                                " iterations (KKT residual " + std::to_string(best.final_residual_norm) + ")",
                            best);
  }
  throw ProjectionFailure("newton projection " + run.failure, best);
}

ProjectionResult project(const Vector& v0, const ConstraintSet& cs, const Vector& u,
                         const ProjectionOptions& opts) {
  if (cs.empty()) return ProjectionResult{v0, 0, 0.0, Vector()};
  if (cs.linear_only()) {
    const LinearConstraint lc = cs.linear_part(u);
    return linear_project(v0, lc.A, lc.b);
  }
  return newton_project(v0, cs, u, opts);
}

Vector project_backward(const ProjectionResult& result, const ConstraintSet& cs, const Vector& u,
                        const Vector& v0, const Vector& upstream) {
  const Index n = cs.dim();
  if (upstream.size() != n || v0.size() != n) throw ShapeError("project_backward: dimension mismatch");
  if (cs.empty()) return upstream;
  if (cs.linear_only()) {
    const LinearFactor f = factor_linear(cs.linear_part(u).A);
    return upstream - f.Q * (f.Q.transpose() * upstream);
  }
  const Index m = cs.count();
  const Matrix K = kkt_matrix(cs, u, result.v_proj, result.multipliers, 0.0);
  Eigen::FullPivLU<Matrix> lu(K.transpose());
  if (nearly_singular(lu)) throw SingularityError("KKT matrix is singular at the projected point");
  Vector rhs = Vector::Zero(n + m);
  rhs.head(n) = upstream;
  return lu.solve(rhs).head(n);
}

}  // namespace pcml
