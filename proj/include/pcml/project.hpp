#pragma once

#include "pcml/physics.hpp"

namespace pcml {

/// Outcome of projecting a point onto a constraint manifold.
///
/// Multipliers follow the convention v_proj - v0 = J(v_proj)' * multipliers.
struct ProjectionResult {
  Vector v_proj;
  int iterations = 0;
  double final_residual_norm = 0.0;
  Vector multipliers;
};

struct ProjectionOptions {
  double tol = 1e-10;
  int max_iters = 50;
  double backtrack_factor = 0.5;
  int max_backtracks = 30;
  double initial_shift = 1e-8;
  double max_shift = 1e-2;
};

/// Newton projection did not converge; carries the best iterate found.
class ProjectionFailure : public DivergenceError {
 public:
  ProjectionFailure(const std::string& what, ProjectionResult best)
      : DivergenceError(what, best.final_residual_norm), best_(std::move(best)) {}
  const ProjectionResult& best() const { return best_; }

 private:
  ProjectionResult best_;
};

/// Orthogonal projection of v onto {x : A x = b}. Exact in one step.
ProjectionResult linear_project(const Vector& v, const Matrix& A, const Vector& b);

/// I - A'(AA')^{-1} A.
Matrix linear_projector(const Matrix& A);

/// Euclidean projection of v0 onto {v : residual(cs, u, v) = 0} by Newton's
/// method on the KKT system, globalized with a backtracking line search on
/// the KKT residual and a Levenberg-style shift when the KKT matrix is
/// near-singular.
ProjectionResult newton_project(const Vector& v0, const ConstraintSet& cs, const Vector& u,
                                const ProjectionOptions& opts = {});

/// Linear projection for purely linear sets, Newton projection otherwise.
/// An empty set returns v0 unchanged.
ProjectionResult project(const Vector& v0, const ConstraintSet& cs, const Vector& u,
                         const ProjectionOptions& opts = {});

/// Vector-Jacobian product of the projection map at a converged result:
/// returns (d v_proj / d v0)' * upstream, via one transposed KKT solve.
Vector project_backward(const ProjectionResult& result, const ConstraintSet& cs, const Vector& u,
                        const Vector& v0, const Vector& upstream);

}  // namespace pcml
