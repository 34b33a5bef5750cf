#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcml/autodiff.hpp"

namespace pcml {

/// A x = b block of a constraint set.
struct LinearConstraint {
  Matrix A;
  Vector b;
};

/// Scalar equality residual c(u, v) = 0 with analytic first and second
/// derivatives with respect to v.
struct NonlinearResidual {
  std::string name;
  std::function<double(const Vector& u, const Vector& v)> value;
  std::function<Vector(const Vector& u, const Vector& v)> gradient;
  std::function<Matrix(const Vector& u, const Vector& v)> hessian;
};

/// Quadratic residual 0.5 v'Qv + q'v + r.
NonlinearResidual quadratic_residual(std::string name, Matrix Q, Vector q, double r);
/// v_1^2 + v_2^2 - radius^2 (first two coordinates).
NonlinearResidual circle_residual(double radius, Index n = 2);
/// v_1 * v_2 - k (first two coordinates).
NonlinearResidual hyperbola_residual(double k, Index n = 2);

/// Equalities defining the physics manifold over n constrained variables.
///
/// The linear block is either constant or rebuilt from the input u per sample.
/// Constant linear blocks are checked for full row rank at construction;
/// input-dependent ones when they are evaluated.
class ConstraintSet {
 public:
  using LinearBuilder = std::function<LinearConstraint(const Vector& u)>;

  /// No constraints over n variables.
  explicit ConstraintSet(Index n);

  static ConstraintSet linear(Matrix A, Vector b);
  static ConstraintSet input_linear(Index n, Index m, LinearBuilder builder);

  ConstraintSet& add(NonlinearResidual r);

  Index dim() const { return n_; }
  Index linear_count() const { return m_linear_; }
  Index count() const { return m_linear_ + static_cast<Index>(nonlinear_.size()); }
  bool empty() const { return count() == 0; }
  bool linear_only() const { return nonlinear_.empty() && m_linear_ > 0; }
  bool input_dependent() const { return static_cast<bool>(builder_); }

  /// Linear block for input u (validated). Requires linear_count() > 0.
  LinearConstraint linear_part(const Vector& u) const;
  const std::vector<NonlinearResidual>& nonlinear() const { return nonlinear_; }

 private:
  Index n_ = 0;
  Index m_linear_ = 0;
  std::optional<LinearConstraint> constant_;
  LinearBuilder builder_;
  std::vector<NonlinearResidual> nonlinear_;
};

/// Throws ValidationError unless A has full row rank (pivoted QR, tolerance 1e-10).
void require_full_row_rank(const Matrix& A);

/// Stacked [A v - b; c_1(u, v); ...].
Vector residual(const ConstraintSet& cs, const Vector& u, const Vector& v);
/// Stacked [A; grad c_1'; ...].
Matrix residual_jacobian(const ConstraintSet& cs, const Vector& u, const Vector& v);
/// Hessian of each residual row with respect to v (zero for linear rows).
std::vector<Matrix> residual_hessians(const ConstraintSet& cs, const Vector& u, const Vector& v);

/// Right-hand side f(t, x, params) assembled on an expression graph.
using RhsBuilder =
    std::function<ad::Node(ad::ExprGraph&, double t, ad::Node x, std::span<const ad::Node> params)>;

struct ODESystem {
  Index dim = 0;
  RhsBuilder rhs;
  Vector x0;
  double t0 = 0.0;
  double tf = 1.0;
};

/// Classic RK4 with step h; observations every `steps_per_observation` steps.
struct IntegratorConfig {
  double step = 0.01;
  int steps_per_observation = 1;

  double observation_interval() const { return step * steps_per_observation; }
};

/// Number of observation intervals covering [t0, tf]; throws unless the
/// interval divides the horizon.
Index observation_count(const ODESystem& sys, const IntegratorConfig& cfg);

/// RK4 on the graph from state x0 at t0 for `intervals` observation intervals.
/// Returns the state node at each observation time, x0 included.
std::vector<ad::Node> integrate(ad::ExprGraph& graph, const RhsBuilder& rhs, ad::Node x0, double t0,
                                const IntegratorConfig& cfg, Index intervals,
                                std::span<const ad::Node> params);

/// Trajectory at the observation times of [t0, tf]: one row per time.
Matrix integrate(const ODESystem& sys, const IntegratorConfig& cfg,
                 std::span<const Matrix> params = {});

/// Observation times matching integrate(sys, cfg).
Vector observation_times(const ODESystem& sys, const IntegratorConfig& cfg);

/// Species x reactions stoichiometric matrix with the initial concentrations.
struct Stoichiometry {
  Matrix nu;
  Vector initial;
};

/// Total-mole balance sum_i C_i = sum_i C_i(0). Requires every reaction to
/// conserve total moles.
ConstraintSet make_species_balance(const Stoichiometry& stoich);

}  // namespace pcml
