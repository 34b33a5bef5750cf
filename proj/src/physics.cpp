#include "pcml/physics.hpp"

#include <cmath>
#include <utility>

namespace pcml {

NonlinearResidual quadratic_residual(std::string name, Matrix Q, Vector q, double r) {
  if (Q.rows() != Q.cols() || Q.rows() != q.size()) {
    throw ShapeError("quadratic residual '" + name + "': Q and q dimensions disagree");
  }
  const Matrix Qs = 0.5 * (Q + Q.transpose());
  NonlinearResidual out;
  out.name = std::move(name);
  out.value = [Qs, q, r](const Vector&, const Vector& v) {
    return 0.5 * v.dot(Qs * v) + q.dot(v) + r;
  };
  out.gradient = [Qs, q](const Vector&, const Vector& v) -> Vector { return Qs * v + q; };
  out.hessian = [Qs](const Vector&, const Vector&) -> Matrix { return Qs; };
  return out;
}

NonlinearResidual circle_residual(double radius, Index n) {
  if (n < 2) throw ShapeError("circle residual needs at least two variables");
  Matrix Q = Matrix::Zero(n, n);
  Q(0, 0) = 2.0;
  Q(1, 1) = 2.0;
  return quadratic_residual("circle", Q, Vector::Zero(n), -radius * radius);
}

NonlinearResidual hyperbola_residual(double k, Index n) {
  if (n < 2) throw ShapeError("hyperbola residual needs at least two variables");
  Matrix Q = Matrix::Zero(n, n);
  Q(0, 1) = 1.0;
  Q(1, 0) = 1.0;
  return quadratic_residual("hyperbola", Q, Vector::Zero(n), -k);
}

void require_full_row_rank(const Matrix& A) {
  if (A.rows() == 0) return;
  Eigen::ColPivHouseholderQR<Matrix> qr(A.transpose());
  qr.setThreshold(1e-10);
  if (qr.rank() < A.rows()) {
    throw ValidationError("linear constraint matrix is rank deficient (rank " +
                          std::to_string(qr.rank()) + " < " + std::to_string(A.rows()) + " rows)");
  }
}

ConstraintSet::ConstraintSet(Index n) : n_(n) {
  if (n <= 0) throw ValidationError("constraint set needs a positive variable dimension");
}

ConstraintSet ConstraintSet::linear(Matrix A, Vector b) {
  if (A.rows() != b.size()) throw ShapeError("A and b row counts differ");
  ConstraintSet cs(A.cols());
  if (A.rows() >= A.cols()) {
    throw ValidationError("constraint set must be strictly under-determined (m < n)");
  }
  require_full_row_rank(A);
  cs.m_linear_ = A.rows();
  cs.constant_ = LinearConstraint{std::move(A), std::move(b)};
  return cs;
}

ConstraintSet ConstraintSet::input_linear(Index n, Index m, LinearBuilder builder) {
  ConstraintSet cs(n);
  if (m <= 0 || m >= n) {
    throw ValidationError("constraint set must be strictly under-determined (0 < m < n)");
  }
  cs.m_linear_ = m;
  cs.builder_ = std::move(builder);
  return cs;
}

ConstraintSet& ConstraintSet::add(NonlinearResidual r) {
  if (count() + 1 >= n_) {
    throw ValidationError("adding residual '" + r.name +
                          "' would leave the constraint set fully determined");
  }
  nonlinear_.push_back(std::move(r));
  return *this;
}

LinearConstraint ConstraintSet::linear_part(const Vector& u) const {
  if (m_linear_ == 0) throw ValidationError("constraint set has no linear block");
  if (constant_) return *constant_;
  LinearConstraint lc = builder_(u);
  if (lc.A.rows() != m_linear_ || lc.A.cols() != n_ || lc.b.size() != m_linear_) {
    throw ShapeError("input-dependent linear block has the wrong shape");
  }
  require_full_row_rank(lc.A);
  return lc;
}

namespace {

void check_dim(const ConstraintSet& cs, const Vector& v) {
  if (v.size() != cs.dim()) {
    throw ShapeError("constrained variable has dimension " + std::to_string(v.size()) +
                     ", constraint set expects " + std::to_string(cs.dim()));
  }
}

}  // namespace

Vector residual(const ConstraintSet& cs, const Vector& u, const Vector& v) {
  check_dim(cs, v);
  Vector r(cs.count());
  Index row = 0;
  if (cs.linear_count() > 0) {
    const LinearConstraint lc = cs.linear_part(u);
    r.head(lc.A.rows()) = lc.A * v - lc.b;
    row = lc.A.rows();
  }
  for (const auto& c : cs.nonlinear()) r(row++) = c.value(u, v);
  return r;
}

Matrix residual_jacobian(const ConstraintSet& cs, const Vector& u, const Vector& v) {
  check_dim(cs, v);
  Matrix J(cs.count(), cs.dim());
  Index row = 0;
  if (cs.linear_count() > 0) {
    const LinearConstraint lc = cs.linear_part(u);
    J.topRows(lc.A.rows()) = lc.A;
    row = lc.A.rows();
  }
  for (const auto& c : cs.nonlinear()) J.row(row++) = c.gradient(u, v).transpose();
  return J;
}

std::vector<Matrix> residual_hessians(const ConstraintSet& cs, const Vector& u, const Vector& v) {
  check_dim(cs, v);
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(cs.count()));
  for (Index k = 0; k < cs.linear_count(); ++k) out.push_back(Matrix::Zero(cs.dim(), cs.dim()));
  for (const auto& c : cs.nonlinear()) out.push_back(c.hessian(u, v));
  return out;
}

Index observation_count(const ODESystem& sys, const IntegratorConfig& cfg) {
  if (!(cfg.step > 0.0) || cfg.steps_per_observation < 1) {
    throw ValidationError("integrator needs step > 0 and at least one step per observation");
  }
  const double span = sys.tf - sys.t0;
  if (!(span >= 0.0)) throw ValidationError("time horizon must satisfy tf >= t0");
  const double interval = cfg.observation_interval();
  const double k = std::round(span / interval);
  if (std::abs(k * interval - span) > 1e-9 * std::max(1.0, std::abs(span))) {
    throw ValidationError("observation interval does not divide the time horizon");
  }
  return static_cast<Index>(k);
}

std::vector<ad::Node> integrate(ad::ExprGraph& g, const RhsBuilder& rhs, ad::Node x0, double t0,
                                const IntegratorConfig& cfg, Index intervals,
                                std::span<const ad::Node> params) {
  const double h = cfg.step;
  std::vector<ad::Node> states;
  states.reserve(static_cast<std::size_t>(intervals + 1));
  states.push_back(x0);
  ad::Node x = x0;
  long step_index = 0;
  for (Index obs = 0; obs < intervals; ++obs) {
    for (int s = 0; s < cfg.steps_per_observation; ++s, ++step_index) {
      const double t = t0 + static_cast<double>(step_index) * h;
      try {
        const ad::Node k1 = rhs(g, t, x, params);
        const ad::Node k2 = rhs(g, t + 0.5 * h, g.add(x, g.scale(k1, 0.5 * h)), params);
        const ad::Node k3 = rhs(g, t + 0.5 * h, g.add(x, g.scale(k2, 0.5 * h)), params);
        const ad::Node k4 = rhs(g, t + h, g.add(x, g.scale(k3, h)), params);
        const ad::Node incr =
            g.add(g.add(k1, g.scale(k2, 2.0)), g.add(g.scale(k3, 2.0), k4));
        x = g.add(x, g.scale(incr, h / 6.0));
      } catch (const NumericError& e) {
        throw BlowUpError("state became non-finite at t = " + std::to_string(t) + ": " + e.what(),
                          t);
      }
    }
    states.push_back(x);
  }
  return states;
}

Matrix integrate(const ODESystem& sys, const IntegratorConfig& cfg, std::span<const Matrix> params) {
  const Index intervals = observation_count(sys, cfg);
  if (sys.x0.size() != sys.dim) throw ShapeError("initial state does not match system dimension");
  ad::ExprGraph g;
  std::vector<ad::Node> p;
  p.reserve(params.size());
  for (const Matrix& m : params) p.push_back(g.constant(m));
  const ad::Node x0 = g.constant(sys.x0);
  const auto states = integrate(g, sys.rhs, x0, sys.t0, cfg, intervals, p);
  Matrix traj(static_cast<Index>(states.size()), sys.dim);
  for (std::size_t i = 0; i < states.size(); ++i) {
    traj.row(static_cast<Index>(i)) = g.value(states[i]).col(0).transpose();
  }
  return traj;
}

Vector observation_times(const ODESystem& sys, const IntegratorConfig& cfg) {
  const Index intervals = observation_count(sys, cfg);
  Vector t(intervals + 1);
  for (Index k = 0; k <= intervals; ++k) {
    t(k) = sys.t0 + static_cast<double>(k * cfg.steps_per_observation) * cfg.step;
  }
  return t;
}

ConstraintSet make_species_balance(const Stoichiometry& stoich) {
  if (stoich.nu.rows() != stoich.initial.size()) {
    throw ShapeError("stoichiometry rows must match the number of species");
  }
  const Vector net = stoich.nu.colwise().sum().transpose();
  for (Index r = 0; r < net.size(); ++r) {
    if (std::abs(net(r)) > 1e-12) {
      throw ValidationError("reaction " + std::to_string(r) + " does not conserve total moles");
    }
  }
  const Index n = stoich.initial.size();
  return ConstraintSet::linear(Matrix::Ones(1, n), Vector::Constant(1, stoich.initial.sum()));
}

}  // namespace pcml
