#include <chrono>
#include <cmath>
#include <limits>

#include "pcml/train.hpp"

namespace pcml {

// Per-sample variables x and constraints h(x):
//
//   bidirectional:  x = [z; w; (yhat; mu)],  h = [z - phi_ML([u; w]); w - phi_P(u, z); (p1; p2)]
//   otherwise:      x = [yhat; mu],          h = [p1; p2]
//
// with p1 = yhat - s - J(yhat)' mu and p2 = c(u, yhat), where s is w or the raw
// model output r(theta). p1 = p2 = 0 are the optimality conditions of projecting
// s onto the constraint set, so at feasibility yhat is exactly the projected
// prediction. Without constraints (bidirectional only) yhat is w itself.
struct AugmentedLagrangian::Impl {
  const Model& model;
  const Dataset& data;
  const ConstraintSet& cs;
  TrainConfig cfg;
  const PCMLModel* bidir = nullptr;

  Index ny = 0, nz = 0, nc = 0;
  Index off_w = 0, off_y = 0, off_mu = 0, nx = 0;
  Index h_coupling = 0, h_rows = 0;

  std::vector<Vector> x, h, kappa;
  bool initialized = false;

  Impl(const Model& m, const Dataset& d, const ConstraintSet& c, const TrainConfig& config)
      : model(m), data(d), cs(c), cfg(config) {
    data.validate();
    ny = model.output_dim();
    if (data.y.cols() != ny) throw ShapeError("dataset outputs do not match the model output dimension");
    if (cs.dim() != ny) throw ShapeError("simultaneous training constrains the model outputs");
    if (cfg.target != ProjectionTarget::output) {
      throw ValidationError("simultaneous training supports the output target only");
    }
    nc = cs.count();
    if (const auto* p = dynamic_cast<const PCMLModel*>(&model); p && p->topology() == Topology::bidirectional) {
      bidir = p;
      nz = p->physics().latent_dim;
    }
    if (!bidir && nc == 0) throw ValidationError("augmented Lagrangian needs at least one constraint");
    off_w = nz;
    if (bidir) {
      h_coupling = nz + ny;
      off_y = nc > 0 ? nz + ny : off_w;
    }
    off_mu = off_y + ny;
    nx = nc > 0 ? off_mu + nc : nz + ny;
    h_rows = h_coupling + (nc > 0 ? ny + nc : 0);
    const auto N = static_cast<std::size_t>(data.size());
    x.assign(N, Vector());
    h.assign(N, Vector::Zero(h_rows));
    kappa.assign(N, Vector::Zero(h_rows));
  }

  struct LocalEval {
    Vector h;
    Matrix Jh;
    Vector c;
    Matrix Jc;
    double f = 0.0;
  };

  // Coupling residual graph for one sample with z and w as leaves.
  struct Coupling {
    ad::ExprGraph g;
    std::vector<ad::Node> params;
    ad::Node z, w, e1, e2;
  };

  void init_local(Index i, const Vector& source, const Vector* zw) {
    Vector xi = Vector::Zero(nx);
    const Vector u = data.u.row(i).transpose();
    if (zw) xi.head(nz + ny) = *zw;
    if (nc > 0) {
      xi.segment(off_y, ny) = source;
      try {
        const ProjectionResult p = project(source, cs, u, cfg.projection);
        xi.segment(off_y, ny) = p.v_proj;
        if (p.multipliers.size() == nc) xi.segment(off_mu, nc) = p.multipliers;
      } catch (const Error&) {
        // Start from the unprojected point; the local solve handles the rest.
      }
    }
    x[static_cast<std::size_t>(i)] = std::move(xi);
  }

  LocalEval local_eval(Index i, const Vector& xi, const Vector* r, Coupling* cp, double rho) const {
    LocalEval e;
    e.h.resize(h_rows);
    e.Jh = Matrix::Zero(h_rows, nx);
    const Vector u = data.u.row(i).transpose();
    const Vector yhat = xi.segment(off_y, ny);
    if (cp) {
      cp->g.set_leaf(cp->z, xi.head(nz));
      cp->g.set_leaf(cp->w, xi.segment(off_w, ny));
      cp->g.forward_eval();
      e.h.head(nz) = cp->g.value(cp->e1).col(0);
      e.h.segment(nz, ny) = cp->g.value(cp->e2).col(0);
      for (Index k = 0; k < nz + ny; ++k) {
        const bool first = k < nz;
        const Index row = first ? k : k - nz;
        const ad::Node node = first ? cp->e1 : cp->e2;
        const ad::Gradient gr = cp->g.backward(node, Vector::Unit(first ? nz : ny, row));
        e.Jh.block(k, 0, 1, nz) = gr[cp->z].transpose();
        e.Jh.block(k, off_w, 1, ny) = gr[cp->w].transpose();
      }
    }
    if (nc > 0) {
      const Vector mu = xi.segment(off_mu, nc);
      e.c = residual(cs, u, yhat);
      e.Jc = residual_jacobian(cs, u, yhat);
      const Vector source = cp ? Vector(xi.segment(off_w, ny)) : *r;
      const Index p = h_coupling;
      e.h.segment(p, ny) = yhat - source - e.Jc.transpose() * mu;
      e.h.segment(p + ny, nc) = e.c;
      Matrix D = Matrix::Identity(ny, ny);
      if (!cs.nonlinear().empty()) {
        const auto H = residual_hessians(cs, u, yhat);
        for (Index j = 0; j < nc; ++j) D -= mu(j) * H[static_cast<std::size_t>(j)];
      }
      e.Jh.block(p, off_y, ny, ny) = D;
      e.Jh.block(p, off_mu, ny, nc) = -e.Jc.transpose();
      if (cp) e.Jh.block(p, off_w, ny, ny) -= Matrix::Identity(ny, ny);
      e.Jh.block(p + ny, off_y, nc, ny) = e.Jc;
    }
    const Vector& k = kappa[static_cast<std::size_t>(i)];
    const double lp = nc > 0 ? e.c.squaredNorm() : 0.0;
    e.f = cfg.lambda_d * (yhat - data.y.row(i).transpose()).squaredNorm() + cfg.lambda_p * lp +
          k.dot(e.h) + 0.5 * rho * e.h.squaredNorm();
    return e;
  }

  // Levenberg-Marquardt on the local augmented-Lagrangian function, written as
  // a sum of squares |R|^2 - |kappa|^2 / (2 rho).
  LocalEval solve_local(Index i, const Vector* r, Coupling* cp, double rho) {
    Vector& xi = x[static_cast<std::size_t>(i)];
    const Vector& k = kappa[static_cast<std::size_t>(i)];
    const Vector y = data.y.row(i).transpose();
    const double sd = std::sqrt(cfg.lambda_d), sp = std::sqrt(cfg.lambda_p), sr = std::sqrt(0.5 * rho);
    const Index nR = ny + nc + h_rows;
    LocalEval cur = local_eval(i, xi, r, cp, rho);
    double nu = 0.0;
    for (int it = 0; it < 100; ++it) {
      Vector R = Vector::Zero(nR);
      Matrix JR = Matrix::Zero(nR, nx);
      R.head(ny) = sd * (xi.segment(off_y, ny) - y);
      JR.block(0, off_y, ny, ny) = sd * Matrix::Identity(ny, ny);
      if (nc > 0) {
        R.segment(ny, nc) = sp * cur.c;
        JR.block(ny, off_y, nc, ny) = sp * cur.Jc;
      }
      R.tail(h_rows) = sr * (cur.h + k / rho);
      JR.bottomRows(h_rows) = sr * cur.Jh;
      const Vector g = JR.transpose() * R;
      const Matrix A = JR.transpose() * JR;
      const double scale = std::max(1.0, A.diagonal().maxCoeff());
      bool accepted = false;
      bool tiny = false;
      for (int attempt = 0; attempt < 40; ++attempt) {
        const Matrix M = A + (nu * scale) * Matrix::Identity(nx, nx);
        const Eigen::LDLT<Matrix> ldlt(M);
        const Vector d = -ldlt.solve(g);
        if (ldlt.info() == Eigen::Success && d.allFinite()) {
          if (d.lpNorm<Eigen::Infinity>() <= 1e-14 * (1.0 + xi.lpNorm<Eigen::Infinity>())) {
            tiny = true;
            break;
          }
          const Vector x_try = xi + d;
          LocalEval trial = local_eval(i, x_try, r, cp, rho);
          if (std::isfinite(trial.f) && trial.f < cur.f) {
            xi = x_try;
            cur = std::move(trial);
            nu = nu > 1e-12 ? nu / 10.0 : 0.0;
            accepted = true;
            break;
          }
        }
        nu = nu == 0.0 ? 1e-12 : nu * 10.0;
      }
      if (tiny || !accepted) break;
    }
    if (cp) {
      // Leave the coupling graph evaluated at the final point for the backward pass.
      local_eval(i, xi, r, cp, rho);
    }
    return cur;
  }

  std::unique_ptr<Coupling> make_coupling(Index i, const ParameterVector& theta) const {
    auto cp = std::make_unique<Coupling>();
    cp->params = model.bind(cp->g, theta);
    const ad::Node u = cp->g.constant(data.u.row(i).transpose());
    cp->z = cp->g.leaf(Vector::Zero(nz), "z");
    cp->w = cp->g.leaf(Vector::Zero(ny), "w");
    std::tie(cp->e1, cp->e2) = bidir->coupling_residual(cp->g, cp->params, u, cp->z, cp->w);
    return cp;
  }

  Objective evaluate(const ParameterVector& theta, double rho, bool with_gradient) {
    const Index N = data.size();
    const auto n = static_cast<std::size_t>(N);
    std::vector<LocalEval> evals(n);
    std::vector<Vector> grads(with_gradient ? n : 0);
    Objective obj;
    if (!bidir) {
      Predictor raw;
      raw.model = &model;
      const ForwardPass fp(raw, data.u, theta);
      const Matrix& R = fp.raw();
      Matrix seeds = Matrix::Zero(N, ny);
      for_each_index(n, Execution::parallel, [&](std::size_t k) {
        const auto i = static_cast<Index>(k);
        const Vector r = R.row(i).transpose();
        if (!initialized) init_local(i, r, nullptr);
        evals[k] = solve_local(i, &r, nullptr, rho);
        const Vector p1 = evals[k].h.head(ny);
        seeds.row(i) = -(kappa[k].head(ny) + rho * p1).transpose();
      });
      if (with_gradient) obj.gradient = fp.pullback(seeds, Matrix());
    } else {
      std::vector<Matrix> tensors;
      if (!initialized) tensors = unflatten(theta);
      for_each_index(n, Execution::parallel, [&](std::size_t k) {
        const auto i = static_cast<Index>(k);
        auto cp = make_coupling(i, theta);
        if (!initialized) {
          Vector zw = Vector::Zero(nz + ny);
          try {
            const ForwardResult fr = bidir->solve_fixed_point(data.u.row(i).transpose(), tensors);
            zw << fr.z, fr.y_hat;
          } catch (const DivergenceError&) {
            // No fixed point at the starting parameters; the coupling constraints take over.
          }
          init_local(i, zw.tail(ny), &zw);
        }
        evals[k] = solve_local(i, nullptr, cp.get(), rho);
        if (with_gradient) {
          const Vector& hk = evals[k].h;
          const Vector s = kappa[k].head(h_coupling) + rho * hk.head(h_coupling);
          const ad::Seed seeds[] = {{cp->e1, s.head(nz)}, {cp->e2, s.segment(nz, ny)}};
          const ad::Gradient gr = cp->g.backward(seeds);
          Vector gv(theta.size());
          const auto& slices = theta.layout->slices();
          for (std::size_t j = 0; j < cp->params.size(); ++j) {
            gv.segment(slices[j].offset, slices[j].size()) = gr[cp->params[j]].reshaped();
          }
          grads[k] = std::move(gv);
        }
      });
      if (with_gradient) {
        obj.gradient = Vector::Zero(theta.size());
        for (const Vector& g : grads) obj.gradient += g;
      }
    }
    initialized = true;
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = static_cast<Index>(k);
      h[k] = evals[k].h;
      obj.value += evals[k].f;
      obj.loss.data += (x[k].segment(off_y, ny) - data.y.row(i).transpose()).squaredNorm();
      if (nc > 0) obj.loss.physics += evals[k].c.squaredNorm();
      obj.loss.max_violation = std::max(obj.loss.max_violation, h[k].lpNorm<Eigen::Infinity>());
    }
    obj.loss.total = cfg.lambda_d * obj.loss.data + cfg.lambda_p * obj.loss.physics;
    return obj;
  }
};

AugmentedLagrangian::AugmentedLagrangian(const Model& model, const Dataset& data,
                                         const ConstraintSet& cs, const TrainConfig& cfg)
    : impl_(std::make_unique<Impl>(model, data, cs, cfg)), rho_(cfg.al.initial_penalty) {}

AugmentedLagrangian::~AugmentedLagrangian() = default;

Objective AugmentedLagrangian::evaluate(const ParameterVector& theta, bool with_gradient) {
  Objective obj = impl_->evaluate(theta, rho_, with_gradient);
  violation_ = obj.loss.max_violation;
  return obj;
}

void AugmentedLagrangian::update_multipliers() {
  for (std::size_t k = 0; k < impl_->kappa.size(); ++k) impl_->kappa[k] += rho_ * impl_->h[k];
}

Matrix AugmentedLagrangian::predictions() const {
  Matrix Y(impl_->data.size(), impl_->ny);
  for (std::size_t k = 0; k < impl_->x.size(); ++k) {
    if (impl_->x[k].size() == 0) throw ValidationError("augmented Lagrangian has not been evaluated");
    Y.row(static_cast<Index>(k)) = impl_->x[k].segment(impl_->off_y, impl_->ny).transpose();
  }
  return Y;
}

Index AugmentedLagrangian::constraint_rows() const { return impl_->h_rows; }

TrainReport train_hard_simultaneous(const Model& model, const Dataset& data, const ConstraintSet& cs,
                                    const TrainConfig& cfg, const ParameterVector* init) {
  cfg.validate();
  if (cfg.mode != TrainMode::hard_simultaneous) {
    throw ValidationError("mode is " + std::string(to_string(cfg.mode)) + ", expected hard_simultaneous");
  }
  const auto* pcml = dynamic_cast<const PCMLModel*>(&model);
  const bool bidirectional = pcml && pcml->topology() == Topology::bidirectional;
  if (cs.empty() && !bidirectional) {
    // Nothing to enforce: plain data fitting.
    TrainConfig soft = cfg;
    soft.mode = TrainMode::soft;
    soft.lambda_p = 0.0;
    return train_soft(model, data, cs, soft, init);
  }

  const auto t0 = std::chrono::steady_clock::now();
  AugmentedLagrangian al(model, data, cs, cfg);
  TrainReport report;
  report.theta = init ? ParameterVector{model.layout_ptr(), init->values} : model.init_parameters(cfg.seed);
  if (report.theta.values.size() != model.layout().size()) {
    throw ShapeError("initial parameters do not match the model layout");
  }
  OptimizerState adam = make_adam(report.theta.size(), cfg.learning_rate, model.trainable_mask());
  report.termination = "al_max_outer";
  int epoch = 0;
  std::vector<double> violations;
  for (int outer = 0; outer < cfg.al.outer_iters; ++outer) {
    const int start = epoch;
    double previous = std::numeric_limits<double>::quiet_NaN();
    for (int inner = 0; inner < cfg.al.inner_epochs && epoch < cfg.max_epochs; ++inner, ++epoch) {
      Objective obj;
      try {
        obj = al.evaluate(report.theta);
      } catch (const Error& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what(),
                            std::numeric_limits<double>::infinity(), epoch, -1);
      }
      if (!std::isfinite(obj.value) || !obj.gradient.allFinite()) {
        throw TrainingError("non-finite augmented Lagrangian at epoch " + std::to_string(epoch),
                            obj.value, epoch, -1);
      }
      report.history.push_back(
          {epoch, obj.loss.data, obj.loss.physics, obj.loss.total, obj.loss.max_violation});
      if (inner > 0 && std::abs(obj.value - previous) <= cfg.tol) {
        ++epoch;
        break;
      }
      previous = obj.value;
      report.theta.values = adam_step(adam, report.theta.values, obj.gradient);
    }
    al.evaluate(report.theta, false);
    const double v = al.violation();
    violations.push_back(v);
    report.outer.push_back({outer, al.penalty(), v, epoch - start});
    if (v <= cfg.al.tol) {
      report.termination = "converged";
      break;
    }
    if (outer >= 3 && v > 0.5 * violations[static_cast<std::size_t>(outer - 3)]) {
      report.termination = "stalled";
      break;
    }
    if (epoch >= cfg.max_epochs) {
      report.termination = "max_epochs";
      break;
    }
    al.update_multipliers();
    if (outer > 0 && v > cfg.al.required_shrink * violations[static_cast<std::size_t>(outer - 1)]) {
      al.set_penalty(std::min(al.penalty() * cfg.al.growth, cfg.al.max_penalty));
    }
  }
  report.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace pcml
