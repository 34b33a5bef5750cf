#include "pcml/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "rethrow.hpp"

namespace pcml {

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::soft: return "soft";
    case TrainMode::hard_sequential: return "hard_sequential";
    case TrainMode::hard_simultaneous: return "hard_simultaneous";
  }
  return "?";
}

TrainMode train_mode_from_string(std::string_view s) {
  if (s == "soft") return TrainMode::soft;
  if (s == "hard_sequential") return TrainMode::hard_sequential;
  if (s == "hard_simultaneous") return TrainMode::hard_simultaneous;
  throw ValidationError("unknown training mode '" + std::string(s) +
                        "' (expected soft, hard_sequential or hard_simultaneous)");
}

std::string_view to_string(ProjectionTarget target) {
  return target == ProjectionTarget::output ? "output" : "latent";
}

ProjectionTarget projection_target_from_string(std::string_view s) {
  if (s == "output") return ProjectionTarget::output;
  if (s == "latent") return ProjectionTarget::latent;
  throw ValidationError("unknown projection target '" + std::string(s) + "' (expected output or latent)");
}

namespace {

void require(bool ok, const std::string& field, const std::string& constraint) {
  if (!ok) throw ValidationError(field + " must be " + constraint);
}

}  // namespace

void TrainConfig::validate() const {
  require(lambda_d >= 0.0, "lambda_d", ">= 0");
  require(lambda_p >= 0.0, "lambda_p", ">= 0");
  require(lambda_d + lambda_p > 0.0, "lambda_d + lambda_p", "> 0");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate", "> 0");
  require(max_epochs >= 1, "max_epochs", ">= 1");
  require(tol > 0.0, "tol", "> 0");
  require(projection.tol > 0.0, "projection.tol", "> 0");
  require(projection.max_iters >= 1, "projection.max_iters", ">= 1");
  require(projection.backtrack_factor > 0.0 && projection.backtrack_factor < 1.0,
          "projection.backtrack_factor", "in (0, 1)");
  require(projection.max_backtracks >= 0, "projection.max_backtracks", ">= 0");
  require(projection.initial_shift > 0.0, "projection.initial_shift", "> 0");
  require(projection.max_shift >= projection.initial_shift, "projection.max_shift",
          ">= projection.initial_shift");
  require(al.initial_penalty > 0.0, "al.initial_penalty", "> 0");
  require(al.growth > 1.0, "al.growth", "> 1");
  require(al.required_shrink > 0.0 && al.required_shrink < 1.0, "al.required_shrink", "in (0, 1)");
  require(al.max_penalty >= al.initial_penalty, "al.max_penalty", ">= al.initial_penalty");
  require(al.outer_iters >= 1, "al.outer_iters", ">= 1");
  require(al.inner_epochs >= 1, "al.inner_epochs", ">= 1");
  require(al.tol > 0.0, "al.tol", "> 0");
}

OptimizerState make_adam(Index n, double learning_rate, std::vector<bool> mask) {
  if (!mask.empty() && static_cast<Index>(mask.size()) != n) {
    throw ShapeError("optimizer mask does not match the parameter count");
  }
  OptimizerState s;
  s.m = Vector::Zero(n);
  s.v = Vector::Zero(n);
  s.learning_rate = learning_rate;
  s.mask = std::move(mask);
  return s;
}

Vector adam_step(OptimizerState& s, const Vector& theta, const Vector& grad) {
  if (theta.size() != s.m.size() || grad.size() != s.m.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  Vector out = theta;
  for (Index k = 0; k < theta.size(); ++k) {
    if (!s.mask.empty() && !s.mask[static_cast<std::size_t>(k)]) continue;
    s.m(k) = s.beta1 * s.m(k) + (1.0 - s.beta1) * grad(k);
    s.v(k) = s.beta2 * s.v(k) + (1.0 - s.beta2) * grad(k) * grad(k);
    const double mhat = s.m(k) / c1;
    const double vhat = s.v(k) / c2;
    out(k) = theta(k) - s.learning_rate * mhat / (std::sqrt(vhat) + s.eps);
  }
  return out;
}

Index Predictor::constrained_dim() const {
  return target == ProjectionTarget::output ? model->output_dim() : model->latent_dim();
}

void Predictor::validate() const {
  if (!model) throw ValidationError("predictor has no model");
  if (constraints && constraints->dim() != constrained_dim()) {
    throw ShapeError("constraint set acts on " + std::to_string(constraints->dim()) +
                     " variables but the " + std::string(to_string(target)) + " has dimension " +
                     std::to_string(constrained_dim()));
  }
  if (project && !constraints) throw ValidationError("projection requested without a constraint set");
  if (target == ProjectionTarget::latent) {
    const auto* pcml = dynamic_cast<const PCMLModel*>(model);
    if (!pcml || pcml->topology() != Topology::ml_to_p) {
      throw ValidationError("latent constraints require an MLtoP model");
    }
  }
}

Predictor make_predictor(const Model& model, const ConstraintSet& cs, const TrainConfig& cfg) {
  Predictor p;
  p.model = &model;
  p.constraints = &cs;
  p.project = cfg.mode != TrainMode::soft && !cs.empty();
  p.target = cfg.target;
  p.options = cfg.projection;
  return p;
}

struct ForwardPass::Chunk {
  Index first = 0;
  Index rows = 0;
  ad::ExprGraph graph;
  std::vector<ad::Node> params;
  BuildOutput built;
  std::vector<ProjectionResult> projections;
};

ForwardPass::~ForwardPass() = default;

ForwardPass::ForwardPass(const Predictor& predictor, const Matrix& U, const ParameterVector& theta,
                         Execution exec)
    : predictor_(predictor), target_(predictor.target), U_(U), layout_(theta.layout), exec_(exec) {
  predictor_.validate();
  const Model& model = *predictor_.model;
  if (U_.rows() < 1) throw ValidationError("forward pass needs at least one input row");
  if (U_.cols() != model.input_dim()) {
    throw ShapeError("inputs have " + std::to_string(U_.cols()) + " columns, model expects " +
                     std::to_string(model.input_dim()));
  }
  const Index N = U_.rows();
  const bool independent = model.rows_independent();
  const std::size_t n_chunks = independent ? static_cast<std::size_t>(N) : 1;
  chunks_.resize(n_chunks);
  outputs_.resize(N, model.output_dim());
  raw_.resize(N, model.output_dim());
  latents_.resize(N, target_ == ProjectionTarget::latent ? model.latent_dim() : 0);

  const bool project_outputs =
      predictor_.project && predictor_.constraints && target_ == ProjectionTarget::output;
  LatentProjection latent;
  latent.constraints = predictor_.constraints;
  latent.options = predictor_.options;
  latent.project = predictor_.project;
  const LatentProjection* latent_ptr = target_ == ProjectionTarget::latent ? &latent : nullptr;

  for_each_index(n_chunks, exec_, [&](std::size_t k) {
    auto c = std::make_unique<Chunk>();
    c->first = independent ? static_cast<Index>(k) : 0;
    c->rows = independent ? 1 : N;
    try {
      c->params = model.bind(c->graph, theta);
      c->built = model.build(c->graph, c->params, U_.middleRows(c->first, c->rows), latent_ptr);
    } catch (const TrainingError&) {
      throw;
    } catch (const DivergenceError& e) {
      if (!independent) throw;
      throw TrainingError("sample " + std::to_string(c->first) + ": " + e.what(), e.residual(), -1,
                          c->first);
    } catch (const Error&) {
      if (!independent) throw;
      detail::rethrow_with_prefix("sample " + std::to_string(c->first) + ": ");
    }
    for (Index r = 0; r < c->rows; ++r) {
      const Index i = c->first + r;
      const Vector& y = c->built.values[static_cast<std::size_t>(r)];
      raw_.row(i) = y.transpose();
      if (latents_.cols() > 0) latents_.row(i) = c->built.latents[static_cast<std::size_t>(r)].transpose();
      if (project_outputs) {
        try {
          c->projections.push_back(project(y, *predictor_.constraints, U_.row(i).transpose(),
                                           predictor_.options));
        } catch (const DivergenceError& e) {
          throw TrainingError("sample " + std::to_string(i) + ": " + e.what(), e.residual(), -1, i);
        }
        outputs_.row(i) = c->projections.back().v_proj.transpose();
      } else {
        outputs_.row(i) = y.transpose();
      }
    }
    chunks_[k] = std::move(c);
  });
}

namespace {

Vector gather(const ParameterLayout& layout, const std::vector<ad::Node>& params,
              const ad::Gradient& g) {
  Vector out(layout.size());
  for (std::size_t j = 0; j < params.size(); ++j) {
    const ParamSlice& s = layout.slices()[j];
    out.segment(s.offset, s.size()) = g[params[j]].reshaped();
  }
  return out;
}

}  // namespace

Vector ForwardPass::pullback(const Matrix& d_outputs, const Matrix& d_constrained) const {
  const Index N = U_.rows();
  const bool has_out = d_outputs.size() > 0;
  const bool has_con = d_constrained.size() > 0;
  if (has_out && (d_outputs.rows() != N || d_outputs.cols() != outputs_.cols())) {
    throw ShapeError("pullback: output cotangent has the wrong shape");
  }
  if (has_con && (d_constrained.rows() != N || d_constrained.cols() != constrained().cols())) {
    throw ShapeError("pullback: constrained cotangent has the wrong shape");
  }
  const ConstraintSet* cs = predictor_.constraints;
  std::vector<Vector> parts(chunks_.size());
  for_each_index(chunks_.size(), exec_, [&](std::size_t k) {
    const Chunk& c = *chunks_[k];
    std::vector<ad::Seed> seeds;
    for (Index r = 0; r < c.rows; ++r) {
      const Index i = c.first + r;
      const auto rr = static_cast<std::size_t>(r);
      Vector s = has_out ? Vector(d_outputs.row(i).transpose()) : Vector::Zero(outputs_.cols());
      if (target_ == ProjectionTarget::output) {
        if (has_con) s += d_constrained.row(i).transpose();
        if (!c.projections.empty()) {
          s = project_backward(c.projections[rr], *cs, U_.row(i).transpose(),
                               c.built.values[rr], s);
        }
      } else if (has_con) {
        seeds.push_back(ad::Seed{c.built.bridges[rr].projected, d_constrained.row(i).transpose()});
      }
      if (!c.built.cotangent_maps.empty()) s = c.built.cotangent_maps[rr].transpose() * s;
      seeds.push_back(ad::Seed{c.built.nodes[rr], std::move(s)});
    }
    const ad::Gradient g = c.graph.backward(seeds);
    Vector part = gather(*layout_, c.params, g);
    if (!c.built.bridges.empty()) {
      std::vector<ad::Seed> second;
      for (const LatentBridge& b : c.built.bridges) {
        Vector gz = g[b.projected].col(0);
        if (predictor_.project && cs) {
          gz = project_backward(b.result, *cs, U_.row(c.first + b.row).transpose(), b.raw, gz);
        }
        second.push_back(ad::Seed{b.source, std::move(gz)});
      }
      part += gather(*layout_, c.params, c.graph.backward(second));
    }
    parts[k] = std::move(part);
  });
  Vector total = Vector::Zero(layout_->size());
  for (const Vector& p : parts) total += p;
  return total;
}

double max_violation(const ConstraintSet& cs, const Matrix& U, const Matrix& V) {
  if (cs.empty()) return 0.0;
  double worst = 0.0;
  for (Index i = 0; i < V.rows(); ++i) {
    const Vector u = U.row(i).transpose();
    worst = std::max(worst, residual(cs, u, V.row(i).transpose()).lpNorm<Eigen::Infinity>());
  }
  return worst;
}

Objective evaluate_objective(const Predictor& predictor, const Dataset& data, double lambda_d,
                             double lambda_p, const ParameterVector& theta, bool with_gradient,
                             Execution exec) {
  data.validate();
  if (data.y.cols() != predictor.model->output_dim()) {
    throw ShapeError("dataset outputs have " + std::to_string(data.y.cols()) +
                     " columns, model predicts " + std::to_string(predictor.model->output_dim()));
  }
  const ForwardPass fp(predictor, data.u, theta, exec);
  const Matrix diff = fp.outputs() - data.y;
  Objective obj;
  obj.loss.data = diff.squaredNorm();
  const ConstraintSet* cs = predictor.constraints;
  const bool physics = cs && !cs->empty();
  Matrix d_con;
  if (physics) {
    const Matrix& V = fp.constrained();
    if (with_gradient) d_con = Matrix::Zero(V.rows(), V.cols());
    for (Index i = 0; i < V.rows(); ++i) {
      const Vector u = data.u.row(i).transpose();
      const Vector v = V.row(i).transpose();
      const Vector r = residual(*cs, u, v);
      obj.loss.physics += r.squaredNorm();
      obj.loss.max_violation = std::max(obj.loss.max_violation, r.lpNorm<Eigen::Infinity>());
      if (with_gradient && lambda_p != 0.0) {
        d_con.row(i) = (2.0 * lambda_p) * (residual_jacobian(*cs, u, v).transpose() * r).transpose();
      }
    }
  }
  obj.loss.total = lambda_d * obj.loss.data + lambda_p * obj.loss.physics;
  obj.value = obj.loss.total;
  if (with_gradient) {
    const Matrix d_out = (2.0 * lambda_d) * diff;
    obj.gradient = fp.pullback(d_out, d_con);
  }
  return obj;
}

double data_loss(const Model& model, const Dataset& data, const ParameterVector& theta) {
  Predictor p;
  p.model = &model;
  return evaluate_objective(p, data, 1.0, 0.0, theta, false).loss.data;
}

double physics_loss(const Model& model, const Dataset& data, const ParameterVector& theta,
                    const ConstraintSet& cs) {
  Predictor p;
  p.model = &model;
  p.constraints = &cs;
  return evaluate_objective(p, data, 0.0, 1.0, theta, false).loss.physics;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_mode(const TrainConfig& cfg, TrainMode expected) {
  cfg.validate();
  if (cfg.mode != expected) {
    throw ValidationError("mode is " + std::string(to_string(cfg.mode)) + ", expected " +
                          std::string(to_string(expected)));
  }
}

ParameterVector starting_point(const Model& model, const TrainConfig& cfg, const ParameterVector* init) {
  if (!init) return model.init_parameters(cfg.seed);
  if (init->values.size() != model.layout().size()) {
    throw ShapeError("initial parameters do not match the model layout");
  }
  return ParameterVector{model.layout_ptr(), init->values};
}

// Full-batch Adam on a predictor's weighted loss.
TrainReport run_adam(const Predictor& predictor, const Dataset& data, const TrainConfig& cfg,
                     const ParameterVector* init) {
  const auto t0 = std::chrono::steady_clock::now();
  const Model& model = *predictor.model;
  TrainReport report;
  report.theta = starting_point(model, cfg, init);
  OptimizerState adam = make_adam(report.theta.size(), cfg.learning_rate, model.trainable_mask());
  report.termination = "max_epochs";
  double previous = std::numeric_limits<double>::quiet_NaN();
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Objective obj;
    try {
      obj = evaluate_objective(predictor, data, cfg.lambda_d, cfg.lambda_p, report.theta);
    } catch (const TrainingError& e) {
      throw TrainingError("epoch " + std::to_string(epoch) + ", " + e.what(), e.residual(), epoch,
                          e.sample());
    } catch (const NumericError& e) {
      throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what(),
                          std::numeric_limits<double>::infinity(), epoch, -1);
    } catch (const BlowUpError& e) {
      throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what(),
                          std::numeric_limits<double>::infinity(), epoch, -1);
    }
    if (!std::isfinite(obj.loss.total) || !obj.gradient.allFinite()) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch), obj.loss.total, epoch, -1);
    }
    report.history.push_back(
        {epoch, obj.loss.data, obj.loss.physics, obj.loss.total, obj.loss.max_violation});
    if (epoch > 0 && std::abs(obj.loss.total - previous) <= cfg.tol) {
      report.termination = "converged";
      break;
    }
    previous = obj.loss.total;
    report.theta.values = adam_step(adam, report.theta.values, obj.gradient);
  }
  report.wall_time = seconds_since(t0);
  return report;
}

}  // namespace

TrainReport train_soft(const Model& model, const Dataset& data, const ConstraintSet& cs,
                       const TrainConfig& cfg, const ParameterVector* init) {
  check_mode(cfg, TrainMode::soft);
  return run_adam(make_predictor(model, cs, cfg), data, cfg, init);
}

TrainReport train_hard_sequential(const Model& model, const Dataset& data, const ConstraintSet& cs,
                                  const TrainConfig& cfg, const ParameterVector* init) {
  check_mode(cfg, TrainMode::hard_sequential);
  if (const auto* pcml = dynamic_cast<const PCMLModel*>(&model)) {
    if (pcml->topology() != Topology::ml_to_p) {
      throw ValidationError("sequential projection requires the MLtoP topology");
    }
  }
  return run_adam(make_predictor(model, cs, cfg), data, cfg, init);
}

TrainReport train(const Model& model, const Dataset& data, const ConstraintSet& cs,
                  const TrainConfig& cfg, const ParameterVector* init) {
  switch (cfg.mode) {
    case TrainMode::soft: return train_soft(model, data, cs, cfg, init);
    case TrainMode::hard_sequential: return train_hard_sequential(model, data, cs, cfg, init);
    case TrainMode::hard_simultaneous: return train_hard_simultaneous(model, data, cs, cfg, init);
  }
  throw ValidationError("unknown training mode");
}

}  // namespace pcml
