#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcml/model.hpp"

namespace pcml {

enum class TrainMode { soft, hard_sequential, hard_simultaneous };

std::string_view to_string(TrainMode mode);
TrainMode train_mode_from_string(std::string_view s);

/// Which model quantity the constraint set acts on.
enum class ProjectionTarget { output, latent };

std::string_view to_string(ProjectionTarget target);
ProjectionTarget projection_target_from_string(std::string_view s);

struct AugmentedLagrangianOptions {
  double initial_penalty = 10.0;
  double growth = 10.0;
  /// The penalty grows when an outer iteration shrinks the violation by less than this factor.
  double required_shrink = 0.25;
  double max_penalty = 1e8;
  int outer_iters = 20;
  int inner_epochs = 200;
  /// Target max per-sample constraint residual.
  double tol = 1e-6;
};

struct TrainConfig {
  TrainMode mode = TrainMode::soft;
  double lambda_d = 1.0;
  double lambda_p = 1.0;
  double learning_rate = 1e-2;
  int max_epochs = 1000;
  /// Stop when the total loss changes by at most this much between epochs.
  double tol = 1e-14;
  std::uint64_t seed = 0;
  ProjectionTarget target = ProjectionTarget::output;
  ProjectionOptions projection;
  AugmentedLagrangianOptions al;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

/// Adam moments and hyperparameters. Masked-out coordinates are never touched.
struct OptimizerState {
  Vector m;
  Vector v;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<bool> mask;
};

OptimizerState make_adam(Index n, double learning_rate, std::vector<bool> mask = {});
/// One bias-corrected Adam update; returns the new parameters.
Vector adam_step(OptimizerState& state, const Vector& theta, const Vector& grad);

struct EpochRecord {
  int epoch = 0;
  double data_loss = 0.0;
  double physics_loss = 0.0;
  double total_loss = 0.0;
  double max_violation = 0.0;
};

/// One augmented-Lagrangian outer iteration.
struct OuterRecord {
  int iteration = 0;
  double penalty = 0.0;
  double max_violation = 0.0;
  int epochs = 0;
};

struct TrainReport {
  std::vector<EpochRecord> history;
  std::vector<OuterRecord> outer;
  ParameterVector theta;
  double wall_time = 0.0;
  /// converged, max_epochs, stalled or al_max_outer.
  std::string termination;

  int epochs() const { return static_cast<int>(history.size()); }
};

/// Training stopped because an iterate became unusable. `sample` is -1 when
/// the failure is not tied to one data row.
class TrainingError : public DivergenceError {
 public:
  TrainingError(const std::string& what, double residual, int epoch, Index sample)
      : DivergenceError(what, residual), epoch_(epoch), sample_(sample) {}
  int epoch() const { return epoch_; }
  Index sample() const { return sample_; }

 private:
  int epoch_;
  Index sample_;
};

/// A model together with the constraint handling used when it predicts.
///
/// With `project` set, every prediction passes through the projection layer:
/// outputs are projected for ProjectionTarget::output, the ML -> P latent is
/// projected before the physics map for ProjectionTarget::latent.
struct Predictor {
  const Model* model = nullptr;
  const ConstraintSet* constraints = nullptr;
  bool project = false;
  ProjectionTarget target = ProjectionTarget::output;
  ProjectionOptions options;

  /// Dimension of the quantity the constraint set acts on.
  Index constrained_dim() const;
  void validate() const;
};

/// Predictor used by a training mode: soft keeps raw predictions, both hard
/// modes project.
Predictor make_predictor(const Model& model, const ConstraintSet& cs, const TrainConfig& cfg);

/// Predictions for a batch together with a vector-Jacobian product back to theta.
class ForwardPass {
 public:
  ForwardPass(const Predictor& predictor, const Matrix& U, const ParameterVector& theta,
              Execution exec = Execution::parallel);

  /// N x output dim, after the projection layer.
  const Matrix& outputs() const { return outputs_; }
  /// N x constrained dim: the outputs, or the (projected) latents for a latent target.
  const Matrix& constrained() const { return target_ == ProjectionTarget::output ? outputs_ : latents_; }
  /// N x output dim, before output projection.
  const Matrix& raw() const { return raw_; }

  /// Gradient over theta of sum_i d_out_i . outputs_i + d_con_i . constrained_i.
  /// Pass an empty matrix for d_constrained when it is zero.
  Vector pullback(const Matrix& d_outputs, const Matrix& d_constrained) const;

  ForwardPass(const ForwardPass&) = delete;
  ForwardPass& operator=(const ForwardPass&) = delete;
  ~ForwardPass();

 private:
  struct Chunk;
  Predictor predictor_;
  ProjectionTarget target_;
  Matrix U_;
  std::shared_ptr<const ParameterLayout> layout_;
  Execution exec_;
  std::vector<std::unique_ptr<Chunk>> chunks_;
  Matrix outputs_;
  Matrix latents_;
  Matrix raw_;
};

/// Sum of squared errors between observed and raw model outputs.
double data_loss(const Model& model, const Dataset& data, const ParameterVector& theta);
/// Sum over samples of the squared constraint residual of the raw model outputs.
double physics_loss(const Model& model, const Dataset& data, const ParameterVector& theta,
                    const ConstraintSet& cs);

struct LossBreakdown {
  double data = 0.0;
  double physics = 0.0;
  double total = 0.0;
  double max_violation = 0.0;
};

/// Weighted loss lambda_d * L_d + lambda_p * L_p of a predictor and its gradient.
/// The physics term is evaluated on the constrained quantity after the projection layer.
struct Objective {
  LossBreakdown loss;
  /// The differentiated function; equals loss.total except for the augmented Lagrangian.
  double value = 0.0;
  Vector gradient;
};

Objective evaluate_objective(const Predictor& predictor, const Dataset& data, double lambda_d,
                             double lambda_p, const ParameterVector& theta, bool with_gradient = true,
                             Execution exec = Execution::parallel);

/// Max over samples of the residual infinity norm of the constrained quantity.
double max_violation(const ConstraintSet& cs, const Matrix& U, const Matrix& V);

/// Adam on lambda_d * L_d + lambda_p * L_p with raw predictions.
TrainReport train_soft(const Model& model, const Dataset& data, const ConstraintSet& cs,
                       const TrainConfig& cfg, const ParameterVector* init = nullptr);

/// Adam on the same objective with every prediction projected onto the
/// constraint set; gradients flow through the projection.
TrainReport train_hard_sequential(const Model& model, const Dataset& data, const ConstraintSet& cs,
                                  const TrainConfig& cfg, const ParameterVector* init = nullptr);

/// Augmented-Lagrangian training with per-sample prediction variables held to
/// the projection conditions (and, for bidirectional models, the coupling
/// equations) as explicit equality constraints.
TrainReport train_hard_simultaneous(const Model& model, const Dataset& data, const ConstraintSet& cs,
                                    const TrainConfig& cfg, const ParameterVector* init = nullptr);

/// Dispatches on cfg.mode.
TrainReport train(const Model& model, const Dataset& data, const ConstraintSet& cs,
                  const TrainConfig& cfg, const ParameterVector* init = nullptr);

/// The augmented-Lagrangian function after eliminating the per-sample
/// variables, for fixed multipliers and penalty:
///   F(theta) = sum_i min_x [lambda_d |y_i - yhat_i|^2 + lambda_p |c(yhat_i)|^2
///                           + kappa_i' h_i + rho/2 |h_i|^2].
/// Exposed so its gradient can be checked and its state inspected.
class AugmentedLagrangian {
 public:
  AugmentedLagrangian(const Model& model, const Dataset& data, const ConstraintSet& cs,
                      const TrainConfig& cfg);
  ~AugmentedLagrangian();

  /// Solves every local problem at theta (warm-started) and returns F as
  /// `value` with dF/dtheta. `loss` reports the per-sample prediction variables.
  Objective evaluate(const ParameterVector& theta, bool with_gradient = true);

  /// kappa <- kappa + rho h at the last evaluated point.
  void update_multipliers();
  double penalty() const { return rho_; }
  void set_penalty(double rho) { rho_ = rho; }
  /// Max over samples of |h_i|_inf at the last evaluated point.
  double violation() const { return violation_; }
  /// Per-sample prediction variables at the last evaluated point (N x output dim).
  Matrix predictions() const;
  /// Number of per-sample constraint rows.
  Index constraint_rows() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  double rho_;
  double violation_ = 0.0;
};

}  // namespace pcml
