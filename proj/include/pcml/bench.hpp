#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pcml/uq.hpp"

namespace pcml {

/// Gaussian measurement noise added to training outputs only.
struct NoiseSpec {
  Vector sigma;
  Vector bias;
  std::uint64_t seed = 0;

  void validate(Index outputs) const;
};

/// How inputs are drawn. Time grids put n points at k * horizon / n_train,
/// k = 1..n (the initial state is known, so t0 is never observed); test grids
/// use the training spacing and so extend past the horizon when n_test > n_train.
/// Boxes draw inputs uniformly and independently for train and test.
struct InputSampling {
  enum class Kind { time_grid, box };
  Kind kind = Kind::box;
  double horizon = 0.0;
  Vector lower;
  Vector upper;
};

struct BenchmarkProblem {
  BenchmarkProblem(std::string name, ConstraintSet constraints)
      : name(std::move(name)), constraints(std::move(constraints)) {}

  std::string name;
  Index input_dim = 0;
  Index output_dim = 0;
  std::vector<std::string> input_names;
  std::vector<std::string> output_names;
  std::string output_unit;

  /// Transient problems: states at the query times.
  std::optional<ODESystem> system;
  double truth_step = 0.01;
  /// Steady problems: outputs of one input row.
  std::function<Vector(const Vector&)> algebraic;

  InputSampling sampling;
  ConstraintSet constraints;
  NoiseSpec noise;
  Index default_train = 20;
  Index default_test = 40;

  bool transient() const { return system.has_value(); }
  /// Noiseless outputs for every row of U.
  Matrix truth(const Matrix& U) const;
};

/// Series reaction A -> B -> C in a batch reactor with k1 = 1, k2 = 0.5 and
/// C(0) = (1, 0, 0); inputs are times, outputs the three concentrations.
BenchmarkProblem reactor_problem();
/// Two-inlet steady mixer. Inputs (F1, xA1, xB1, F2, xA2, xB2), outputs
/// (F, xA, xB, xC); total and A/B component balances as an input-dependent
/// linear constraint.
BenchmarkProblem mixer_problem();
BenchmarkProblem problem_by_name(const std::string& name);

/// Closed-form series-reaction concentrations at time t.
Vector reactor_closed_form(double t, double k1 = 1.0, double k2 = 0.5);

struct GeneratedData {
  Dataset train;
  Dataset test;
  /// Noiseless outputs at the training inputs; test.y is already noiseless.
  Matrix train_truth;
};

GeneratedData generate_data(const BenchmarkProblem& prob, Index n_train, Index n_test, std::uint64_t seed);

/// Hidden layer sizes and coupling for the surrogate a problem builds.
struct ModelSpec {
  std::vector<Index> hidden;
  Topology topology = Topology::ml_to_p;
  /// Largest integrator step for neural differential models.
  double max_step = 0.05;
  /// Neural differential models only: keep the problem's linear constraint
  /// invariant along trajectories by projecting the learned right-hand side.
  bool conserve = false;

  void validate() const;
};

/// Neural ODE on the training time grid for transient problems; an ML
/// component with identity physics for steady ones.
std::unique_ptr<Model> build_model(const BenchmarkProblem& prob, const ModelSpec& spec, Index n_train);

struct MetricsReport {
  double rmse_train = 0.0;
  double rmse_test = 0.0;
  double max_violation = 0.0;
  double mean_violation = 0.0;
  double coverage = 0.0;
  double mean_band_width = 0.0;
  double wall_time = 0.0;
};

struct EvaluationOptions {
  Index samples = 2000;
  double beta = 0.95;
  std::uint64_t seed = 0;
  Execution exec = Execution::parallel;
};

using Estimate = std::variant<ParameterVector, GaussianPosterior>;

/// Test metrics of a point estimate (zero-width bands) or a posterior
/// (predictive mean and per-draw violation). Wall time is left at zero.
/// Optionally hands back the bands on the test and training inputs.
MetricsReport evaluate(const Predictor& predictor, const Estimate& estimate, const BenchmarkProblem& prob,
                       const Dataset& train, const Dataset& test, const EvaluationOptions& opts = {},
                       PredictiveBands* bands = nullptr, PredictiveBands* train_bands = nullptr);

/// One training arm: model, training, optional VI and band settings.
struct ArmConfig {
  std::string label = "arm";
  ModelSpec model;
  TrainConfig train;
  bool uq = true;
  VIConfig vi;
  Index band_samples = 2000;
  double beta = 0.95;

  void validate() const;
};

struct ArmResult {
  MetricsReport metrics;
  TrainReport train;
  std::optional<VIResult> vi;
  PredictiveBands bands;
  PredictiveBands train_bands;
};

/// Trains and evaluates one arm on already generated data. Seeds in the
/// configs are replaced by `seed`.
ArmResult run_arm(const BenchmarkProblem& prob, const ArmConfig& arm, const GeneratedData& data,
                  std::uint64_t seed);

struct SeedComparison {
  std::uint64_t seed = 0;
  std::optional<ArmResult> ml;
  std::optional<ArmResult> pcml;
  std::string ml_error;
  std::string pcml_error;
};

struct ComparisonTable {
  std::vector<SeedComparison> rows;
  /// Seeds where PCML succeeded and either ML failed or PCML did strictly better.
  int rmse_wins = 0;
  int width_wins = 0;
  /// Means over the seeds where the arm succeeded; NaN when none did.
  double ml_mean_width = 0.0;
  double pcml_mean_width = 0.0;
};

ComparisonTable compare_ml_vs_pcml(const BenchmarkProblem& prob, const ArmConfig& ml, const ArmConfig& pcml,
                                   const std::vector<std::uint64_t>& seeds, Index n_train, Index n_test,
                                   Execution exec = Execution::parallel, int threads = 0);

}  // namespace pcml
