#pragma once

#include <cstdint>
#include <vector>

#include "pcml/train.hpp"

namespace pcml {

/// Mean-field Gaussian over theta; sigma = exp(log_sigma).
struct GaussianPosterior {
  Vector mu;
  Vector log_sigma;

  Vector sigma() const { return log_sigma.array().exp().matrix(); }
  Index size() const { return mu.size(); }
};

/// Independent N(mu0, sigma0^2) over every coordinate.
struct GaussianPrior {
  double mu0 = 0.0;
  double sigma0 = 1.0;
};

/// Sum over coordinates of KL(q_k || prior). Coordinates with mask false are
/// point-valued and excluded.
double kl_gaussian(const GaussianPosterior& post, const GaussianPrior& prior,
                   const std::vector<bool>& mask = {});

/// S x |theta| draws theta = mu + sigma * eps from one mt19937_64 stream.
/// Masked-out coordinates are fixed at mu.
Matrix sample_parameters(const GaussianPosterior& post, Index S, std::uint64_t seed,
                         const std::vector<bool>& mask = {});

struct ElboEstimate {
  double value = 0.0;
  /// Monte Carlo mean of the Gaussian log-likelihood.
  double log_likelihood = 0.0;
  double kl = 0.0;
  Vector grad_mu;
  Vector grad_log_sigma;
  /// Mean over draws of the data and physics losses of the predictions.
  double mean_data_loss = 0.0;
  double mean_physics_loss = 0.0;
  double max_violation = 0.0;
};

/// Reparameterized Monte Carlo ELBO with S draws from `seed`. Predictions go
/// through the predictor, so hard predictors score projected draws.
ElboEstimate elbo_estimate(const Predictor& predictor, const Dataset& data,
                           const GaussianPosterior& post, const GaussianPrior& prior,
                           double noise_sigma, Index S, std::uint64_t seed,
                           bool with_gradient = false, Execution exec = Execution::parallel);

struct VIConfig {
  int epochs = 1000;
  double learning_rate = 1e-2;
  Index samples_per_step = 16;
  double init_log_sigma = -3.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct VIResult {
  GaussianPosterior posterior;
  /// One record per epoch: mean data/physics loss over the step's draws and
  /// their max violation; total_loss is their unweighted sum.
  TrainReport report;
  std::vector<double> elbo;
};

/// Adam ascent on the ELBO over (mu, log_sigma), starting at mean `init`
/// (the model's initialization when null) with log_sigma = cfg.init_log_sigma.
VIResult train_vi(const Predictor& predictor, const Dataset& data, const VIConfig& cfg,
                  const GaussianPrior& prior, double noise_sigma,
                  const ParameterVector* init = nullptr);

/// Per query row and output: sample mean and the central beta-interval of S draws.
struct PredictiveBands {
  Matrix u;
  Matrix mean;
  Matrix lower;
  Matrix upper;
  Index samples = 0;
  double beta = 0.95;

  double mean_width() const { return (upper - lower).mean(); }
};

/// Predictions of every draw: S matrices of N x output dim.
std::vector<Matrix> sample_predictions(const Predictor& predictor, const GaussianPosterior& post,
                                       const Matrix& U, Index S, std::uint64_t seed,
                                       Execution exec = Execution::parallel);

/// Empirical quantile bands (linear interpolation between order statistics).
PredictiveBands bands_from_samples(const Matrix& U, const std::vector<Matrix>& draws, double beta);

PredictiveBands predictive_bands(const Predictor& predictor, const GaussianPosterior& post,
                                 const Matrix& U, Index S, double beta, std::uint64_t seed,
                                 Execution exec = Execution::parallel);

/// Zero-width bands at a point estimate.
PredictiveBands point_bands(const Predictor& predictor, const ParameterVector& theta, const Matrix& U);

/// Fraction of truth entries inside [lower, upper].
double coverage(const PredictiveBands& bands, const Matrix& truth);

}  // namespace pcml
