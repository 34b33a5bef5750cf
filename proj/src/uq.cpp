#include "pcml/uq.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

namespace pcml {

namespace {

bool active(const std::vector<bool>& mask, Index k) {
  return mask.empty() || mask[static_cast<std::size_t>(k)];
}

void check_mask(const std::vector<bool>& mask, Index n) {
  if (!mask.empty() && static_cast<Index>(mask.size()) != n) {
    throw ShapeError("mask length does not match the posterior");
  }
}

}  // namespace

double kl_gaussian(const GaussianPosterior& post, const GaussianPrior& prior,
                   const std::vector<bool>& mask) {
  if (!(prior.sigma0 > 0.0)) throw ValidationError("prior sigma0 must be > 0");
  if (post.log_sigma.size() != post.mu.size()) throw ShapeError("posterior mu and log_sigma differ in length");
  check_mask(mask, post.size());
  const double var0 = prior.sigma0 * prior.sigma0;
  double kl = 0.0;
  for (Index k = 0; k < post.size(); ++k) {
    if (!active(mask, k)) continue;
    const double var = std::exp(2.0 * post.log_sigma(k));
    const double d = post.mu(k) - prior.mu0;
    kl += std::log(prior.sigma0) - post.log_sigma(k) + (var + d * d) / (2.0 * var0) - 0.5;
  }
  return kl;
}

Matrix sample_parameters(const GaussianPosterior& post, Index S, std::uint64_t seed,
                         const std::vector<bool>& mask) {
  check_mask(mask, post.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const Vector sigma = post.sigma();
  Matrix out(S, post.size());
  for (Index s = 0; s < S; ++s) {
    for (Index k = 0; k < post.size(); ++k) {
      const double eps = nd(rng);
      out(s, k) = active(mask, k) ? post.mu(k) + sigma(k) * eps : post.mu(k);
    }
  }
  return out;
}

ElboEstimate elbo_estimate(const Predictor& predictor, const Dataset& data,
                           const GaussianPosterior& post, const GaussianPrior& prior,
                           double noise_sigma, Index S, std::uint64_t seed, bool with_gradient,
                           Execution exec) {
  if (S < 1) throw ValidationError("ELBO needs at least one sample");
  if (!(noise_sigma > 0.0)) throw ValidationError("noise_sigma must be > 0");
  data.validate();
  predictor.validate();
  const Model& model = *predictor.model;
  if (post.size() != model.layout().size()) throw ShapeError("posterior does not match the model layout");
  const std::vector<bool> mask = model.trainable_mask();

  const Matrix theta = sample_parameters(post, S, seed, mask);
  const Vector sigma = post.sigma();
  const double var = noise_sigma * noise_sigma;
  const double lambda = 0.5 / var;
  const double log_norm =
      -0.5 * static_cast<double>(data.y.size()) * std::log(2.0 * std::numbers::pi * var);

  const auto n = static_cast<std::size_t>(S);
  std::vector<Objective> per(n);
  for_each_index(n, exec, [&](std::size_t s) {
    const ParameterVector th{model.layout_ptr(), theta.row(static_cast<Index>(s)).transpose()};
    per[s] = evaluate_objective(predictor, data, lambda, 0.0, th, with_gradient, Execution::serial);
  });

  ElboEstimate out;
  if (with_gradient) {
    out.grad_mu = Vector::Zero(post.size());
    out.grad_log_sigma = Vector::Zero(post.size());
  }
  for (std::size_t s = 0; s < n; ++s) {
    const Objective& o = per[s];
    out.log_likelihood += log_norm - o.loss.total;
    out.mean_data_loss += o.loss.data;
    out.mean_physics_loss += o.loss.physics;
    out.max_violation = std::max(out.max_violation, o.loss.max_violation);
    if (with_gradient) {
      // d loglik / d theta = -gradient; theta = mu + sigma * eps.
      const Vector eps_sigma = theta.row(static_cast<Index>(s)).transpose() - post.mu;
      out.grad_mu -= o.gradient;
      out.grad_log_sigma -= o.gradient.cwiseProduct(eps_sigma);
    }
  }
  const double inv = 1.0 / static_cast<double>(S);
  out.log_likelihood *= inv;
  out.mean_data_loss *= inv;
  out.mean_physics_loss *= inv;
  out.kl = kl_gaussian(post, prior, mask);
  out.value = out.log_likelihood - out.kl;
  if (with_gradient) {
    const double var0 = prior.sigma0 * prior.sigma0;
    out.grad_mu *= inv;
    out.grad_log_sigma *= inv;
    for (Index k = 0; k < post.size(); ++k) {
      if (!active(mask, k)) {
        out.grad_mu(k) = 0.0;
        out.grad_log_sigma(k) = 0.0;
        continue;
      }
      out.grad_mu(k) -= (post.mu(k) - prior.mu0) / var0;
      out.grad_log_sigma(k) -= -1.0 + sigma(k) * sigma(k) / var0;
    }
  }
  return out;
}

void VIConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (samples_per_step < 1) throw ValidationError("samples_per_step must be >= 1");
  if (!std::isfinite(init_log_sigma)) throw ValidationError("init_log_sigma must be finite");
}

VIResult train_vi(const Predictor& predictor, const Dataset& data, const VIConfig& cfg,
                  const GaussianPrior& prior, double noise_sigma, const ParameterVector* init) {
  cfg.validate();
  if (data.u.rows() < 1) throw ValidationError("variational inference needs a non-empty dataset");
  predictor.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Model& model = *predictor.model;
  const Index P = model.layout().size();
  VIResult res;
  res.posterior.mu = init ? init->values : model.init_parameters(cfg.seed).values;
  if (res.posterior.mu.size() != P) throw ShapeError("initial mean does not match the model layout");
  res.posterior.log_sigma = Vector::Constant(P, cfg.init_log_sigma);

  std::vector<bool> mask = model.trainable_mask();
  std::vector<bool> joint(mask);
  joint.insert(joint.end(), mask.begin(), mask.end());
  OptimizerState adam = make_adam(2 * P, cfg.learning_rate, joint);
  std::mt19937_64 seeds(cfg.seed);
  res.report.termination = "max_epochs";
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ElboEstimate e;
    try {
      e = elbo_estimate(predictor, data, res.posterior, prior, noise_sigma, cfg.samples_per_step,
                        seeds(), true);
    } catch (const Error& err) {
      throw TrainingError("epoch " + std::to_string(epoch) + ": " + err.what(),
                          std::numeric_limits<double>::infinity(), epoch, -1);
    }
    if (!std::isfinite(e.value) || !e.grad_mu.allFinite() || !e.grad_log_sigma.allFinite()) {
      throw TrainingError("non-finite ELBO at epoch " + std::to_string(epoch), e.value, epoch, -1);
    }
    res.elbo.push_back(e.value);
    res.report.history.push_back({epoch, e.mean_data_loss, e.mean_physics_loss,
                                  e.mean_data_loss + e.mean_physics_loss, e.max_violation});
    Vector params(2 * P), grad(2 * P);
    params << res.posterior.mu, res.posterior.log_sigma;
    grad << -e.grad_mu, -e.grad_log_sigma;
    params = adam_step(adam, params, grad);
    res.posterior.mu = params.head(P);
    res.posterior.log_sigma = params.tail(P);
  }
  res.report.theta = ParameterVector{model.layout_ptr(), res.posterior.mu};
  res.report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

std::vector<Matrix> sample_predictions(const Predictor& predictor, const GaussianPosterior& post,
                                       const Matrix& U, Index S, std::uint64_t seed, Execution exec) {
  predictor.validate();
  const Model& model = *predictor.model;
  if (post.size() != model.layout().size()) throw ShapeError("posterior does not match the model layout");
  const Matrix theta = sample_parameters(post, S, seed, model.trainable_mask());
  std::vector<Matrix> out(static_cast<std::size_t>(S));
  for_each_index(out.size(), exec, [&](std::size_t s) {
    const ParameterVector th{model.layout_ptr(), theta.row(static_cast<Index>(s)).transpose()};
    out[s] = ForwardPass(predictor, U, th, Execution::serial).outputs();
  });
  return out;
}

namespace {

// Type-7 sample quantile of sorted values.
double quantile(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

PredictiveBands bands_from_samples(const Matrix& U, const std::vector<Matrix>& draws, double beta) {
  if (draws.empty()) throw ValidationError("bands need at least one draw");
  if (!(beta > 0.0 && beta <= 1.0)) throw ValidationError("beta must be in (0, 1]");
  const Index N = draws.front().rows(), ny = draws.front().cols();
  PredictiveBands b;
  b.u = U;
  b.beta = beta;
  b.samples = static_cast<Index>(draws.size());
  b.mean.resize(N, ny);
  b.lower.resize(N, ny);
  b.upper.resize(N, ny);
  std::vector<double> col(draws.size());
  for (Index i = 0; i < N; ++i) {
    for (Index j = 0; j < ny; ++j) {
      // Mean as an offset from the first draw, so identical draws give it exactly.
      const double x0 = draws.front()(i, j);
      double acc = 0.0;
      for (std::size_t s = 0; s < draws.size(); ++s) {
        col[s] = draws[s](i, j);
        acc += col[s] - x0;
      }
      const double mean = x0 + acc / static_cast<double>(draws.size());
      std::sort(col.begin(), col.end());
      b.mean(i, j) = mean;
      b.lower(i, j) = std::min(quantile(col, 0.5 * (1.0 - beta)), mean);
      b.upper(i, j) = std::max(quantile(col, 0.5 * (1.0 + beta)), mean);
    }
  }
  return b;
}

PredictiveBands predictive_bands(const Predictor& predictor, const GaussianPosterior& post,
                                 const Matrix& U, Index S, double beta, std::uint64_t seed,
                                 Execution exec) {
  if (S < 100) throw ValidationError("predictive bands need at least 100 samples");
  return bands_from_samples(U, sample_predictions(predictor, post, U, S, seed, exec), beta);
}

PredictiveBands point_bands(const Predictor& predictor, const ParameterVector& theta, const Matrix& U) {
  const Matrix Y = ForwardPass(predictor, U, theta).outputs();
  PredictiveBands b;
  b.u = U;
  b.mean = Y;
  b.lower = Y;
  b.upper = Y;
  b.samples = 1;
  return b;
}

double coverage(const PredictiveBands& bands, const Matrix& truth) {
  if (truth.rows() != bands.mean.rows() || truth.cols() != bands.mean.cols()) {
    throw ShapeError("truth is " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()) +
                     ", bands are " + std::to_string(bands.mean.rows()) + "x" +
                     std::to_string(bands.mean.cols()));
  }
  Index inside = 0;
  for (Index k = 0; k < truth.size(); ++k) {
    if (truth.data()[k] >= bands.lower.data()[k] && truth.data()[k] <= bands.upper.data()[k]) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(truth.size());
}

}  // namespace pcml
