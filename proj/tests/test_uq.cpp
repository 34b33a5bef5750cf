#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "pcml/uq.hpp"

using namespace pcml;

namespace {

// Linear ML -> offset physics, 10 parameters, outputs constrained to sum to 1.
struct LinearToy {
  PCMLModel model{MLComponent({3, 2}), PhysicsComponent::offset(3, Vector{{0.1, -0.1}}, {true, true}),
                  Topology::ml_to_p};
  ConstraintSet cs = ConstraintSet::linear(Matrix{{1.0, 1.0}}, Vector{{1.0}});
  Dataset data;

  explicit LinearToy(std::uint64_t seed, Index n = 12) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    std::normal_distribution<double> nd(0.0, 0.05);
    data.u.resize(n, 3);
    data.y.resize(n, 2);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < 3; ++j) data.u(i, j) = ud(rng);
      const double a = 0.5 + 0.3 * data.u(i, 0) - 0.2 * data.u(i, 2);
      data.y(i, 0) = a + nd(rng);
      data.y(i, 1) = 1.0 - a + nd(rng);
    }
  }

  Predictor soft() const { return Predictor{&model, &cs, false}; }
  Predictor hard() const { return Predictor{&model, &cs, true}; }
};

GaussianPosterior posterior(const Vector& mu, double log_sigma) {
  return {mu, Vector::Constant(mu.size(), log_sigma)};
}

// Monte Carlo estimate of KL(q || p) = E_q[log q - log p].
double kl_monte_carlo(const GaussianPosterior& q, const GaussianPrior& p, Index S) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd;
  const Vector sigma = q.sigma();
  double acc = 0.0;
  for (Index s = 0; s < S; ++s) {
    for (Index k = 0; k < q.size(); ++k) {
      const double e = nd(rng);
      const double x = q.mu(k) + sigma(k) * e;
      const double log_q = -0.5 * e * e - std::log(sigma(k));
      const double z = (x - p.mu0) / p.sigma0;
      const double log_p = -0.5 * z * z - std::log(p.sigma0);
      acc += log_q - log_p;
    }
  }
  return acc / static_cast<double>(S);
}

// Rows of a Sylvester-Hadamard matrix of order 16: orthogonal +-1 columns,
// the first of which is all ones.
Matrix hadamard16() {
  Matrix H = Matrix::Ones(1, 1);
  while (H.rows() < 16) {
    Matrix next(2 * H.rows(), 2 * H.rows());
    next << H, H, H, -H;
    H = next;
  }
  return H;
}

}  // namespace

TEST_CASE("closed-form KL matches a Monte Carlo estimate") {
  const GaussianPosterior q{Vector{{0.3, -1.2, 2.0}}, Vector{{-0.5, 0.2, -2.0}}};
  const GaussianPrior p{0.1, 1.5};
  CHECK(kl_gaussian(q, p) == doctest::Approx(kl_monte_carlo(q, p, 200000)).epsilon(1e-2));
  CHECK(kl_gaussian(GaussianPosterior{Vector::Zero(4), Vector::Zero(4)}, GaussianPrior{}) == 0.0);
  CHECK(kl_gaussian(q, p, {true, false, true}) < kl_gaussian(q, p));
  CHECK_THROWS_AS(kl_gaussian(q, GaussianPrior{0.0, 0.0}), ValidationError);
  CHECK_THROWS_AS(kl_gaussian(q, p, {true}), ShapeError);
}

TEST_CASE("parameter draws honour the mask and the seed") {
  const GaussianPosterior q = posterior(Vector{{1.0, 2.0, 3.0}}, -1.0);
  const Matrix a = sample_parameters(q, 500, 4, {true, false, true});
  CHECK((a.col(1).array() == 2.0).all());
  CHECK(a.col(0).mean() == doctest::Approx(1.0).epsilon(0.05));
  CHECK(a == sample_parameters(q, 500, 4, {true, false, true}));
  CHECK(a != sample_parameters(q, 500, 5, {true, false, true}));
}

TEST_CASE("ELBO gradient matches finite differences with common random numbers") {
  const LinearToy toy(1, 4);
  for (const bool hard : {false, true}) {
    const Predictor p = hard ? toy.hard() : toy.soft();
    const GaussianPrior prior;
    const Index P = toy.model.layout().size();
    REQUIRE(P == 10);
    GaussianPosterior q = posterior(toy.model.init_parameters(3).values, -2.0);
    q.log_sigma(2) = -1.0;
    const Index S = 2000;
    const ElboEstimate e = elbo_estimate(p, toy.data, q, prior, 0.1, S, 17, true);
    auto value = [&](const GaussianPosterior& g) { return elbo_estimate(p, toy.data, g, prior, 0.1, S, 17).value; };
    const double h = 1e-5;
    double worst = 0.0;
    for (Index k = 0; k < 2 * P; ++k) {
      GaussianPosterior a = q, b = q;
      double& ak = k < P ? a.mu(k) : a.log_sigma(k - P);
      double& bk = k < P ? b.mu(k) : b.log_sigma(k - P);
      ak += h;
      bk -= h;
      const double fd = (value(a) - value(b)) / (2.0 * h);
      const double an = k < P ? e.grad_mu(k) : e.grad_log_sigma(k - P);
      worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(an)));
    }
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("ELBO decomposes into likelihood minus KL and rejects bad inputs") {
  const LinearToy toy(2);
  const Predictor p = toy.soft();
  const GaussianPosterior q = posterior(toy.model.init_parameters(1).values, -3.0);
  const ElboEstimate e = elbo_estimate(p, toy.data, q, GaussianPrior{}, 0.05, 32, 1);
  CHECK(e.value == doctest::Approx(e.log_likelihood - e.kl));
  CHECK(e.kl == doctest::Approx(kl_gaussian(q, GaussianPrior{})));
  CHECK_THROWS_AS(elbo_estimate(p, toy.data, q, GaussianPrior{}, 0.0, 32, 1), ValidationError);
  CHECK_THROWS_AS(elbo_estimate(p, toy.data, q, GaussianPrior{}, 0.05, 0, 1), ValidationError);
  CHECK_THROWS_AS(elbo_estimate(p, toy.data, posterior(Vector::Zero(3), 0.0), GaussianPrior{}, 0.05, 4, 1),
                  ShapeError);
}

TEST_CASE("parallel and serial ELBO and bands are identical") {
  const LinearToy toy(3);
  const Predictor p = toy.hard();
  const GaussianPosterior q = posterior(toy.model.init_parameters(2).values, -2.0);
  const ElboEstimate a = elbo_estimate(p, toy.data, q, GaussianPrior{}, 0.05, 64, 8, true, Execution::parallel);
  const ElboEstimate b = elbo_estimate(p, toy.data, q, GaussianPrior{}, 0.05, 64, 8, true, Execution::serial);
  CHECK(a.value == b.value);
  CHECK(a.grad_mu == b.grad_mu);
  CHECK(a.grad_log_sigma == b.grad_log_sigma);
  const PredictiveBands x = predictive_bands(p, q, toy.data.u, 200, 0.9, 5, Execution::parallel);
  const PredictiveBands y = predictive_bands(p, q, toy.data.u, 200, 0.9, 5, Execution::serial);
  CHECK(x.mean == y.mean);
  CHECK(x.lower == y.lower);
  CHECK(x.upper == y.upper);
}

TEST_CASE("bands are ordered and collapse as sigma goes to zero") {
  const LinearToy toy(4);
  const Predictor p = toy.soft();
  const Vector mu = toy.model.init_parameters(5).values;
  const PredictiveBands b = predictive_bands(p, posterior(mu, -2.0), toy.data.u, 500, 0.95, 3);
  CHECK((b.lower.array() <= b.mean.array()).all());
  CHECK((b.mean.array() <= b.upper.array()).all());
  CHECK(b.samples == 500);

  const PredictiveBands point = point_bands(p, ParameterVector{toy.model.layout_ptr(), mu}, toy.data.u);
  const PredictiveBands tiny = predictive_bands(p, posterior(mu, -40.0), toy.data.u, 100, 0.95, 3);
  CHECK((tiny.upper - tiny.lower).maxCoeff() < 1e-12);
  CHECK((tiny.mean - point.mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(point.mean_width() == 0.0);

  // Doubling sigma with the same draws scales every deviation of a linear model.
  const PredictiveBands wide = predictive_bands(p, posterior(mu, -2.0 + std::log(2.0)), toy.data.u, 500, 0.95, 3);
  CHECK(wide.mean_width() >= b.mean_width());

  const PredictiveBands all = predictive_bands(p, posterior(mu, -2.0), toy.data.u, 500, 1.0, 3);
  const std::vector<Matrix> draws = sample_predictions(p, posterior(mu, -2.0), toy.data.u, 500, 3);
  double lo = draws.front()(0, 0), hi = lo;
  for (const Matrix& d : draws) {
    lo = std::min(lo, d(0, 0));
    hi = std::max(hi, d(0, 0));
  }
  CHECK(all.lower(0, 0) == lo);
  CHECK(all.upper(0, 0) == hi);

  CHECK_THROWS_AS(predictive_bands(p, posterior(mu, -2.0), toy.data.u, 99, 0.95, 3), ValidationError);
  CHECK_THROWS_AS(predictive_bands(p, posterior(mu, -2.0), toy.data.u, 100, 0.0, 3), ValidationError);
}

TEST_CASE("hard predictors keep every posterior draw feasible") {
  const LinearToy toy(5);
  const Predictor p = toy.hard();
  const GaussianPosterior q = posterior(toy.model.init_parameters(6).values, -1.0);
  const std::vector<Matrix> draws = sample_predictions(p, q, toy.data.u, 1000, 11);
  double worst = 0.0;
  for (const Matrix& d : draws) worst = std::max(worst, max_violation(toy.cs, toy.data.u, d));
  CHECK(worst <= 1e-8);
}

TEST_CASE("coverage counts inclusive hits and checks shapes") {
  PredictiveBands b;
  b.lower = Matrix{{0.0, 1.0}, {2.0, 3.0}};
  b.upper = Matrix{{1.0, 2.0}, {3.0, 4.0}};
  b.mean = 0.5 * (b.lower + b.upper);
  CHECK(coverage(b, Matrix{{0.0, 2.0}, {2.5, 5.0}}) == doctest::Approx(0.75));
  CHECK(coverage(b, b.mean) == 1.0);
  CHECK_THROWS_AS(coverage(b, Matrix::Zero(2, 3)), ShapeError);
}

TEST_CASE("variational inference recovers the exact linear-Gaussian posterior") {
  // y = H theta + noise with orthogonal H: the exact posterior is a diagonal
  // Gaussian, so mean-field VI is exact at its optimum.
  const Matrix H = hadamard16();
  PCMLModel model(MLComponent({15, 1}), PhysicsComponent::pass_through(15, 1), Topology::ml_to_p);
  const Predictor p{&model, nullptr, false};
  REQUIRE(model.layout().size() == 16);
  // Layout is W (15) then b; the bias multiplies the all-ones column.
  Matrix X = H.rightCols(15);
  const double noise = 0.5;
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  Vector truth(16);
  for (Index k = 0; k < 16; ++k) truth(k) = nd(rng);
  Dataset data;
  data.u = X;
  Vector f = X * truth.head(15) + Vector::Constant(16, truth(15));
  data.y = f;
  for (Index i = 0; i < 16; ++i) data.y(i, 0) += noise * nd(rng);

  // Posterior precision 1 + 16 / noise^2 on each coordinate.
  const double prec = 1.0 + 16.0 / (noise * noise);
  Vector Xty(16);
  Xty.head(15) = X.transpose() * data.y.col(0);
  Xty(15) = data.y.col(0).sum();
  const Vector exact_mean = Xty / (noise * noise) / prec;
  const double exact_sigma = 1.0 / std::sqrt(prec);

  VIConfig cfg;
  cfg.epochs = 3000;
  cfg.learning_rate = 0.01;
  cfg.samples_per_step = 16;
  cfg.init_log_sigma = -2.0;
  cfg.seed = 2;
  const VIResult r = train_vi(p, data, cfg, GaussianPrior{}, noise);
  CHECK(r.elbo.size() == 3000);
  CHECK(r.report.history.size() == 3000);
  CHECK((r.posterior.mu - exact_mean).cwiseAbs().maxCoeff() < 0.25 * exact_sigma);
  const Vector sigma = r.posterior.sigma();
  CHECK((sigma.array() / exact_sigma - 1.0).abs().maxCoeff() < 0.2);

  // ELBO improves between the first and last hundred epochs.
  double head = 0.0, tail = 0.0;
  for (int k = 0; k < 100; ++k) {
    head += r.elbo[static_cast<std::size_t>(k)];
    tail += r.elbo[r.elbo.size() - 1 - static_cast<std::size_t>(k)];
  }
  CHECK(tail >= head);

  CHECK_THROWS_AS(train_vi(p, Dataset{Matrix(0, 15), Matrix(0, 1)}, cfg, GaussianPrior{}, noise),
                  ValidationError);
}

TEST_CASE("KL closed form on small cases") {
  CHECK(kl_gaussian(GaussianPosterior{Vector{{1.0}}, Vector{{0.0}}}, GaussianPrior{}) == doctest::Approx(0.5));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  GaussianPosterior q{Vector(10), Vector(10)};
  for (Index k = 0; k < 10; ++k) {
    q.mu(k) = nd(rng);
    q.log_sigma(k) = 0.5 * nd(rng);
  }
  CHECK(kl_gaussian(q, GaussianPrior{}) == doctest::Approx(kl_monte_carlo(q, GaussianPrior{}, 1000000)).epsilon(1e-2));
}

TEST_CASE("ELBO likelihood collapses to the point log-likelihood and is reproducible") {
  const LinearToy toy(4);
  const Predictor p = toy.soft();
  const Vector mu = toy.model.init_parameters(2).values;
  const double noise = 0.1;
  const Matrix Y = predict_batch(toy.model, toy.data.u, ParameterVector{toy.model.layout_ptr(), mu}).first;
  const double n = static_cast<double>(toy.data.y.size());
  const double point = -0.5 * (toy.data.y - Y).squaredNorm() / (noise * noise) -
                       0.5 * n * std::log(2.0 * std::numbers::pi * noise * noise);
  const ElboEstimate collapsed = elbo_estimate(p, toy.data, posterior(mu, -20.0), GaussianPrior{}, noise, 8, 3);
  CHECK(std::abs(collapsed.log_likelihood - point) <= 1e-6);

  const GaussianPosterior q = posterior(mu, -2.0);
  CHECK(elbo_estimate(p, toy.data, q, GaussianPrior{}, noise, 1, 9).value ==
        elbo_estimate(p, toy.data, q, GaussianPrior{}, noise, 1, 9).value);

  // Standard error from the spread of single-draw estimates.
  const int singles = 400;
  double sum = 0.0, sq = 0.0;
  for (int s = 0; s < singles; ++s) {
    const double v = elbo_estimate(p, toy.data, q, GaussianPrior{}, noise, 1, 1000 + s).value;
    sum += v;
    sq += v * v;
  }
  const double var = (sq - sum * sum / singles) / (singles - 1);
  const double se = std::sqrt(var / 1e4);
  const double a = elbo_estimate(p, toy.data, q, GaussianPrior{}, noise, 10000, 1).value;
  const double b = elbo_estimate(p, toy.data, q, GaussianPrior{}, noise, 10000, 2).value;
  CHECK(std::abs(a - b) <= 2.0 * std::sqrt(2.0) * se);
}

TEST_CASE("posterior sigma shrinks on noiseless data with more parameters than observations") {
  LinearToy toy(6, 3);
  for (Index i = 0; i < 3; ++i) {
    const double a = 0.5 + 0.3 * toy.data.u(i, 0) - 0.2 * toy.data.u(i, 2);
    toy.data.y.row(i) << a, 1.0 - a;
  }
  REQUIRE(toy.data.y.size() < 8);
  VIConfig cfg;
  cfg.epochs = 800;
  cfg.learning_rate = 0.02;
  cfg.init_log_sigma = -0.5;
  cfg.seed = 4;
  const VIResult r = train_vi(toy.soft(), toy.data, cfg, GaussianPrior{}, 0.05);
  const std::vector<bool> mask = toy.model.trainable_mask();
  std::vector<double> sig;
  for (Index k = 0; k < r.posterior.size(); ++k) {
    if (mask[static_cast<std::size_t>(k)]) sig.push_back(r.posterior.sigma()(k));
  }
  std::nth_element(sig.begin(), sig.begin() + static_cast<long>(sig.size() / 2), sig.end());
  CHECK(sig[sig.size() / 2] < std::exp(cfg.init_log_sigma));
}
