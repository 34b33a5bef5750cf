#include "pcml/bench.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>

namespace pcml {

void NoiseSpec::validate(Index outputs) const {
  if (sigma.size() != outputs) throw ValidationError("noise sigma needs one entry per output");
  if (bias.size() != outputs) throw ValidationError("noise bias needs one entry per output");
  if (!sigma.allFinite() || (sigma.array() < 0.0).any()) throw ValidationError("noise sigma must be finite and >= 0");
  if (!bias.allFinite()) throw ValidationError("noise bias must be finite");
}

Matrix BenchmarkProblem::truth(const Matrix& U) const {
  if (U.cols() != input_dim) {
    throw ShapeError(name + " inputs have " + std::to_string(input_dim) + " columns, got " +
                     std::to_string(U.cols()));
  }
  Matrix Y(U.rows(), output_dim);
  for (Index i = 0; i < U.rows(); ++i) {
    if (system) {
      const double t = U(i, 0);
      if (!(t >= system->t0)) throw ValidationError("query time precedes the initial time");
      if (t == system->t0) {
        Y.row(i) = system->x0.transpose();
        continue;
      }
      ODESystem sys = *system;
      sys.tf = t;
      const int steps = static_cast<int>(std::ceil((t - sys.t0) / truth_step - 1e-9));
      const Matrix traj = integrate(sys, IntegratorConfig{(t - sys.t0) / steps, steps});
      Y.row(i) = traj.row(traj.rows() - 1);
    } else {
      Y.row(i) = algebraic(U.row(i).transpose()).transpose();
    }
  }
  return Y;
}

Vector reactor_closed_form(double t, double k1, double k2) {
  const double a = std::exp(-k1 * t);
  const double b = k1 / (k2 - k1) * (std::exp(-k1 * t) - std::exp(-k2 * t));
  return Vector{{a, b, 1.0 - a - b}};
}

BenchmarkProblem reactor_problem() {
  const double k1 = 1.0, k2 = 0.5;
  const Vector c0{{1.0, 0.0, 0.0}};
  BenchmarkProblem p("reactor", make_species_balance({Matrix{{-1.0, 0.0}, {1.0, -1.0}, {0.0, 1.0}}, c0}));
  p.input_dim = 1;
  p.output_dim = 3;
  p.input_names = {"t"};
  p.output_names = {"C_A", "C_B", "C_C"};
  p.output_unit = "mol/L";
  const Matrix K{{-k1, 0.0, 0.0}, {k1, -k2, 0.0}, {0.0, k2, 0.0}};
  RhsBuilder rhs = [K](ad::ExprGraph& g, double, ad::Node x, std::span<const ad::Node>) {
    return g.mat_vec(g.constant(K), x);
  };
  p.system = ODESystem{3, rhs, c0, 0.0, 5.0};
  p.truth_step = 0.01;
  p.sampling.kind = InputSampling::Kind::time_grid;
  p.sampling.horizon = 5.0;
  p.noise = {Vector::Constant(3, 0.02), Vector::Zero(3), 0};
  p.default_train = 20;
  p.default_test = 40;
  return p;
}

namespace {

Vector mix(const Vector& u) {
  const double f1 = u(0), f2 = u(3);
  const double f = f1 + f2;
  const double a = (f1 * u(1) + f2 * u(4)) / f;
  const double b = (f1 * u(2) + f2 * u(5)) / f;
  return Vector{{f, a, b, 1.0 - a - b}};
}

}  // namespace

BenchmarkProblem mixer_problem() {
  BenchmarkProblem p("mixer", ConstraintSet::input_linear(4, 3, [](const Vector& u) {
                       const double f = u(0) + u(3);
                       LinearConstraint c;
                       c.A = Matrix{{1.0, 0.0, 0.0, 0.0}, {0.0, f, 0.0, 0.0}, {0.0, 0.0, f, 0.0}};
                       c.b = Vector{{f, u(0) * u(1) + u(3) * u(4), u(0) * u(2) + u(3) * u(5)}};
                       return c;
                     }));
  p.input_dim = 6;
  p.output_dim = 4;
  p.input_names = {"F1", "xA1", "xB1", "F2", "xA2", "xB2"};
  p.output_names = {"F", "xA", "xB", "xC"};
  p.output_unit = "flow or mole fraction";
  p.algebraic = mix;
  p.sampling.kind = InputSampling::Kind::box;
  p.sampling.lower = Vector{{0.5, 0.1, 0.1, 0.5, 0.1, 0.1}};
  p.sampling.upper = Vector{{2.0, 0.5, 0.4, 2.0, 0.5, 0.4}};
  p.noise = {Vector::Constant(4, 0.01), Vector::Zero(4), 0};
  p.default_train = 40;
  p.default_test = 200;
  return p;
}

BenchmarkProblem problem_by_name(const std::string& name) {
  if (name == "reactor") return reactor_problem();
  if (name == "mixer") return mixer_problem();
  throw ValidationError("unknown problem '" + name + "' (expected reactor or mixer)");
}

namespace {

Matrix sample_inputs(const BenchmarkProblem& prob, Index n, Index n_train, std::mt19937_64& rng) {
  Matrix U(n, prob.input_dim);
  if (prob.sampling.kind == InputSampling::Kind::time_grid) {
    const double spacing = prob.sampling.horizon / static_cast<double>(n_train);
    const double t0 = prob.system ? prob.system->t0 : 0.0;
    for (Index k = 0; k < n; ++k) U(k, 0) = t0 + static_cast<double>(k + 1) * spacing;
    return U;
  }
  for (Index k = 0; k < n; ++k) {
    for (Index j = 0; j < prob.input_dim; ++j) {
      std::uniform_real_distribution<double> d(prob.sampling.lower(j), prob.sampling.upper(j));
      U(k, j) = d(rng);
    }
  }
  return U;
}

}  // namespace

GeneratedData generate_data(const BenchmarkProblem& prob, Index n_train, Index n_test, std::uint64_t seed) {
  if (n_train < 1) throw ValidationError("n_train must be >= 1");
  if (n_test < 1) throw ValidationError("n_test must be >= 1");
  prob.noise.validate(prob.output_dim);
  std::seed_seq seq{static_cast<std::uint32_t>(prob.noise.seed), static_cast<std::uint32_t>(prob.noise.seed >> 32),
                    static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::mt19937_64 rng(seq);
  GeneratedData out;
  out.train.u = sample_inputs(prob, n_train, n_train, rng);
  out.test.u = sample_inputs(prob, n_test, n_train, rng);
  out.train_truth = prob.truth(out.train.u);
  out.test.y = prob.truth(out.test.u);
  out.train.y = out.train_truth;
  std::normal_distribution<double> nd;
  for (Index i = 0; i < n_train; ++i) {
    for (Index j = 0; j < prob.output_dim; ++j) {
      out.train.y(i, j) += prob.noise.sigma(j) * nd(rng) + prob.noise.bias(j);
    }
  }
  return out;
}

void ModelSpec::validate() const {
  for (const Index h : hidden) {
    if (h < 1) throw ValidationError("hidden layer sizes must be >= 1");
  }
  if (!(max_step > 0.0)) throw ValidationError("max_step must be > 0");
}

std::unique_ptr<Model> build_model(const BenchmarkProblem& prob, const ModelSpec& spec, Index n_train) {
  spec.validate();
  if (n_train < 1) throw ValidationError("n_train must be >= 1");
  if (prob.transient()) {
    if (spec.topology != Topology::ml_to_p) {
      throw ValidationError("neural differential models only support the MLtoP topology");
    }
    std::vector<Index> sizes{prob.output_dim};
    sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
    sizes.push_back(prob.output_dim);
    const double spacing = prob.sampling.horizon / static_cast<double>(n_train);
    const int steps = static_cast<int>(std::ceil(spacing / spec.max_step - 1e-9));
    auto model = std::make_unique<NeuralODEModel>(MLComponent(sizes), prob.system->x0, prob.system->t0,
                                                  IntegratorConfig{spacing / steps, steps});
    if (spec.conserve) {
      if (!prob.constraints.linear_only() || prob.constraints.input_dependent()) {
        throw ValidationError("conserve needs a constant linear constraint set");
      }
      model->conserve(prob.constraints.linear_part(Vector()).A);
    }
    return model;
  }
  if (spec.conserve) throw ValidationError("conserve applies to neural differential models only");
  if (spec.topology == Topology::p_to_ml) {
    throw ValidationError(prob.name + " supports the MLtoP and Bidirectional topologies");
  }
  const Index in = spec.topology == Topology::bidirectional ? prob.input_dim + prob.output_dim : prob.input_dim;
  std::vector<Index> sizes{in};
  sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
  sizes.push_back(prob.output_dim);
  return std::make_unique<PCMLModel>(MLComponent(sizes), PhysicsComponent::pass_through(prob.input_dim, prob.output_dim),
                                     spec.topology);
}

namespace {

double rmse(const Matrix& a, const Matrix& b) {
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

// Per-row infinity norm of the stacked residual.
Vector row_violation(const ConstraintSet& cs, const Matrix& U, const Matrix& Y) {
  Vector v = Vector::Zero(U.rows());
  if (cs.empty()) return v;
  for (Index i = 0; i < U.rows(); ++i) {
    v(i) = residual(cs, U.row(i).transpose(), Y.row(i).transpose()).lpNorm<Eigen::Infinity>();
  }
  return v;
}

}  // namespace

MetricsReport evaluate(const Predictor& predictor, const Estimate& estimate, const BenchmarkProblem& prob,
                       const Dataset& train, const Dataset& test, const EvaluationOptions& opts,
                       PredictiveBands* bands_out, PredictiveBands* train_bands_out) {
  predictor.validate();
  train.validate();
  test.validate();
  MetricsReport m;
  PredictiveBands bands, train_bands;
  if (const auto* theta = std::get_if<ParameterVector>(&estimate)) {
    train_bands = point_bands(predictor, *theta, train.u);
    bands = point_bands(predictor, *theta, test.u);
    const Vector v = row_violation(prob.constraints, test.u, bands.mean);
    m.max_violation = v.maxCoeff();
    m.mean_violation = v.mean();
  } else {
    const auto& post = std::get<GaussianPosterior>(estimate);
    const std::vector<Matrix> train_draws = sample_predictions(predictor, post, train.u, opts.samples, opts.seed, opts.exec);
    train_bands = bands_from_samples(train.u, train_draws, opts.beta);
    const std::vector<Matrix> draws = sample_predictions(predictor, post, test.u, opts.samples, opts.seed, opts.exec);
    bands = bands_from_samples(test.u, draws, opts.beta);
    double total = 0.0;
    for (const Matrix& d : draws) {
      const Vector v = row_violation(prob.constraints, test.u, d);
      m.max_violation = std::max(m.max_violation, v.maxCoeff());
      total += v.sum();
    }
    m.mean_violation = total / static_cast<double>(draws.size() * static_cast<std::size_t>(test.u.rows()));
  }
  m.rmse_train = rmse(train_bands.mean, train.y);
  m.rmse_test = rmse(bands.mean, test.y);
  m.coverage = coverage(bands, test.y);
  m.mean_band_width = bands.mean_width();
  if (bands_out) *bands_out = std::move(bands);
  if (train_bands_out) *train_bands_out = std::move(train_bands);
  return m;
}

namespace {

// Prefixes a section's validation message with the section name.
template <class F>
void in_section(const char* section, F check) {
  try {
    check();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(section) + "." + e.what());
  }
}

}  // namespace

void ArmConfig::validate() const {
  in_section("model", [&] { model.validate(); });
  in_section("train", [&] { train.validate(); });
  in_section("uq", [&] {
    if (uq) {
      vi.validate();
      if (band_samples < 100) throw ValidationError("samples must be >= 100");
    }
    if (!(beta > 0.0 && beta <= 1.0)) throw ValidationError("beta must be in (0, 1]");
  });
}

ArmResult run_arm(const BenchmarkProblem& prob, const ArmConfig& arm, const GeneratedData& data,
                  std::uint64_t seed) {
  arm.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = build_model(prob, arm.model, data.train.size());
  TrainConfig tc = arm.train;
  tc.seed = seed;
  ArmResult res;
  res.train = train(*model, data.train, prob.constraints, tc);
  const Predictor predictor = make_predictor(*model, prob.constraints, tc);
  EvaluationOptions eo;
  eo.samples = arm.band_samples;
  eo.beta = arm.beta;
  eo.seed = seed;
  if (arm.uq) {
    const double noise = prob.noise.sigma.mean();
    if (!(noise > 0.0)) throw ValidationError("uncertainty quantification needs noise sigma > 0");
    VIConfig vc = arm.vi;
    vc.seed = seed;
    res.vi = train_vi(predictor, data.train, vc, GaussianPrior{}, noise, &res.train.theta);
    res.metrics = evaluate(predictor, res.vi->posterior, prob, data.train, data.test, eo, &res.bands, &res.train_bands);
  } else {
    res.metrics = evaluate(predictor, res.train.theta, prob, data.train, data.test, eo, &res.bands, &res.train_bands);
  }
  res.metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

ComparisonTable compare_ml_vs_pcml(const BenchmarkProblem& prob, const ArmConfig& ml, const ArmConfig& pcml,
                                   const std::vector<std::uint64_t>& seeds, Index n_train, Index n_test,
                                   Execution exec, int threads) {
  if (seeds.size() < 3) throw ValidationError("comparison needs at least 3 seeds");
  ml.validate();
  pcml.validate();
  ComparisonTable table;
  table.rows.resize(seeds.size());
  for_each_index(seeds.size(), exec, [&](std::size_t k) {
    SeedComparison& row = table.rows[k];
    row.seed = seeds[k];
    std::optional<GeneratedData> data;
    try {
      data = generate_data(prob, n_train, n_test, row.seed);
    } catch (const std::exception& e) {
      row.ml_error = row.pcml_error = std::string("data generation: ") + e.what();
      return;
    }
    try {
      row.ml = run_arm(prob, ml, *data, row.seed);
    } catch (const std::exception& e) {
      row.ml_error = e.what();
    }
    try {
      row.pcml = run_arm(prob, pcml, *data, row.seed);
    } catch (const std::exception& e) {
      row.pcml_error = e.what();
    }
  }, threads);
  double ml_width = 0.0, pcml_width = 0.0;
  int ml_ok = 0, pcml_ok = 0;
  for (const SeedComparison& row : table.rows) {
    if (row.ml) {
      ml_width += row.ml->metrics.mean_band_width;
      ++ml_ok;
    }
    if (!row.pcml) continue;
    pcml_width += row.pcml->metrics.mean_band_width;
    ++pcml_ok;
    if (!row.ml || row.pcml->metrics.rmse_test < row.ml->metrics.rmse_test) ++table.rmse_wins;
    if (!row.ml || row.pcml->metrics.mean_band_width < row.ml->metrics.mean_band_width) ++table.width_wins;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  table.ml_mean_width = ml_ok ? ml_width / ml_ok : nan;
  table.pcml_mean_width = pcml_ok ? pcml_width / pcml_ok : nan;
  return table;
}

}  // namespace pcml
