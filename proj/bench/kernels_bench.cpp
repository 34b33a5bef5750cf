// Serial reference against the OpenMP path for the data-parallel kernels.
// Argument 0 runs serially, 1 in parallel.
#include <benchmark/benchmark.h>

#include "pcml/bench.hpp"

using namespace pcml;

namespace {

Execution exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? Execution::serial : Execution::parallel;
}

struct Mixer {
  BenchmarkProblem prob = mixer_problem();
  GeneratedData data = generate_data(prob, 256, 512, 1);
  std::unique_ptr<Model> model;
  ParameterVector theta;

  Mixer() {
    ModelSpec spec;
    spec.hidden = {32, 32};
    model = build_model(prob, spec, data.train.size());
    theta = model->init_parameters(1);
  }
};

struct Reactor {
  BenchmarkProblem prob = reactor_problem();
  GeneratedData data = generate_data(prob, 20, 40, 1);
  std::unique_ptr<Model> model;
  TrainConfig cfg;
  GaussianPosterior post;

  Reactor() {
    ModelSpec spec;
    spec.hidden = {8};
    spec.conserve = true;
    model = build_model(prob, spec, data.train.size());
    cfg.mode = TrainMode::hard_sequential;
    post = GaussianPosterior{model->init_parameters(1).values, Vector::Constant(model->layout().size(), -4.0)};
  }
};

const Mixer& mixer() {
  static const Mixer m;
  return m;
}

const Reactor& reactor() {
  static const Reactor r;
  return r;
}

void BM_PredictBatch(benchmark::State& state) {
  const Mixer& m = mixer();
  for (auto _ : state) benchmark::DoNotOptimize(predict_batch(*m.model, m.data.test.u, m.theta, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * m.data.test.u.rows());
}

void BM_ProjectedObjective(benchmark::State& state) {
  const Mixer& m = mixer();
  const Predictor p{m.model.get(), &m.prob.constraints, true};
  for (auto _ : state) {
    benchmark::DoNotOptimize(evaluate_objective(p, m.data.train, 1.0, 1.0, m.theta, true, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * m.data.train.size());
}

void BM_ElboWithGradient(benchmark::State& state) {
  const Reactor& r = reactor();
  const Predictor p = make_predictor(*r.model, r.prob.constraints, r.cfg);
  for (auto _ : state) {
    benchmark::DoNotOptimize(elbo_estimate(p, r.data.train, r.post, GaussianPrior{}, 0.02, 64, 3, true, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * 64);
}

void BM_PredictiveBands(benchmark::State& state) {
  const Reactor& r = reactor();
  const Predictor p = make_predictor(*r.model, r.prob.constraints, r.cfg);
  for (auto _ : state) {
    benchmark::DoNotOptimize(predictive_bands(p, r.post, r.data.test.u, 500, 0.95, 5, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * 500);
}

}  // namespace

BENCHMARK(BM_PredictBatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ProjectedObjective)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ElboWithGradient)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PredictiveBands)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
