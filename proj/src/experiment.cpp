#include "pcml/experiment.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "pcml/plot.hpp"

namespace pcml {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string_view kind_name(ExperimentKind k) { return k == ExperimentKind::train ? "train" : "compare"; }

// Strict object access: every key read is recorded and leftovers are errors.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }
  ~Fields() = default;

  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* get(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  double number(const std::string& key, double fallback) {
    const json* v = get(key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError(field(key) + " must be a number");
    return v->get<double>();
  }

  long long integer(const std::string& key, long long fallback) {
    const json* v = get(key);
    if (!v) return fallback;
    if (!v->is_number_integer()) throw ConfigError(field(key) + " must be an integer");
    return v->get<long long>();
  }

  bool boolean(const std::string& key, bool fallback) {
    const json* v = get(key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ConfigError(field(key) + " must be true or false");
    return v->get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    const json* v = get(key);
    if (!v) return fallback;
    if (!v->is_string()) throw ConfigError(field(key) + " must be a string");
    return v->get<std::string>();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + field(it.key()) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

int to_int(long long v, const std::string& field) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError(field + " is out of range");
  }
  return static_cast<int>(v);
}

template <class F>
auto named(const std::string& field, F parse) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

ProjectionOptions parse_projection(const json& j, const std::string& path) {
  Fields f(j, path);
  ProjectionOptions o;
  o.tol = f.number("tol", o.tol);
  o.max_iters = to_int(f.integer("max_iters", o.max_iters), f.field("max_iters"));
  o.backtrack_factor = f.number("backtrack_factor", o.backtrack_factor);
  o.max_backtracks = to_int(f.integer("max_backtracks", o.max_backtracks), f.field("max_backtracks"));
  o.initial_shift = f.number("initial_shift", o.initial_shift);
  o.max_shift = f.number("max_shift", o.max_shift);
  f.finish();
  return o;
}

AugmentedLagrangianOptions parse_al(const json& j, const std::string& path) {
  Fields f(j, path);
  AugmentedLagrangianOptions o;
  o.initial_penalty = f.number("initial_penalty", o.initial_penalty);
  o.growth = f.number("growth", o.growth);
  o.required_shrink = f.number("required_shrink", o.required_shrink);
  o.max_penalty = f.number("max_penalty", o.max_penalty);
  o.outer_iters = to_int(f.integer("outer_iters", o.outer_iters), f.field("outer_iters"));
  o.inner_epochs = to_int(f.integer("inner_epochs", o.inner_epochs), f.field("inner_epochs"));
  o.tol = f.number("tol", o.tol);
  f.finish();
  return o;
}

ModelSpec parse_model(const json& j, const std::string& path) {
  Fields f(j, path);
  ModelSpec m;
  m.hidden = {8};
  if (const json* h = f.get("hidden")) {
    if (!h->is_array()) throw ConfigError(f.field("hidden") + " must be an array of integers");
    m.hidden.clear();
    for (const auto& v : *h) {
      if (!v.is_number_integer()) throw ConfigError(f.field("hidden") + " must be an array of integers");
      m.hidden.push_back(v.get<Index>());
    }
  }
  m.topology = named(f.field("topology"), [&] { return topology_from_string(f.string("topology", "MLtoP")); });
  m.max_step = f.number("max_step", m.max_step);
  m.conserve = f.boolean("conserve", m.conserve);
  f.finish();
  return m;
}

TrainConfig parse_train(const json& j, const std::string& path) {
  Fields f(j, path);
  TrainConfig t;
  t.mode = named(f.field("mode"), [&] { return train_mode_from_string(f.string("mode", "soft")); });
  t.lambda_d = f.number("lambda_d", t.lambda_d);
  t.lambda_p = f.number("lambda_p", t.lambda_p);
  t.learning_rate = f.number("learning_rate", t.learning_rate);
  t.max_epochs = to_int(f.integer("max_epochs", t.max_epochs), f.field("max_epochs"));
  t.tol = f.number("tol", t.tol);
  t.target = named(f.field("target"), [&] { return projection_target_from_string(f.string("target", "output")); });
  if (const json* p = f.get("projection")) t.projection = parse_projection(*p, f.field("projection"));
  if (const json* a = f.get("augmented_lagrangian")) t.al = parse_al(*a, f.field("augmented_lagrangian"));
  f.finish();
  return t;
}

void parse_uq(const json& j, const std::string& path, ArmConfig& arm) {
  Fields f(j, path);
  arm.uq = f.boolean("enabled", arm.uq);
  arm.vi.epochs = to_int(f.integer("epochs", arm.vi.epochs), f.field("epochs"));
  arm.vi.learning_rate = f.number("learning_rate", arm.vi.learning_rate);
  arm.vi.samples_per_step = f.integer("samples_per_step", arm.vi.samples_per_step);
  arm.vi.init_log_sigma = f.number("init_log_sigma", arm.vi.init_log_sigma);
  arm.band_samples = f.integer("samples", arm.band_samples);
  arm.beta = f.number("beta", arm.beta);
  f.finish();
}

void validate_arm(const ArmConfig& a, const std::string& prefix) {
  try {
    a.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(prefix + e.what());
  }
}

ArmConfig default_arm() {
  ArmConfig a;
  a.label = "main";
  a.model.hidden = {8};
  a.uq = false;
  a.vi.epochs = 500;
  a.vi.init_log_sigma = -5.0;
  return a;
}

ArmConfig parse_arm(const json* model, const json* train, const json* uq, const std::string& prefix, ArmConfig arm) {
  if (model) arm.model = parse_model(*model, prefix + "model");
  if (train) arm.train = parse_train(*train, prefix + "train");
  if (uq) parse_uq(*uq, prefix + "uq", arm);
  return arm;
}

json projection_json(const ProjectionOptions& o) {
  return json{{"tol", o.tol},
              {"max_iters", o.max_iters},
              {"backtrack_factor", o.backtrack_factor},
              {"max_backtracks", o.max_backtracks},
              {"initial_shift", o.initial_shift},
              {"max_shift", o.max_shift}};
}

json al_json(const AugmentedLagrangianOptions& o) {
  return json{{"initial_penalty", o.initial_penalty}, {"growth", o.growth},
              {"required_shrink", o.required_shrink}, {"max_penalty", o.max_penalty},
              {"outer_iters", o.outer_iters},         {"inner_epochs", o.inner_epochs},
              {"tol", o.tol}};
}

json arm_json(const ArmConfig& a) {
  json hidden = json::array();
  for (const Index h : a.model.hidden) hidden.push_back(h);
  return json{{"label", a.label},
              {"model",
               {{"hidden", hidden},
                {"topology", std::string(to_string(a.model.topology))},
                {"max_step", a.model.max_step},
                {"conserve", a.model.conserve}}},
              {"train",
               {{"mode", std::string(to_string(a.train.mode))},
                {"lambda_d", a.train.lambda_d},
                {"lambda_p", a.train.lambda_p},
                {"learning_rate", a.train.learning_rate},
                {"max_epochs", a.train.max_epochs},
                {"tol", a.train.tol},
                {"target", std::string(to_string(a.train.target))},
                {"projection", projection_json(a.train.projection)},
                {"augmented_lagrangian", al_json(a.train.al)}}},
              {"uq",
               {{"enabled", a.uq},
                {"epochs", a.vi.epochs},
                {"learning_rate", a.vi.learning_rate},
                {"samples_per_step", a.vi.samples_per_step},
                {"init_log_sigma", a.vi.init_log_sigma},
                {"samples", a.band_samples},
                {"beta", a.beta}}}};
}

json config_json(const ExperimentConfig& cfg) {
  json arms = json::array();
  for (const ArmConfig& a : cfg.arms) arms.push_back(arm_json(a));
  json seeds = json::array();
  for (const auto s : cfg.seeds) seeds.push_back(s);
  const BenchmarkProblem prob = cfg.resolved_problem();
  return json{{"experiment", std::string(kind_name(cfg.kind))},
              {"problem",
               {{"name", cfg.problem},
                {"noise_sigma", prob.noise.sigma(0)},
                {"n_train", cfg.resolved_train()},
                {"n_test", cfg.resolved_test()}}},
              {"arms", arms},
              {"seeds", seeds},
              {"output_dir", cfg.output_dir}};
}

// Line and column of a byte offset in text.
std::pair<int, int> position(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace

void ExperimentConfig::validate() const {
  named("problem", [&] { return problem_by_name(problem); });
  if (noise_sigma && !(std::isfinite(*noise_sigma) && *noise_sigma >= 0.0)) {
    throw ConfigError("problem.noise_sigma must be finite and >= 0");
  }
  if (n_train && *n_train < 1) throw ConfigError("problem.n_train must be >= 1");
  if (n_test && *n_test < 1) throw ConfigError("problem.n_test must be >= 1");
  if (kind == ExperimentKind::train && arms.size() != 1) throw ConfigError("train experiments need exactly one arm");
  if (kind == ExperimentKind::compare && arms.size() != 2) {
    throw ConfigError("compare experiments need exactly two arms (ML baseline, then PCML)");
  }
  if (kind == ExperimentKind::compare && seeds.size() < 3) throw ConfigError("seeds: compare needs at least 3 seeds");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  std::set<std::string> labels;
  for (std::size_t k = 0; k < arms.size(); ++k) {
    const ArmConfig& a = arms[k];
    const std::string where = "arms[" + std::to_string(k) + "]";
    if (a.label.empty() || a.label.find_first_of("/\\,\"") != std::string::npos || a.label == "." || a.label == "..") {
      throw ConfigError(where + ".label must be a non-empty name without / \\ , or quotes");
    }
    if (!labels.insert(a.label).second) throw ConfigError(where + ".label '" + a.label + "' is repeated");
    try {
      a.validate();
    } catch (const ValidationError& e) {
      throw ConfigError(where + "." + e.what());
    }
    if (a.uq && !(resolved_problem().noise.sigma.minCoeff() > 0.0)) {
      throw ConfigError(where + ".uq needs problem.noise_sigma > 0");
    }
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

BenchmarkProblem ExperimentConfig::resolved_problem() const {
  BenchmarkProblem p = problem_by_name(problem);
  if (noise_sigma) p.noise.sigma.setConstant(*noise_sigma);
  return p;
}

Index ExperimentConfig::resolved_train() const { return n_train ? *n_train : problem_by_name(problem).default_train; }
Index ExperimentConfig::resolved_test() const { return n_test ? *n_test : problem_by_name(problem).default_test; }

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = position(text, e.byte == 0 ? 0 : e.byte - 1);
    std::string msg = e.what();
    if (const auto p = msg.find("syntax error"); p != std::string::npos) msg = msg.substr(p);
    throw ConfigError("parse error at line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + msg,
                      line, col);
  }
  Fields f(j, "");
  ExperimentConfig cfg;
  const std::string kind = f.string("experiment", "train");
  if (kind == "train") {
    cfg.kind = ExperimentKind::train;
  } else if (kind == "compare") {
    cfg.kind = ExperimentKind::compare;
  } else {
    throw ConfigError("experiment must be train or compare");
  }
  if (const json* p = f.get("problem")) {
    if (p->is_string()) {
      cfg.problem = p->get<std::string>();
    } else {
      Fields pf(*p, "problem");
      cfg.problem = pf.string("name", cfg.problem);
      if (pf.get("noise_sigma")) cfg.noise_sigma = pf.number("noise_sigma", 0.0);
      if (pf.get("n_train")) cfg.n_train = pf.integer("n_train", 0);
      if (pf.get("n_test")) cfg.n_test = pf.integer("n_test", 0);
      pf.finish();
    }
  }
  const json* model = f.get("model");
  const json* train = f.get("train");
  const json* uq = f.get("uq");
  if (const json* arms = f.get("arms")) {
    if (model || train || uq) throw ConfigError("give either arms or top-level model/train/uq, not both");
    if (!arms->is_array()) throw ConfigError("arms must be an array");
    for (std::size_t k = 0; k < arms->size(); ++k) {
      const std::string where = "arms[" + std::to_string(k) + "]";
      Fields af((*arms)[k], where);
      ArmConfig a = default_arm();
      a.label = af.string("label", "arm" + std::to_string(k));
      a = parse_arm(af.get("model"), af.get("train"), af.get("uq"), where + ".", a);
      af.finish();
      validate_arm(a, where + ".");
      cfg.arms.push_back(std::move(a));
    }
  } else {
    cfg.arms.push_back(parse_arm(model, train, uq, "", default_arm()));
    validate_arm(cfg.arms.back(), "");
  }
  if (const json* s = f.get("seeds")) {
    if (!s->is_array()) throw ConfigError("seeds must be an array of non-negative integers");
    cfg.seeds.clear();
    for (const auto& v : *s) {
      if (!v.is_number_unsigned()) throw ConfigError("seeds must be an array of non-negative integers");
      cfg.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  cfg.output_dir = f.string("output_dir", cfg.output_dir);
  f.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

std::vector<std::uint64_t> resolve_seeds(const ExperimentConfig& cfg, std::optional<std::uint64_t> flag) {
  if (flag) return {*flag};
  if (const char* env = std::getenv("PCML_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError("PCML_SEED must be a non-negative integer");
    return {static_cast<std::uint64_t>(v)};
  }
  return cfg.seeds;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header) { row(header); }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t k = 0; k < fields.size(); ++k) os_ << (k ? "," : "") << csv_field(fields[k]);
    os_ << "\n";
  }
  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << os_.str();
  }

 private:
  std::ostringstream os_;
};

std::string f(double v) { return format_double(v); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

struct ArmOutcome {
  std::optional<ArmResult> result;
  std::string error;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::vector<ArmOutcome> arms;
};

PlotLabels labels_for(const BenchmarkProblem& prob) {
  PlotLabels l;
  l.x = prob.transient() ? prob.input_names.front() + " (time)" : prob.input_names.front() + " (flow)";
  l.y = prob.output_unit;
  l.outputs = prob.output_names;
  return l;
}

std::vector<std::string> input_header(const BenchmarkProblem& prob) {
  std::vector<std::string> h{"set", "row"};
  h.insert(h.end(), prob.input_names.begin(), prob.input_names.end());
  h.push_back("output");
  return h;
}

std::vector<std::string> input_fields(const std::string& set, Index row, const Matrix& U) {
  std::vector<std::string> r{set, std::to_string(row)};
  for (Index j = 0; j < U.cols(); ++j) r.push_back(f(U(row, j)));
  return r;
}

void write_arm(const fs::path& dir, const BenchmarkProblem& prob, const ArmConfig& arm, const GeneratedData& data,
               const ArmResult& res) {
  fs::create_directories(dir);
  {
    Csv c({"epoch", "data_loss", "physics_loss", "total_loss", "max_violation"});
    for (const EpochRecord& e : res.train.history) {
      c.row({std::to_string(e.epoch), f(e.data_loss), f(e.physics_loss), f(e.total_loss), f(e.max_violation)});
    }
    c.write(dir / "train_report.csv");
  }
  if (!res.train.outer.empty()) {
    Csv c({"iteration", "penalty", "max_violation", "epochs"});
    for (const OuterRecord& o : res.train.outer) {
      c.row({std::to_string(o.iteration), f(o.penalty), f(o.max_violation), std::to_string(o.epochs)});
    }
    c.write(dir / "outer_report.csv");
  }
  {
    Csv c({"index", "component", "name", "value"});
    Index k = 0;
    for (const ParamSlice& s : res.train.theta.layout->slices()) {
      for (Index e = 0; e < s.size(); ++e, ++k) c.row({std::to_string(k), s.component, s.name, f(res.train.theta.values(k))});
    }
    c.write(dir / "theta.csv");
  }
  if (res.vi) {
    Csv c({"epoch", "elbo", "data_loss", "physics_loss", "max_violation"});
    for (std::size_t e = 0; e < res.vi->elbo.size(); ++e) {
      const EpochRecord& r = res.vi->report.history[e];
      c.row({std::to_string(r.epoch), f(res.vi->elbo[e]), f(r.data_loss), f(r.physics_loss), f(r.max_violation)});
    }
    c.write(dir / "vi_report.csv");
    Csv p({"index", "mu", "log_sigma"});
    for (Index k = 0; k < res.vi->posterior.size(); ++k) {
      p.row({std::to_string(k), f(res.vi->posterior.mu(k)), f(res.vi->posterior.log_sigma(k))});
    }
    p.write(dir / "posterior.csv");
  }

  auto header = input_header(prob);
  auto traj_header = header;
  traj_header.insert(traj_header.end(), {"observed", "truth", "prediction"});
  Csv traj(traj_header);
  auto band_header = header;
  band_header.insert(band_header.end(), {"observed", "truth", "mean", "lower", "upper"});
  Csv bands(band_header);
  const auto emit = [&](const std::string& set, const Matrix& U, const Matrix* observed, const Matrix& truth,
                        const PredictiveBands& b) {
    for (Index i = 0; i < U.rows(); ++i) {
      for (Index j = 0; j < prob.output_dim; ++j) {
        auto r = input_fields(set, i, U);
        r.push_back(std::to_string(j));
        r.push_back(observed ? f((*observed)(i, j)) : "");
        r.push_back(f(truth(i, j)));
        auto t = r;
        t.push_back(f(b.mean(i, j)));
        traj.row(t);
        r.insert(r.end(), {f(b.mean(i, j)), f(b.lower(i, j)), f(b.upper(i, j))});
        bands.row(r);
      }
    }
  };
  emit("train", data.train.u, &data.train.y, data.train_truth, res.train_bands);
  emit("test", data.test.u, nullptr, data.test.y, res.bands);
  traj.write(dir / "trajectory.csv");
  PlotLabels l = labels_for(prob);
  l.title = arm.label + " predictions";
  plot(dir / "trajectory.csv", PlotKind::trajectory, dir / "trajectory.svg", l);
  if (arm.uq) {
    bands.write(dir / "bands.csv");
    l.title = arm.label + " " + f(100.0 * arm.beta).substr(0, 4) + "% predictive bands";
    plot(dir / "bands.csv", PlotKind::bands, dir / "bands.svg", l);
  }
  PlotLabels ll;
  ll.title = arm.label + " training loss";
  plot(dir / "train_report.csv", PlotKind::loss, dir / "loss.svg", ll);
}

std::vector<std::string> metric_fields(const MetricsReport& m) {
  return {f(m.rmse_train), f(m.rmse_test), f(m.max_violation), f(m.mean_violation), f(m.coverage), f(m.mean_band_width)};
}

const std::vector<std::string> kMetricHeader{"rmse_train",     "rmse_test", "max_violation",
                                             "mean_violation", "coverage",  "mean_band_width"};

void prepare_output(const fs::path& out, bool force, fs::path& tmp) {
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)) && !force) {
    throw ValidationError("output directory " + out.string() + " exists and is not empty (use --force to replace it)");
  }
  tmp = out;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
}

void commit_output(const fs::path& tmp, const fs::path& out) {
  fs::remove_all(out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  fs::rename(tmp, out);
}

json version_json() {
  return json{{"pcml", PCML_VERSION},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"compiler", __VERSION__},
              {"cxx_standard", static_cast<long>(__cplusplus)}};
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const fs::path out = opts.out.empty() ? fs::path(cfg.output_dir) : opts.out;
  fs::path tmp;
  prepare_output(out, opts.force, tmp);

  const BenchmarkProblem prob = cfg.resolved_problem();
  const Index n_train = cfg.resolved_train(), n_test = cfg.resolved_test();
  std::vector<SeedOutcome> outcomes(cfg.seeds.size());
  std::optional<ComparisonTable> table;
  if (cfg.kind == ExperimentKind::compare) {
    table = compare_ml_vs_pcml(prob, cfg.arms[0], cfg.arms[1], cfg.seeds, n_train, n_test, Execution::parallel,
                               opts.jobs);
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
      SeedComparison& row = table->rows[k];
      outcomes[k].seed = row.seed;
      outcomes[k].arms = {{std::move(row.ml), row.ml_error}, {std::move(row.pcml), row.pcml_error}};
    }
  } else {
    for_each_index(cfg.seeds.size(), Execution::parallel, [&](std::size_t k) {
      SeedOutcome& o = outcomes[k];
      o.seed = cfg.seeds[k];
      o.arms.resize(1);
      try {
        o.arms[0].result = run_arm(prob, cfg.arms[0], generate_data(prob, n_train, n_test, o.seed), o.seed);
      } catch (const std::exception& e) {
        o.arms[0].error = e.what();
      }
    }, opts.jobs);
  }

  // Single writer, in seed order.
  RunSummary summary;
  summary.out = out;
  json runs = json::array();
  std::vector<std::string> mh{"seed", "arm", "status"};
  mh.insert(mh.end(), kMetricHeader.begin(), kMetricHeader.end());
  // wall_time stays last: it is the only column that differs between identical runs.
  mh.insert(mh.end(), {"epochs", "termination", "error", "wall_time"});
  Csv metrics(mh);
  for (const SeedOutcome& o : outcomes) {
    const GeneratedData data = generate_data(prob, n_train, n_test, o.seed);
    bool any = false;
    for (std::size_t a = 0; a < o.arms.size(); ++a) {
      const ArmOutcome& arm = o.arms[a];
      const ArmConfig& ac = cfg.arms[a];
      std::vector<std::string> r{std::to_string(o.seed), ac.label, arm.result ? "ok" : "failed"};
      if (arm.result) {
        any = true;
        const auto m = metric_fields(arm.result->metrics);
        r.insert(r.end(), m.begin(), m.end());
        r.insert(r.end(), {std::to_string(arm.result->train.epochs()), arm.result->train.termination, "",
                           f(arm.result->metrics.wall_time)});
        write_arm(tmp / ("seed_" + std::to_string(o.seed)) / ac.label, prob, ac, data, *arm.result);
      } else {
        r.insert(r.end(), kMetricHeader.size() + 2, "");
        r.insert(r.end(), {arm.error, ""});
      }
      metrics.row(r);
      runs.push_back(json{{"seed", o.seed}, {"arm", ac.label}, {"status", arm.result ? "ok" : "failed"},
                          {"error", arm.error}});
    }
    any ? ++summary.seeds_ok : ++summary.seeds_failed;
  }
  metrics.write(tmp / "metrics.csv");

  if (table) {
    std::vector<std::string> ch{"seed", "arm", "status"};
    ch.insert(ch.end(), kMetricHeader.begin(), kMetricHeader.end());
    ch.insert(ch.end(), {"error", "wall_time"});
    Csv comparison(ch);
    json rows = json::array();
    for (const SeedOutcome& o : outcomes) {
      json row{{"seed", o.seed}};
      for (std::size_t a = 0; a < 2; ++a) {
        const ArmOutcome& arm = o.arms[a];
        std::vector<std::string> r{std::to_string(o.seed), cfg.arms[a].label, arm.result ? "ok" : "failed"};
        json jm;
        if (arm.result) {
          const auto m = metric_fields(arm.result->metrics);
          r.insert(r.end(), m.begin(), m.end());
          r.insert(r.end(), {"", f(arm.result->metrics.wall_time)});
          const MetricsReport& mr = arm.result->metrics;
          jm = json{{"rmse_train", mr.rmse_train},         {"rmse_test", mr.rmse_test},
                    {"max_violation", mr.max_violation},   {"mean_violation", mr.mean_violation},
                    {"coverage", mr.coverage},             {"mean_band_width", mr.mean_band_width}};
        } else {
          r.insert(r.end(), kMetricHeader.size(), "");
          r.insert(r.end(), {arm.error, ""});
          jm = json{{"error", arm.error}};
        }
        comparison.row(r);
        row[cfg.arms[a].label] = jm;
      }
      rows.push_back(row);
    }
    comparison.write(tmp / "comparison.csv");
    const auto finite_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    const json cj{{"baseline", cfg.arms[0].label},
                  {"pcml", cfg.arms[1].label},
                  {"seeds", rows.size()},
                  {"rmse_wins", table->rmse_wins},
                  {"width_wins", table->width_wins},
                  {"baseline_mean_band_width", finite_or_null(table->ml_mean_width)},
                  {"pcml_mean_band_width", finite_or_null(table->pcml_mean_width)},
                  {"rows", rows}};
    write_text(tmp / "comparison.json", cj.dump(2) + "\n");
  }

  json seeds = json::array();
  for (const auto s : cfg.seeds) seeds.push_back(s);
  const json manifest{{"config", config_json(cfg)},
                      {"versions", version_json()},
                      {"seeds", seeds},
                      {"runs", runs},
                      {"seeds_ok", summary.seeds_ok},
                      {"seeds_failed", summary.seeds_failed}};
  write_text(tmp / "run_manifest.json", manifest.dump(2) + "\n");
  commit_output(tmp, out);
  return summary;
}

void write_datasets(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const fs::path out = opts.out.empty() ? fs::path(cfg.output_dir) : opts.out;
  fs::path tmp;
  prepare_output(out, opts.force, tmp);
  const BenchmarkProblem prob = cfg.resolved_problem();
  for (const auto seed : cfg.seeds) {
    const GeneratedData d = generate_data(prob, cfg.resolved_train(), cfg.resolved_test(), seed);
    const fs::path dir = tmp / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    std::vector<std::string> h{"row"};
    h.insert(h.end(), prob.input_names.begin(), prob.input_names.end());
    for (const auto& n : prob.output_names) h.push_back(n);
    for (const auto& n : prob.output_names) h.push_back(n + "_true");
    const auto table = [&](const Matrix& U, const Matrix& Y, const Matrix& T) {
      Csv c(h);
      for (Index i = 0; i < U.rows(); ++i) {
        std::vector<std::string> r{std::to_string(i)};
        for (Index j = 0; j < U.cols(); ++j) r.push_back(f(U(i, j)));
        for (Index j = 0; j < Y.cols(); ++j) r.push_back(f(Y(i, j)));
        for (Index j = 0; j < T.cols(); ++j) r.push_back(f(T(i, j)));
        c.row(r);
      }
      return c;
    };
    table(d.train.u, d.train.y, d.train_truth).write(dir / "train.csv");
    table(d.test.u, d.test.y, d.test.y).write(dir / "test.csv");
  }
  json seeds = json::array();
  for (const auto s : cfg.seeds) seeds.push_back(s);
  write_text(tmp / "run_manifest.json",
             json{{"config", config_json(cfg)}, {"versions", version_json()}, {"seeds", seeds}}.dump(2) + "\n");
  commit_output(tmp, out);
}

MetricsReport evaluate_parameters(const ExperimentConfig& cfg, std::size_t arm, const fs::path& theta_csv,
                                  std::uint64_t seed) {
  cfg.validate();
  if (arm >= cfg.arms.size()) throw ConfigError("arm index out of range");
  const ArmConfig& ac = cfg.arms[arm];
  const BenchmarkProblem prob = cfg.resolved_problem();
  const GeneratedData data = generate_data(prob, cfg.resolved_train(), cfg.resolved_test(), seed);
  const auto model = build_model(prob, ac.model, data.train.size());
  const CsvTable t = read_csv(theta_csv);
  const std::size_t c = t.column("value");
  ParameterVector theta{model->layout_ptr(), Vector(model->layout().size())};
  if (static_cast<Index>(t.rows.size()) != theta.values.size()) {
    throw ShapeError(theta_csv.string() + " has " + std::to_string(t.rows.size()) + " parameters, model needs " +
                     std::to_string(theta.values.size()));
  }
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    theta.values(static_cast<Index>(k)) = t.number(k, c);
    if (!std::isfinite(theta.values(static_cast<Index>(k)))) {
      throw ValidationError(theta_csv.string() + " row " + std::to_string(k + 1) + " is not a finite number");
    }
  }
  const Predictor p = make_predictor(*model, prob.constraints, ac.train);
  return evaluate(p, theta, prob, data.train, data.test);
}

}  // namespace pcml
