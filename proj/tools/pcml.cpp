// Command-line runner for PCML experiments.
#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>

#include "pcml/experiment.hpp"
#include "pcml/plot.hpp"

using namespace pcml;
using json = nlohmann::ordered_json;

namespace {

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const Error*>(&e)) return "numeric";
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return "io";
  return "internal";
}

int report(const std::exception& e, int status) {
  json rec{{"error", error_kind(e)}, {"message", e.what()}};
  if (const auto* c = dynamic_cast<const ConfigError*>(&e); c && c->line() > 0) {
    rec["line"] = c->line();
    rec["column"] = c->column();
  }
  std::cerr << rec.dump() << "\n";
  return status;
}

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  int jobs = 0;
};

void add_common(CLI::App* app, Common& c, bool outputs) {
  app->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "run this seed only (overrides PCML_SEED and the config)");
  if (outputs) {
    app->add_option("--out", c.out, "output directory (default: output_dir from the config)");
    app->add_flag("--force", c.force, "replace a non-empty output directory");
    app->add_option("--jobs", c.jobs, "parallel seeds (default: available cores)")->check(CLI::NonNegativeNumber);
  }
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  cfg.seeds = resolve_seeds(cfg, c.seed);
  cfg.validate();
  return cfg;
}

RunOptions options(const Common& c) { return RunOptions{c.out, c.force, c.jobs}; }

int run(const ExperimentConfig& cfg, const Common& c) {
  const RunSummary s = run_experiment(cfg, options(c));
  std::cout << s.out.string() << ": " << s.seeds_ok << " seed(s) ok, " << s.seeds_failed << " failed\n";
  if (s.seeds_ok == 0) {
    std::cerr << json{{"error", "all_seeds_failed"},
                      {"message", "every seed failed; see run_manifest.json"},
                      {"manifest", (s.out / "run_manifest.json").string()}}
                     .dump()
              << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-constrained machine learning experiments"};
  app.require_subcommand(1);

  Common run_opts, compare_opts, data_opts, eval_opts;
  CLI::App* run_cmd = app.add_subcommand("run", "train and evaluate every seed of a config");
  add_common(run_cmd, run_opts, true);
  CLI::App* compare_cmd = app.add_subcommand("compare", "ML baseline against PCML (experiment: compare)");
  add_common(compare_cmd, compare_opts, true);
  CLI::App* data_cmd = app.add_subcommand("generate-data", "write the train and test sets of every seed");
  add_common(data_cmd, data_opts, true);

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "metrics of a stored theta.csv, printed as JSON");
  add_common(eval_cmd, eval_opts, false);
  std::string theta_csv, arm_label;
  eval_cmd->add_option("--theta", theta_csv, "theta.csv written by run")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--arm", arm_label, "arm label (default: the last arm)");

  CLI::App* plot_cmd = app.add_subcommand("plot", "render a trajectory, bands or loss CSV as SVG");
  std::string csv, svg, kind, title, xlabel, ylabel;
  plot_cmd->add_option("--csv", csv, "input CSV")->required()->check(CLI::ExistingFile);
  plot_cmd->add_option("--kind", kind, "trajectory, bands or loss")->required();
  plot_cmd->add_option("--out", svg, "output SVG")->required();
  plot_cmd->add_option("--title", title);
  plot_cmd->add_option("--xlabel", xlabel);
  plot_cmd->add_option("--ylabel", ylabel);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*run_cmd) return run(load(run_opts), run_opts);
    if (*compare_cmd) {
      const ExperimentConfig cfg = load(compare_opts);
      if (cfg.kind != ExperimentKind::compare) throw ConfigError("compare needs \"experiment\": \"compare\"");
      return run(cfg, compare_opts);
    }
    if (*data_cmd) {
      const ExperimentConfig cfg = load(data_opts);
      write_datasets(cfg, options(data_opts));
      return 0;
    }
    if (*eval_cmd) {
      const ExperimentConfig cfg = load(eval_opts);
      std::size_t arm = cfg.arms.size() - 1;
      if (!arm_label.empty()) {
        arm = cfg.arms.size();
        for (std::size_t k = 0; k < cfg.arms.size(); ++k) {
          if (cfg.arms[k].label == arm_label) arm = k;
        }
        if (arm == cfg.arms.size()) throw ConfigError("no arm labelled '" + arm_label + "'");
      }
      const std::uint64_t seed = cfg.seeds.front();
      const MetricsReport m = evaluate_parameters(cfg, arm, theta_csv, seed);
      std::cout << json{{"seed", seed},
                        {"arm", cfg.arms[arm].label},
                        {"rmse_train", m.rmse_train},
                        {"rmse_test", m.rmse_test},
                        {"max_violation", m.max_violation},
                        {"mean_violation", m.mean_violation}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*plot_cmd) {
      PlotLabels labels;
      labels.title = title;
      labels.x = xlabel;
      labels.y = ylabel;
      plot(csv, plot_kind_from_string(kind), svg, labels);
      return 0;
    }
  } catch (const ConfigError& e) {
    return report(e, 2);
  } catch (const std::exception& e) {
    return report(e, 1);
  }
  return 2;
}
