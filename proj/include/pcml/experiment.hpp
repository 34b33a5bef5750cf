#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pcml/bench.hpp"

namespace pcml {

/// Config file problems: parse failures carry the 1-based line and column.
class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& what, int line = 0, int column = 0)
      : ValidationError(what), line_(line), column_(column) {}
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

enum class ExperimentKind { train, compare };

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::train;
  std::string problem = "reactor";
  /// Overrides of the problem defaults; unset means the problem's value.
  std::optional<double> noise_sigma;
  std::optional<Index> n_train;
  std::optional<Index> n_test;
  /// One arm for train experiments; ML baseline then PCML for compare.
  std::vector<ArmConfig> arms;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "pcml-out";

  /// Throws ConfigError naming the field and the violated bound.
  void validate() const;
  /// The problem with overrides applied.
  BenchmarkProblem resolved_problem() const;
  Index resolved_train() const;
  Index resolved_test() const;
};

/// Strict JSON: unknown keys and out-of-range values are rejected. Missing
/// fields take their defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved config, every default explicit; parse_config inverts it.
std::string serialize_config(const ExperimentConfig& cfg);

/// Seed precedence: explicit override, then PCML_SEED, then the config.
std::vector<std::uint64_t> resolve_seeds(const ExperimentConfig& cfg, std::optional<std::uint64_t> flag);

struct RunOptions {
  std::filesystem::path out;
  bool force = false;
  int jobs = 0;
};

struct RunSummary {
  int seeds_ok = 0;
  int seeds_failed = 0;
  std::filesystem::path out;
};

/// Runs every seed and writes the artifacts into a temporary sibling of
/// opts.out that replaces it on completion. Throws before doing any work if
/// opts.out exists, is non-empty and force is off.
RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts);

/// Train/test CSVs for every seed.
void write_datasets(const ExperimentConfig& cfg, const RunOptions& opts);

/// Metrics of a stored parameter vector (theta.csv as written by a run).
MetricsReport evaluate_parameters(const ExperimentConfig& cfg, std::size_t arm,
                                  const std::filesystem::path& theta_csv, std::uint64_t seed);

std::string format_double(double v);

}  // namespace pcml
