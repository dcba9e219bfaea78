#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ldpm/deep_panel.hpp"
#include "ldpm/surrogate.hpp"
#include "ldpm/synthgen.hpp"

namespace ldpm {

/// Estimator settings shared by every replication.
struct PipelineOptions {
  SurrogateOptions surrogate;
  DeepPanelOptions deep;
  /// Embedding rank of LPM-E.
  int lpm_rank = 20;
};

/// Forecast window for horizon H on a T-period panel: fit on [0, T-H-1),
/// forecast recursively from T-H-1 and score the final H periods.
struct ForecastWindow {
  int train_end = 0;
  int origin = 0;
  int steps = 0;
  int first_scored = 0;
};

ForecastWindow forecast_window(int n_periods, int horizon);

struct PipelineResult {
  std::map<std::string, double> pmse;
  /// Adjusted Rand index of the LDPM assignment against the simulated groups
  /// (only set when LDPM ran).
  double group_ari = 0.0;
};

/// Methods: "LPM", "LPM-E", "LDPM", and "oracle" (truth as prediction).
PipelineResult run_pipeline(const Simulation& sim, int horizon, const std::vector<std::string>& methods,
                            const PipelineOptions& options, std::uint64_t seed);

struct ComparisonConfig {
  SimConfig sim;
  PipelineOptions pipeline;
  std::vector<std::string> methods = {"LPM", "LPM-E", "LDPM"};
  std::vector<int> horizons = {8};
  std::vector<double> rhos = {0.5};
  int n_reps = 50;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct PmseCell {
  std::string method;
  int horizon = 0;
  double rho = 0.0;
  double mean = 0.0;
  double std_error = 0.0;
  int n_reps = 0;
  /// Per-replication PMSE; replication r uses the same simulation seed at
  /// every rho and horizon.
  std::vector<double> values;
  std::vector<double> group_ari;
};

struct PmseTable {
  std::vector<PmseCell> cells;

  const PmseCell& at(const std::string& method, int horizon, double rho) const;
};

/// Seed of replication `rep` (shared across the rho grid).
std::uint64_t replication_seed(std::uint64_t root, int rep);

PmseTable run_comparison(const ComparisonConfig& config);

double mean(const std::vector<double>& v);
/// Standard error of the mean, sample standard deviation over sqrt(n).
double standard_error(const std::vector<double>& v);
/// Standard error of mean(a - b) for paired replications.
double paired_standard_error(const std::vector<double>& a, const std::vector<double>& b);

/// pmse_table.csv: method, horizon, rho, mean, stderr, n_reps.
void write_pmse_csv(const PmseTable& table, const std::filesystem::path& path);
/// Markdown table per rho: one row per method, one column per horizon plus the average.
void write_summary_md(const PmseTable& table, const std::filesystem::path& path);

}  // namespace ldpm
