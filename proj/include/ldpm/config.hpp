#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldpm/evaluation.hpp"

namespace ldpm {

/// One-based window: training [1..train_end], calibration (train_end..cal_end],
/// test (cal_end..cal_end+horizon].
struct SplitConfig {
  int train_end = 0;
  int cal_end = 0;
  int horizon = 0;
};

struct EvaluationConfig {
  std::vector<std::string> methods = {"LPM", "LPM-E", "LDPM"};
  std::vector<int> horizons = {8};
  std::vector<double> rhos = {0.5};
  int n_reps = 50;
};

struct DiagnoseConfig {
  int n_inputs = 1000;
  int grad_cells = 8;
};

/// Everything a subcommand may need, parsed from a single JSON document.
struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "out";
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> model_dir;
  /// z columns holding lagged outcomes ({"column": 1-based, "lag": L}). When
  /// absent, `fit` reads them from truth.json next to the data, if present.
  std::optional<std::vector<LagColumn>> lag_columns;
  SimConfig simulation;
  std::optional<SplitConfig> split;
  PipelineOptions pipeline;
  EvaluationConfig evaluation;
  double alpha = 0.1;
  DiagnoseConfig diagnose;
  int threads = 0;  // 0: LDPM_THREADS or 1
};

/// Parses `text` (named `source` in messages). Unknown keys, wrong types and
/// malformed JSON raise Config errors of the form "source:LINE: message".
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);

nlohmann::json to_json(const SimConfig& cfg);

}  // namespace ldpm
