#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ldpm/mlp.hpp"
#include "ldpm/panel.hpp"

namespace ldpm {

struct SurrogateOptions {
  int n_lags = 7;
  std::vector<int> hidden = {32, 16};
  RegressionOptions training;
};

/// Per-region high-frequency model G_i(x_{i,t,k}, lagged scores) -> score.
/// Inputs and target are standardized with training statistics.
struct SurrogateModel {
  int region = 0;
  int n_lags = 0;
  FeedForwardNet net;
  Eigen::VectorXd input_location;
  Eigen::VectorXd input_scale;
  double target_location = 0.0;
  double target_scale = 1.0;

  double predict(const Eigen::VectorXd& embedding, const Eigen::VectorXd& lags) const;
  /// One prediction per column of `inputs` ([embedding; lags] stacked).
  Eigen::VectorXd predict_batch(const Eigen::MatrixXd& inputs) const;
};

/// Design matrix (d_x + q) x (days) for a region's days in `periods`. Lags are
/// the preceding q scores of the region's full daily sequence, zero-padded
/// before the first observation.
Eigen::MatrixXd surrogate_inputs(const PanelDataset& ds, int region, int n_lags, std::span<const int> periods);

SurrogateModel fit_surrogate(const PanelDataset& ds, int region, std::span<const int> periods,
                             const SurrogateOptions& options, std::uint64_t seed);

/// y^S - G_i(...) for every day of every requested period.
std::vector<Eigen::VectorXd> residuals(const SurrogateModel& model, const PanelDataset& ds, int region,
                                       std::span<const int> periods);

constexpr int kResidualFeatureDim = 3;

/// [mean, population std, mean of the last 5 days]; zero for an empty month.
Eigen::Vector3d residual_features(const Eigen::VectorXd& month_residuals);

/// Residual features for future periods, one row per period.
Eigen::MatrixXd forecast_residuals(const SurrogateModel& model, const PanelDataset& ds, int region,
                                   std::span<const int> periods);

/// Stage-1 output for the whole panel; both members are cell-indexed.
struct ResidualPanel {
  int n_units = 0;
  int n_periods = 0;
  std::vector<Eigen::VectorXd> eps_s;
  Eigen::MatrixXd features;  // (N*T) x 3

  Eigen::Index cell_index(int unit, int period) const { return Eigen::Index(unit) * n_periods + period; }
  auto feature_row(int unit, int period) const { return features.row(cell_index(unit, period)); }
};

struct Stage1Result {
  std::vector<SurrogateModel> models;
  ResidualPanel residuals;
};

/// Fits every region on `train_periods` and extracts residuals for all periods.
/// Regions are fitted on up to `threads` workers, each with its own RNG stream.
Stage1Result fit_stage1(const PanelDataset& ds, std::span<const int> train_periods, const SurrogateOptions& options,
                        std::uint64_t seed, int threads = 1);

/// residuals.csv: unit, period, day, residual.
void write_residuals_csv(const PanelDataset& ds, const ResidualPanel& panel, const std::filesystem::path& path);

/// Inverse of write_residuals_csv; features are recomputed from the residuals.
/// Every (unit, period) of `ds` must appear with exactly its number of days.
ResidualPanel read_residuals_csv(const PanelDataset& ds, const std::filesystem::path& path);

}  // namespace ldpm
