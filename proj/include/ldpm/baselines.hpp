#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "ldpm/numerics.hpp"
#include "ldpm/panel.hpp"

namespace ldpm {

/// y_{i,t} = alpha_i + slope' f_{i,t} with f = z (LPM) or [z | x V] (LPM-E),
/// estimated by within-unit OLS.
struct LinearPanelModel {
  Eigen::VectorXd intercepts;
  Eigen::VectorXd slopes;
  /// Embedding projection; rank 0 means covariates only.
  EmbeddingReducer<double> reducer;
  std::vector<LagColumn> lag_columns;

  bool uses_embeddings() const { return reducer.rank() > 0; }
  Eigen::VectorXd features(const PanelDataset& ds, int unit, int period, const Eigen::RowVectorXd& z) const;
  double predict(const PanelDataset& ds, int unit, int period) const;
  double predict(const PanelDataset& ds, int unit, int period, const Eigen::RowVectorXd& z) const;
};

LinearPanelModel fit_lpm(const PanelDataset& ds, std::span<const int> train_periods,
                         std::vector<LagColumn> lag_columns = {});

/// Covariates plus the rank-r0 projection of the month-pooled embeddings; the
/// projection is fitted on training cells only.
LinearPanelModel fit_lpm_e(const PanelDataset& ds, int rank, std::span<const int> train_periods,
                           std::vector<LagColumn> lag_columns = {});

/// Recursive forecasts of periods origin .. origin+horizon-1.
Eigen::VectorXd predict_h_step(const LinearPanelModel& model, const PanelDataset& ds, int unit, int origin,
                               int horizon);

/// Mean squared prediction error.
double pmse(std::span<const double> predictions, std::span<const double> truths);

}  // namespace ldpm
