#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "ldpm/mlp.hpp"
#include "ldpm/panel.hpp"
#include "ldpm/surrogate.hpp"

namespace ldpm {

struct DeepPanelOptions {
  std::vector<int> hidden = {64, 16};
  Activation interior_activation = Activation::Relu;
  Activation final_activation = Activation::Sigmoid;
  int n_groups = 3;
  double lambda = 0.5;
  int batch_size = 64;
  AdamOptions adam{5e-4};
  /// Step size for heads and centers (the backbone uses adam.learning_rate).
  double head_learning_rate = 1e-2;
  int warmup_epochs = 100;
  int max_epochs = 150;
  int lambda_ramp_epochs = 10;
  int patience = 30;
  /// Trailing periods of the training window held out for early stopping.
  int val_periods = 4;
  int kmeans_iterations = 100;
  /// Independent k-means++ seedings; the lowest within-cluster sum of squares wins.
  int kmeans_restarts = 20;
  /// Rounds of post-refit reassignment by within-unit squared error, each
  /// followed by another refit; stops early once the assignment is stable.
  int reassign_iterations = 10;
  /// Abort when the training loss exceeds this multiple of its initial value.
  double divergence_factor = 1e6;
  std::vector<LagColumn> lag_columns;
};

nlohmann::json to_json(const DeepPanelOptions& options);
DeepPanelOptions deep_panel_options_from_json(const nlohmann::json& j);

/// Per-coordinate affine standardization (v - location) / scale.
struct Normalization {
  Eigen::VectorXd location;
  Eigen::VectorXd scale;

  static Normalization identity(Eigen::Index dim);
  /// Column statistics of `samples` (one sample per column); zero spreads map to 1.
  static Normalization fit(const Eigen::MatrixXd& samples);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& samples) const;
};

/// Shared backbone h, per-unit heads (beta_i, b_i), group centers (eta_k, phi_k)
/// and the unit -> group assignment. Heads and centers are stored as rows
/// [beta' b] of width d_h + 1 and act on the normalized hidden representation.
struct DeepPanelModel {
  FeedForwardNet backbone;
  Normalization input_norm;
  Normalization hidden_norm;
  Eigen::MatrixXd heads;    // N x (d_h + 1)
  Eigen::MatrixXd centers;  // K0 x (d_h + 1)
  std::vector<int> assignment;
  double lambda = 0.0;
  std::vector<LagColumn> lag_columns;
  DeepPanelOptions options;
  std::uint64_t seed = 0;

  int hidden_dim() const { return backbone.output_dim(); }
  int n_units() const { return int(heads.rows()); }
  int n_groups() const { return int(centers.rows()); }

  /// Normalized hidden representation of raw backbone inputs (one per column).
  Eigen::MatrixXd hidden(const Eigen::MatrixXd& raw_inputs) const;
  /// Prediction of `unit` through its own head.
  Eigen::VectorXd predict_with_heads(std::span<const int> units, const Eigen::MatrixXd& raw_inputs) const;
  /// Prediction of `unit` through the center of its assigned group.
  Eigen::VectorXd predict_with_centers(std::span<const int> units, const Eigen::MatrixXd& raw_inputs) const;
};

/// Backbone input [x_{i,t} | z_{i,t} | residual features] of one cell.
Eigen::VectorXd cell_input(const PanelDataset& ds, const ResidualPanel& features, int unit, int period);

/// Cells of all units over `periods` in unit-major order.
struct CellBatch {
  Eigen::MatrixXd inputs;  // raw, one column per cell
  std::vector<int> units;
  std::vector<int> periods;
  Eigen::VectorXd targets;

  Eigen::Index size() const { return targets.size(); }
};

CellBatch build_cells(const PanelDataset& ds, const ResidualPanel& features, std::span<const int> periods);

struct DeepPanelGradient {
  Eigen::VectorXd backbone;
  Eigen::MatrixXd heads;
  Eigen::MatrixXd centers;
};

/// Min-distance penalty (lambda / N) sum_i min_k ||center_k - head_i||.
double min_distance_penalty(const Eigen::MatrixXd& heads, const Eigen::MatrixXd& centers, double lambda,
                            DeepPanelGradient* grad = nullptr);

/// Product penalty (lambda / N) sum_i prod_k ||center_k - head_i||, for reporting.
double product_penalty(const Eigen::MatrixXd& heads, const Eigen::MatrixXd& centers, double lambda);

/// Batch MSE of y - beta_i' h~ - b_i plus the min-distance penalty. `cells`
/// indexes columns of `batch`; gradients (if requested) are overwritten.
double penalized_loss(const DeepPanelModel& model, const CellBatch& batch, std::span<const Eigen::Index> cells,
                      double lambda, DeepPanelGradient* grad = nullptr);
double penalized_loss(const DeepPanelModel& model, const CellBatch& batch, double lambda);

/// Flat view [backbone | heads | centers] used by gradient checks.
Eigen::VectorXd pack_parameters(const DeepPanelModel& model);
void unpack_parameters(DeepPanelModel& model, const Eigen::VectorXd& flat);
Eigen::VectorXd pack_gradient(const DeepPanelGradient& grad);

/// argmin_k ||center_k - head_i|| per unit, ties to the lowest k.
std::vector<int> assign_groups(const DeepPanelModel& model);
std::vector<int> assign_groups(const Eigen::MatrixXd& heads, const Eigen::MatrixXd& centers);

/// k-means++ seeding followed by Lloyd iterations on the rows of `points`,
/// repeated `restarts` times; returns the centers with the lowest inertia.
Eigen::MatrixXd kmeans_centers(const Eigen::MatrixXd& points, int k, int iterations, std::uint64_t seed,
                               int restarts = 1);

/// Sum over rows of the squared distance to the nearest center.
double kmeans_inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers);

struct RefitReport {
  std::vector<bool> used_fallback;
  std::vector<int> group_cells;
};

/// Per-group least squares of y on [h~, 1] with a frozen backbone; every head
/// becomes its group's refitted center.
RefitReport refit_centers(DeepPanelModel& model, const CellBatch& cells);

/// argmin_k of unit i's summed squared error under center k (ties to the lowest k).
std::vector<int> reassign_by_fit(const DeepPanelModel& model, const CellBatch& cells);

struct TrainReport {
  std::vector<double> loss;
  double final_penalty = 0.0;
  double final_product_penalty = 0.0;
  std::vector<int> group_sizes;
  int epochs_run = 0;
  double validation_pmse = 0.0;
  bool refit_used_fallback = false;
  int reassign_rounds = 0;
  /// Heads at the end of the penalized phase, before the refit replaces them.
  Eigen::MatrixXd penalized_heads;
  Eigen::MatrixXd penalized_centers;
};

nlohmann::json to_json(const TrainReport& report);

struct TrainResult {
  DeepPanelModel model;
  TrainReport report;
};

/// Warmup (lambda = 0), hidden normalization freeze, k-means++ center
/// seeding, joint penalized training with a linear lambda ramp and early
/// stopping on validation PMSE, assignment and debiasing refit.
TrainResult train(const PanelDataset& ds, const ResidualPanel& features, std::span<const int> train_periods,
                  const DeepPanelOptions& options, std::uint64_t seed);

/// Prediction for (unit, period) from observed inputs.
double predict_one_step(const DeepPanelModel& model, const PanelDataset& ds, const ResidualPanel& features, int unit,
                        int period);

/// Recursive forecasts for periods origin, origin+1, ..., origin+h-1 where
/// `origin` is the first unobserved-outcome period: lagged outcomes at or
/// after `origin` are replaced by earlier forecasts.
Eigen::VectorXd predict_h_step(const DeepPanelModel& model, const PanelDataset& ds, const ResidualPanel& features,
                               int unit, int origin, int horizon);

/// Permutes and positively rescales the final hidden units, moving the frozen
/// hidden normalization with them and permuting heads and centers, so every
/// prediction is unchanged. Scaling requires a relu final layer.
DeepPanelModel apply_symmetry(const DeepPanelModel& model, std::span<const int> perm, std::span<const double> scales);

/// Heads expressed on the raw (unnormalized) hidden scale: beta_i / scale.
Eigen::MatrixXd raw_head_slopes(const DeepPanelModel& model);

struct ShortcutGradients {
  double direct = 0.0;    // dL/da at zero init for y ~ f + a y^S
  double residual = 0.0;  // dL/db at zero init for y ~ f + b eps^S
};

/// -mean(y * y^S) and -mean(y * eps^S) for already centered series.
ShortcutGradients shortcut_gradients(std::span<const double> y, std::span<const double> surrogate,
                                     std::span<const double> residual);

/// Panel version over `periods`: monthly mean score and mean Stage-1 residual
/// per cell, each series centered before the gradients are formed.
ShortcutGradients shortcut_diagnostic(const PanelDataset& ds, const ResidualPanel& features,
                                      std::span<const int> periods);

double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

nlohmann::json to_json(const DeepPanelModel& model);
DeepPanelModel model_from_json(const nlohmann::json& j);

}  // namespace ldpm
