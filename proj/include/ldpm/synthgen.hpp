#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "ldpm/panel.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

/// Description of the nonlinear grouped panel DGP
///   y_{i,t}     = beta_i' Z(x_{i,t})   + eps_{i,t}
///   y^S_{i,t,k} = theta_i' Z(x_{i,t,k}) + eps^S_{i,t,k}
/// with Z(x) = cos(W x + phase) and (eps, eps^S_1..K) equicorrelated.
struct SimConfig {
  int n_units = 30;
  int n_periods = 60;
  int posts_per_period = 10;
  int embed_dim = 64;
  int feature_dim = 16;
  int n_groups = 3;
  /// Optional explicit unit -> group map (0-based); empty means near-equal
  /// contiguous blocks.
  std::vector<int> group_assignment;
  double rho = 0.5;
  double coefficient_scale = 1.0;
  /// Redraw centers until every pair is at least this many coefficient_scale
  /// units apart (0 disables the constraint).
  double min_center_separation = 0.0;
  /// Standard deviation of each embedding coordinate; <= 0 selects 1/sqrt(p).
  double embed_scale = 0.0;
  /// Share of day-level embedding variance common to all days of a month.
  double month_embedding_share = 0.0;
  /// Surrogate coefficients equal the target coefficients (w^S_k = w_k).
  bool surrogate_tracks_target = false;
  /// Multiplier on the error block; 0 gives a noiseless panel.
  double noise_scale = 1.0;
  /// Number of lagged outcomes stored as macro covariates z = (y_{t-1}, ..).
  int outcome_lags = 1;
  std::uint64_t seed = 1;

  double effective_embed_scale() const;
  std::vector<int> groups() const;
  /// Throws Config/NotPSD on an invalid description.
  void validate() const;
  std::vector<LagColumn> lag_columns() const;
};

/// Z(x) = cos(W x + phase).
struct RandomFeatureMap {
  Eigen::MatrixXd weight;  // p' x p
  Eigen::VectorXd phase;   // p'

  Eigen::VectorXd operator()(const Eigen::VectorXd& x) const;
};

/// Weights i.i.d. N(0, 1), phases i.i.d. U[0, 2 pi).
RandomFeatureMap gen_feature_map(int embed_dim, int feature_dim, std::uint64_t seed);

Eigen::VectorXd random_features(const RandomFeatureMap& map, const Eigen::VectorXd& x);

struct GroupCoefficients {
  Eigen::MatrixXd centers;            // K0 x p'
  Eigen::MatrixXd surrogate_centers;  // K0 x p'
  Eigen::MatrixXd beta;               // N x p'
  Eigen::MatrixXd theta_s;            // N x p'
};

GroupCoefficients gen_group_coefficients(const SimConfig& cfg, std::uint64_t seed);

struct SimTruth {
  GroupCoefficients coefficients;
  RandomFeatureMap map;
  std::vector<int> groups;
  Eigen::MatrixXd eps;                 // N x T target errors
  std::vector<Eigen::VectorXd> eps_s;  // cell-indexed surrogate errors
  Eigen::MatrixXd signal;              // N x T noiseless beta_i' Z(x_{i,t})
  std::vector<LagColumn> lag_columns;
};

struct Simulation {
  PanelDataset data;
  SimTruth truth;
};

Simulation simulate_panel(const SimConfig& cfg);

}  // namespace ldpm
