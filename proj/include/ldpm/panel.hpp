#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ldpm {

/// Day-level observations of one (unit, period) cell. Rows of `embeddings`
/// are days in chronological order; `scores` holds the matching surrogate
/// scores. A cell may be empty (no posts that month).
struct MonthCell {
  Eigen::MatrixXd embeddings;  // K_t x d_x
  Eigen::VectorXd scores;      // K_t

  Eigen::Index n_days() const { return scores.size(); }
};

/// Column of z that carries a lagged outcome: z(i, t, column) = y(i, t - lag).
struct LagColumn {
  int column = 0;
  int lag = 1;

  friend bool operator==(const LagColumn&, const LagColumn&) = default;
};

/// Balanced N x T panel of low-frequency targets with ragged high-frequency
/// text features. Cell (i, t) is stored at flat index i * T + t.
class PanelDataset {
 public:
  PanelDataset() = default;
  PanelDataset(int n_units, int n_periods, int z_dim, int x_dim);

  int n_units() const { return n_units_; }
  int n_periods() const { return n_periods_; }
  int z_dim() const { return z_dim_; }
  int x_dim() const { return x_dim_; }
  Eigen::Index cell_index(int unit, int period) const { return Eigen::Index(unit) * n_periods_ + period; }

  Eigen::MatrixXd& y() { return y_; }
  const Eigen::MatrixXd& y() const { return y_; }
  double y(int unit, int period) const { return y_(unit, period); }

  /// (N*T) x d_z, row = cell_index.
  Eigen::MatrixXd& z() { return z_; }
  const Eigen::MatrixXd& z() const { return z_; }
  auto z_row(int unit, int period) const { return z_.row(cell_index(unit, period)); }

  MonthCell& cell(int unit, int period) { return cells_[cell_index(unit, period)]; }
  const MonthCell& cell(int unit, int period) const { return cells_[cell_index(unit, period)]; }

  std::vector<std::string>& unit_labels() { return unit_labels_; }
  const std::vector<std::string>& unit_labels() const { return unit_labels_; }
  std::vector<std::string>& period_labels() { return period_labels_; }
  const std::vector<std::string>& period_labels() const { return period_labels_; }

  /// Throws on the first violated invariant (shape, finiteness, ragged alignment).
  void validate() const;

 private:
  int n_units_ = 0;
  int n_periods_ = 0;
  int z_dim_ = 0;
  int x_dim_ = 0;
  Eigen::MatrixXd y_;
  Eigen::MatrixXd z_;
  std::vector<MonthCell> cells_;
  std::vector<std::string> unit_labels_;
  std::vector<std::string> period_labels_;
};

/// (raw - 100) / s_i per region, where s_i is the sample standard deviation of
/// that region's (raw - 100) series. Rows are regions, columns periods.
Eigen::MatrixXd normalize_cpi(const Eigen::MatrixXd& raw);

/// Coordinate-wise maximum over the rows of `posts`.
Eigen::VectorXd pool_embeddings(const Eigen::MatrixXd& posts);

double average_scores(std::span<const double> scores);
double average_scores(const Eigen::VectorXd& scores);

/// Max-pooled month-level embedding x_{i,t}.
Eigen::VectorXd month_features(const PanelDataset& ds, int unit, int period);

/// All month-pooled embeddings of `periods`, one row per (unit, period) in
/// unit-major order.
Eigen::MatrixXd month_feature_matrix(const PanelDataset& ds, std::span<const int> periods);

/// Chronological partition. Periods are zero-based here: train = [0, train_end),
/// calibration = [train_end, cal_end), test = [cal_end, cal_end + horizon).
struct ChronoSplit {
  int train_end = 0;
  int cal_end = 0;
  int horizon = 0;
  std::vector<int> train;
  std::vector<int> calibration;
  std::vector<int> test;
};

/// Arguments follow the one-based convention Train=[1..T1], Cal=(T1..T2],
/// Test=(T2..T2+H]; the returned index sets are zero-based.
ChronoSplit chrono_split(int n_periods, int train_end, int cal_end, int horizon);

std::vector<int> period_range(int begin, int end);

/// Recursive multi-step forecasts for periods origin .. origin+horizon-1.
/// `one_step(t, z)` predicts period t from covariates z; every lag column
/// whose source period is at or after `origin` is overwritten with the
/// earlier forecast before the call.
template <typename OneStep>
Eigen::VectorXd recursive_forecast(const PanelDataset& ds, std::span<const LagColumn> lag_columns, int unit,
                                   int origin, int horizon, OneStep&& one_step) {
  Eigen::VectorXd out(horizon);
  for (int s = 0; s < horizon; ++s) {
    const int t = origin + s;
    Eigen::RowVectorXd z = ds.z_row(unit, t);
    for (const auto& lc : lag_columns) {
      const int src = t - lc.lag;
      if (src >= origin) z(lc.column) = out(src - origin);
    }
    out(s) = one_step(t, z);
  }
  return out;
}

/// Reads `panel.csv` and `posts.csv` from `dir`. Posts are aggregated to days
/// (max-pooled embeddings, averaged scores) in ascending day order.
PanelDataset load_dataset(const std::filesystem::path& dir);

/// Writes one post per stored day.
void save_dataset(const PanelDataset& ds, const std::filesystem::path& dir);

}  // namespace ldpm
