#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ldpm {

/// Group-wise split conformal calibration on absolute residuals.
struct ConformalCalibration {
  double alpha = 0.1;
  std::vector<std::vector<double>> scores;  // per group, ascending
  std::vector<int> counts;
  std::vector<double> quantiles;
  /// Set where the rank ceil((m+1)(1-alpha)) exceeded m and the largest score was used.
  std::vector<bool> max_score_fallback;

  int n_groups() const { return int(quantiles.size()); }
};

/// ceil((m+1)(1-alpha))-th smallest of `sorted`; falls back to the maximum
/// (and sets *fallback) when that rank exceeds m.
double conformal_quantile(std::span<const double> sorted, double alpha, bool* fallback = nullptr);

/// `n_groups` < 0 means one more than the largest label. Every group must
/// receive at least one calibration cell.
ConformalCalibration calibrate(std::span<const double> predictions, std::span<const double> truths,
                               std::span<const int> groups, double alpha, int n_groups = -1);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double width() const { return hi - lo; }
  bool contains(double v) const { return lo <= v && v <= hi; }
};

Interval interval(const ConformalCalibration& cal, double prediction, int group);

struct CoverageReport {
  double overall = 0.0;
  std::vector<double> per_group;
  std::vector<int> per_group_count;
};

CoverageReport coverage(std::span<const Interval> intervals, std::span<const double> truths,
                        std::span<const int> groups = {});

/// Each replication calibrates on m i.i.d. N(0,1) residuals and scores
/// `n_test` fresh draws; returns the empirical coverage of every replication.
std::vector<double> coverage_experiment(int m, double alpha, int n_reps, int n_test, std::uint64_t seed);

/// Mean over replications of q_joint / q_target where the two cutoffs come
/// from m half-normal scores with scales sigma_e and sigma_eps.
double length_ratio_experiment(double sigma_eps, double sigma_e, int m, double alpha, int n_reps, std::uint64_t seed);

struct IntervalRow {
  std::string unit;
  std::string period;
  int group = 0;
  double prediction = 0.0;
  Interval bounds;
  double truth = 0.0;
};

/// intervals.csv: unit, period, group, yhat, lo, hi, truth, covered.
void write_intervals_csv(std::span<const IntervalRow> rows, const std::filesystem::path& path);

}  // namespace ldpm
