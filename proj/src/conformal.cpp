#include "ldpm/conformal.hpp"

#include <algorithm>
#include <cmath>

#include "ldpm/csv.hpp"
#include "ldpm/error.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorKind::Config, "alpha must lie in (0, 1)");
}

std::vector<double> sorted_half_normal(Rng& rng, int m, double sigma) {
  std::vector<double> s(static_cast<std::size_t>(m));
  for (double& v : s) v = std::abs(sigma * rng.normal());
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace

double conformal_quantile(std::span<const double> sorted, double alpha, bool* fallback) {
  check_alpha(alpha);
  if (sorted.empty()) throw Error(ErrorKind::EmptyGroup, "conformal_quantile: no scores");
  const auto m = static_cast<long long>(sorted.size());
  // Guard the ceiling against representation error in (m+1)(1-alpha).
  const double exact = double(m + 1) * (1.0 - alpha);
  long long rank = static_cast<long long>(std::ceil(exact - 1e-9 * exact));
  rank = std::max(rank, 1LL);
  const bool over = rank > m;
  if (fallback != nullptr) *fallback = over;
  return over ? sorted.back() : sorted[std::size_t(rank - 1)];
}

ConformalCalibration calibrate(std::span<const double> predictions, std::span<const double> truths,
                               std::span<const int> groups, double alpha, int n_groups) {
  check_alpha(alpha);
  if (predictions.size() != truths.size() || predictions.size() != groups.size()) {
    throw Error(ErrorKind::LengthMismatch, "calibrate: predictions, truths and groups differ in length");
  }
  int k = n_groups;
  if (k < 0) {
    k = 0;
    for (int g : groups) k = std::max(k, g + 1);
  }
  ConformalCalibration cal;
  cal.alpha = alpha;
  cal.scores.assign(std::size_t(k), {});
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c] < 0 || groups[c] >= k) {
      throw Error(ErrorKind::UnknownGroup, "calibrate: group label " + std::to_string(groups[c]) + " out of range");
    }
    cal.scores[std::size_t(groups[c])].push_back(std::abs(truths[c] - predictions[c]));
  }
  for (int g = 0; g < k; ++g) {
    auto& s = cal.scores[std::size_t(g)];
    if (s.empty()) throw Error(ErrorKind::EmptyGroup, "calibrate: group " + std::to_string(g) + " has no cells");
    std::sort(s.begin(), s.end());
    bool fallback = false;
    cal.quantiles.push_back(conformal_quantile(s, alpha, &fallback));
    cal.counts.push_back(int(s.size()));
    cal.max_score_fallback.push_back(fallback);
  }
  return cal;
}

Interval interval(const ConformalCalibration& cal, double prediction, int group) {
  if (group < 0 || group >= cal.n_groups()) {
    throw Error(ErrorKind::UnknownGroup, "interval: group " + std::to_string(group) + " was not calibrated");
  }
  const double q = cal.quantiles[std::size_t(group)];
  return {prediction - q, prediction + q};
}

CoverageReport coverage(std::span<const Interval> intervals, std::span<const double> truths,
                        std::span<const int> groups) {
  if (intervals.size() != truths.size() || (!groups.empty() && groups.size() != truths.size())) {
    throw Error(ErrorKind::LengthMismatch, "coverage: intervals, truths and groups differ in length");
  }
  if (truths.empty()) throw Error(ErrorKind::EmptyInput, "coverage: nothing to evaluate");
  CoverageReport r;
  std::vector<int> hits;
  long long covered = 0;
  for (std::size_t c = 0; c < truths.size(); ++c) {
    const bool in = intervals[c].contains(truths[c]);
    covered += in;
    if (groups.empty()) continue;
    const int g = groups[c];
    if (g < 0) throw Error(ErrorKind::UnknownGroup, "coverage: negative group label");
    if (std::size_t(g) >= hits.size()) {
      hits.resize(std::size_t(g) + 1, 0);
      r.per_group_count.resize(std::size_t(g) + 1, 0);
    }
    hits[std::size_t(g)] += in;
    ++r.per_group_count[std::size_t(g)];
  }
  r.overall = double(covered) / double(truths.size());
  for (std::size_t g = 0; g < hits.size(); ++g) {
    r.per_group.push_back(r.per_group_count[g] > 0 ? double(hits[g]) / r.per_group_count[g] : 0.0);
  }
  return r;
}

std::vector<double> coverage_experiment(int m, double alpha, int n_reps, int n_test, std::uint64_t seed) {
  if (m < 1 || n_reps < 1 || n_test < 1) throw Error(ErrorKind::Config, "coverage_experiment: sizes must be >= 1");
  std::vector<double> out;
  out.reserve(std::size_t(n_reps));
  for (int rep = 0; rep < n_reps; ++rep) {
    Rng rng(seed, Stream::Replication, std::uint64_t(rep));
    const auto scores = sorted_half_normal(rng, m, 1.0);
    const double q = conformal_quantile(scores, alpha);
    int hit = 0;
    for (int j = 0; j < n_test; ++j) hit += std::abs(rng.normal()) <= q;
    out.push_back(double(hit) / double(n_test));
  }
  return out;
}

double length_ratio_experiment(double sigma_eps, double sigma_e, int m, double alpha, int n_reps, std::uint64_t seed) {
  if (!(sigma_e > 0.0) || !(sigma_e <= sigma_eps)) {
    throw Error(ErrorKind::BadSigma, "length_ratio_experiment: need 0 < sigma_e <= sigma_eps");
  }
  if (m < 1 || n_reps < 1) throw Error(ErrorKind::Config, "length_ratio_experiment: sizes must be >= 1");
  double total = 0.0;
  for (int rep = 0; rep < n_reps; ++rep) {
    Rng rng(seed, Stream::Replication, std::uint64_t(rep));
    const double q_target = conformal_quantile(sorted_half_normal(rng, m, sigma_eps), alpha);
    const double q_joint = conformal_quantile(sorted_half_normal(rng, m, sigma_e), alpha);
    total += q_joint / q_target;
  }
  return total / double(n_reps);
}

void write_intervals_csv(std::span<const IntervalRow> rows, const std::filesystem::path& path) {
  csv::Writer w(path);
  for (const char* h : {"unit", "period", "group", "yhat", "lo", "hi", "truth", "covered"}) w.field(h);
  w.end_row();
  for (const auto& r : rows) {
    w.field(r.unit).field(r.period).field(r.group + 1).field(r.prediction);
    w.field(r.bounds.lo).field(r.bounds.hi).field(r.truth).field(r.bounds.contains(r.truth) ? 1 : 0);
    w.end_row();
  }
}

}  // namespace ldpm
