#include "ldpm/synthgen.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "ldpm/error.hpp"
#include "ldpm/numerics.hpp"

namespace ldpm {

double SimConfig::effective_embed_scale() const {
  return embed_scale > 0.0 ? embed_scale : 1.0 / std::sqrt(double(embed_dim));
}

std::vector<int> SimConfig::groups() const {
  if (!group_assignment.empty()) return group_assignment;
  std::vector<int> out(static_cast<std::size_t>(n_units));
  for (int i = 0; i < n_units; ++i) out[std::size_t(i)] = int((long long)i * n_groups / n_units);
  return out;
}

void SimConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Config, "SimConfig: " + msg); };
  if (n_units < 1 || n_periods < 1) fail("n_units and n_periods must be positive");
  if (posts_per_period < 1) fail("posts_per_period must be >= 1");
  if (embed_dim < 1 || feature_dim < 1) fail("embed_dim and feature_dim must be positive");
  if (n_groups < 1 || n_groups > n_units) fail("n_groups must lie in [1, n_units]");
  if (!(coefficient_scale > 0.0)) fail("coefficient_scale must be positive");
  if (!(min_center_separation >= 0.0)) fail("min_center_separation must be nonnegative");
  if (!(month_embedding_share >= 0.0 && month_embedding_share <= 1.0)) fail("month_embedding_share outside [0, 1]");
  if (!(noise_scale >= 0.0)) fail("noise_scale must be nonnegative");
  if (outcome_lags < 0) fail("outcome_lags must be nonnegative");
  if (!group_assignment.empty()) {
    if (int(group_assignment.size()) != n_units) fail("group_assignment must list every unit");
    std::vector<bool> hit(std::size_t(n_groups), false);
    for (int g : group_assignment) {
      if (g < 0 || g >= n_groups) fail("group label outside [0, n_groups)");
      hit[std::size_t(g)] = true;
    }
    for (bool h : hit)
      if (!h) fail("group_assignment must be surjective onto the groups");
  }
  EquiCorrSpec{posts_per_period + 1, rho}.validate();
}

std::vector<LagColumn> SimConfig::lag_columns() const {
  std::vector<LagColumn> out;
  for (int l = 1; l <= outcome_lags; ++l) out.push_back({l - 1, l});
  return out;
}

Eigen::VectorXd RandomFeatureMap::operator()(const Eigen::VectorXd& x) const {
  if (x.size() != weight.cols()) {
    throw Error(ErrorKind::DimMismatch, "random_features: input has dimension " + std::to_string(x.size()) +
                                            ", map expects " + std::to_string(weight.cols()));
  }
  return ((weight * x) + phase).array().cos().matrix();
}

RandomFeatureMap gen_feature_map(int embed_dim, int feature_dim, std::uint64_t seed) {
  if (embed_dim < 1 || feature_dim < 1) throw Error(ErrorKind::DimMismatch, "gen_feature_map: empty map");
  Rng rng(seed);
  RandomFeatureMap map;
  map.weight.resize(feature_dim, embed_dim);
  for (int r = 0; r < feature_dim; ++r)
    for (int c = 0; c < embed_dim; ++c) map.weight(r, c) = rng.normal();
  map.phase.resize(feature_dim);
  for (int r = 0; r < feature_dim; ++r) map.phase(r) = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return map;
}

Eigen::VectorXd random_features(const RandomFeatureMap& map, const Eigen::VectorXd& x) { return map(x); }

namespace {

double min_pairwise_distance(const Eigen::MatrixXd& rows) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < rows.rows(); ++a)
    for (Eigen::Index b = a + 1; b < rows.rows(); ++b) best = std::min(best, (rows.row(a) - rows.row(b)).norm());
  return best;
}

Eigen::MatrixXd draw_centers(int n_groups, int dim, double scale, double min_separation, Rng& rng) {
  constexpr int kMaxAttempts = 10000;
  Eigen::MatrixXd centers(n_groups, dim);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    for (int k = 0; k < n_groups; ++k)
      for (int j = 0; j < dim; ++j) centers(k, j) = scale * rng.normal();
    if (n_groups < 2 || min_pairwise_distance(centers) >= min_separation * scale) return centers;
  }
  throw Error(ErrorKind::Config, "cannot draw group centers with the requested separation");
}

}  // namespace

GroupCoefficients gen_group_coefficients(const SimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  GroupCoefficients out;
  out.centers = draw_centers(cfg.n_groups, cfg.feature_dim, cfg.coefficient_scale, cfg.min_center_separation, rng);
  out.surrogate_centers = cfg.surrogate_tracks_target
                              ? out.centers
                              : draw_centers(cfg.n_groups, cfg.feature_dim, cfg.coefficient_scale,
                                             cfg.min_center_separation, rng);
  const auto groups = cfg.groups();
  out.beta.resize(cfg.n_units, cfg.feature_dim);
  out.theta_s.resize(cfg.n_units, cfg.feature_dim);
  for (int i = 0; i < cfg.n_units; ++i) {
    out.beta.row(i) = out.centers.row(groups[std::size_t(i)]);
    out.theta_s.row(i) = out.surrogate_centers.row(groups[std::size_t(i)]);
  }
  return out;
}

Simulation simulate_panel(const SimConfig& cfg) {
  cfg.validate();
  const int N = cfg.n_units;
  const int T = cfg.n_periods;
  const int K = cfg.posts_per_period;
  const int p = cfg.embed_dim;
  const int burn_in = cfg.outcome_lags;

  Simulation sim;
  SimTruth& truth = sim.truth;
  truth.map = gen_feature_map(p, cfg.feature_dim, derive_seed(cfg.seed, Stream::FeatureMap));
  truth.coefficients = gen_group_coefficients(cfg, derive_seed(cfg.seed, Stream::Centers));
  truth.groups = cfg.groups();
  truth.lag_columns = cfg.lag_columns();
  truth.eps.resize(N, T);
  truth.signal.resize(N, T);
  truth.eps_s.resize(std::size_t(N) * std::size_t(T));

  PanelDataset ds(N, T, cfg.outcome_lags, p);
  const double scale = cfg.effective_embed_scale();
  const double shared = std::sqrt(cfg.month_embedding_share);
  const double idio = std::sqrt(1.0 - cfg.month_embedding_share);
  const Eigen::MatrixXd factor = equicorr_factor(EquiCorrSpec{K + 1, cfg.rho});

  Rng emb_rng(cfg.seed, Stream::Embeddings);
  Rng err_rng(cfg.seed, Stream::Errors);
  Eigen::VectorXd common(p), standard(K + 1);
  Eigen::MatrixXd days(K, p);
  for (int i = 0; i < N; ++i) {
    const Eigen::VectorXd beta = truth.coefficients.beta.row(i).transpose();
    const Eigen::VectorXd theta = truth.coefficients.theta_s.row(i).transpose();
    std::vector<double> outcomes;  // includes burn-in periods
    for (int s = 0; s < T + burn_in; ++s) {
      for (int j = 0; j < p; ++j) common(j) = emb_rng.normal();
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < p; ++j) days(k, j) = scale * (shared * common(j) + idio * emb_rng.normal());
      for (int r = 0; r < K + 1; ++r) standard(r) = err_rng.normal();
      const Eigen::VectorXd errors = cfg.noise_scale * (factor * standard);

      const Eigen::VectorXd pooled = pool_embeddings(days);
      const double signal = beta.dot(truth.map(pooled));
      const double y = signal + errors(0);
      outcomes.push_back(y);
      if (s < burn_in) continue;

      const int t = s - burn_in;
      Eigen::VectorXd scores(K);
      for (int k = 0; k < K; ++k) scores(k) = theta.dot(truth.map(days.row(k).transpose())) + errors(k + 1);
      auto& cell = ds.cell(i, t);
      cell.embeddings = days;
      cell.scores = scores;
      ds.y()(i, t) = y;
      for (int l = 1; l <= cfg.outcome_lags; ++l) ds.z()(ds.cell_index(i, t), l - 1) = outcomes[std::size_t(s - l)];
      truth.eps(i, t) = errors(0);
      truth.signal(i, t) = signal;
      truth.eps_s[std::size_t(ds.cell_index(i, t))] = errors.tail(K);
    }
  }
  sim.data = std::move(ds);
  return sim;
}

}  // namespace ldpm
