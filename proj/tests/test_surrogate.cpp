#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "ldpm/surrogate.hpp"
#include "ldpm/synthgen.hpp"

using namespace ldpm;

namespace {

// Hand-built model: zero net or a linear read-out of one input, identity scaling.
SurrogateModel linear_model(int dx, int n_lags, int pick) {
  SurrogateModel m;
  m.n_lags = n_lags;
  m.net = FeedForwardNet({LayerShape{dx + n_lags, 1, Activation::Identity}});
  if (pick >= 0) m.net.weight(0)(0, pick) = 1.0;
  m.input_location = Eigen::VectorXd::Zero(dx + n_lags);
  m.input_scale = Eigen::VectorXd::Ones(dx + n_lags);
  return m;
}

SurrogateOptions quick_options(int n_lags) {
  SurrogateOptions o;
  o.n_lags = n_lags;
  o.training.max_epochs = 150;
  o.training.adam.learning_rate = 3e-3;
  return o;
}

double variance(const Eigen::VectorXd& v) { return (v.array() - v.mean()).square().mean(); }

Eigen::VectorXd stack(const std::vector<Eigen::VectorXd>& parts) {
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Eigen::VectorXd out(n);
  n = 0;
  for (const auto& p : parts) {
    out.segment(n, p.size()) = p;
    n += p.size();
  }
  return out;
}

}  // namespace

TEST_CASE("surrogate_inputs carry lagged scores across month boundaries") {
  auto ds = testing::random_panel(1, 2, 3, 2, 1);
  const auto in = surrogate_inputs(ds, 0, 2, std::vector<int>{1});
  CHECK(in.cols() == 3);
  CHECK(in(2, 0) == ds.cell(0, 0).scores(2));
  CHECK(in(3, 0) == ds.cell(0, 0).scores(1));
  CHECK(in(2, 1) == ds.cell(0, 1).scores(0));
  const auto first = surrogate_inputs(ds, 0, 2, std::vector<int>{0});
  CHECK(first(2, 0) == 0.0);
  CHECK(first(3, 1) == 0.0);
}

TEST_CASE("constant surrogate series leaves near-zero residuals") {
  auto ds = testing::random_panel(1, 12, 8, 4, 2);
  for (int t = 0; t < 12; ++t) ds.cell(0, t).scores.setConstant(0.7);
  const auto periods = period_range(0, 12);
  const auto model = fit_surrogate(ds, 0, periods, quick_options(3), 5);
  for (const auto& r : residuals(model, ds, 0, periods)) CHECK(r.cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("noiseless surrogate beats a mean-only predictor") {
  SimConfig cfg;
  cfg.n_units = 1;
  cfg.n_groups = 1;
  cfg.n_periods = 40;
  cfg.posts_per_period = 10;
  cfg.embed_dim = 8;
  cfg.feature_dim = 4;
  cfg.noise_scale = 0.0;
  const auto sim = simulate_panel(cfg);
  const auto train = period_range(0, 30);
  const auto test = period_range(30, 40);
  const auto model = fit_surrogate(sim.data, 0, train, quick_options(0), 3);
  const Eigen::VectorXd r = stack(residuals(model, sim.data, 0, test));
  double train_mean = 0.0;
  int n = 0;
  for (int t : train) {
    train_mean += sim.data.cell(0, t).scores.sum();
    n += int(sim.data.cell(0, t).n_days());
  }
  train_mean /= n;
  double mean_only = 0.0;
  for (int t : test) mean_only += (sim.data.cell(0, t).scores.array() - train_mean).square().sum();
  mean_only /= double(r.size());
  CHECK(r.squaredNorm() / double(r.size()) < 0.5 * mean_only);
}

TEST_CASE("uninformative lags leave the residual variance near the raw variance") {
  auto ds = testing::random_panel(1, 60, 10, 2, 7);  // i.i.d. scores, noise embeddings
  const auto train = period_range(0, 40);
  const auto test = period_range(40, 60);
  const auto model = fit_surrogate(ds, 0, train, quick_options(5), 1);
  const Eigen::VectorXd r = stack(residuals(model, ds, 0, test));
  Eigen::VectorXd raw(r.size());
  Eigen::Index k = 0;
  for (int t : test) {
    raw.segment(k, 10) = ds.cell(0, t).scores;
    k += 10;
  }
  const double ratio = variance(r) / variance(raw);
  CHECK(ratio > 0.9);
  CHECK(ratio < 1.3);
}

TEST_CASE("residuals of hand-built models") {
  auto ds = testing::random_panel(1, 3, 4, 3, 9);
  for (int t = 0; t < 3; ++t) ds.cell(0, t).scores = ds.cell(0, t).embeddings.col(1);
  const auto periods = period_range(0, 3);
  for (const auto& r : residuals(linear_model(3, 2, 1), ds, 0, periods)) CHECK(r.cwiseAbs().maxCoeff() == 0.0);
  const auto zero = residuals(linear_model(3, 2, -1), ds, 0, periods);
  for (int t = 0; t < 3; ++t) CHECK(zero[std::size_t(t)] == ds.cell(0, t).scores);
}

TEST_CASE("training residuals are centered after fitting") {
  SimConfig cfg;
  cfg.n_units = 2;
  cfg.n_groups = 1;
  cfg.n_periods = 30;
  cfg.embed_dim = 8;
  cfg.feature_dim = 4;
  const auto sim = simulate_panel(cfg);
  const auto train = period_range(0, 30);
  auto opts = quick_options(3);
  opts.training.validation_fraction = 0.0;
  opts.training.max_epochs = 300;
  const auto model = fit_surrogate(sim.data, 1, train, opts, 2);
  CHECK(std::abs(stack(residuals(model, sim.data, 1, train)).mean()) < 0.02);
}

TEST_CASE("residual_features") {
  const auto f = residual_features(Eigen::Vector2d(0.2, -0.2));
  CHECK(std::abs(f(0)) < 1e-15);
  CHECK(f(1) == doctest::Approx(0.2).epsilon(1e-14));  // sqrt((0.04 + 0.04) / 2)
  CHECK(std::abs(f(2)) < 1e-15);
  CHECK(residual_features(Eigen::VectorXd(0)) == Eigen::Vector3d::Zero());
  const auto c = residual_features(Eigen::VectorXd::Constant(7, -1.25));
  CHECK(c(0) == doctest::Approx(-1.25));
  CHECK(std::abs(c(1)) < 1e-15);
  CHECK(c(2) == doctest::Approx(-1.25));
  Eigen::VectorXd seven(7);
  seven << 1, 2, 3, 4, 5, 6, 7;
  CHECK(residual_features(seven)(2) == doctest::Approx(5.0));  // last five days: 3..7
}

TEST_CASE("forecast_residuals") {
  auto ds = testing::random_panel(1, 6, 5, 3, 4);
  ds.cell(0, 5) = ds.cell(0, 2);
  const auto train = period_range(0, 5);
  const auto model = fit_surrogate(ds, 0, train, quick_options(0), 1);
  const auto fut = forecast_residuals(model, ds, 0, std::vector<int>{5});
  const auto past = forecast_residuals(model, ds, 0, std::vector<int>{2});
  CHECK((fut - past).cwiseAbs().maxCoeff() < 1e-12);

  const auto raw = forecast_residuals(linear_model(3, 0, -1), ds, 0, std::vector<int>{4});
  CHECK((raw.row(0).transpose() - residual_features(ds.cell(0, 4).scores)).cwiseAbs().maxCoeff() < 1e-15);

  ds.cell(0, 4).embeddings.resize(0, 3);
  ds.cell(0, 4).scores.resize(0);
  CHECK(forecast_residuals(model, ds, 0, std::vector<int>{4}).isZero(0.0));
}

TEST_CASE("fit_stage1 is reproducible and independent of the worker count") {
  const auto ds = testing::random_panel(3, 8, 4, 3, 6);
  const auto train = period_range(0, 6);
  auto opts = quick_options(2);
  opts.training.max_epochs = 20;
  const auto a = fit_stage1(ds, train, opts, 11, 1);
  const auto b = fit_stage1(ds, train, opts, 11, 3);
  CHECK(a.residuals.features == b.residuals.features);
}

TEST_CASE("residuals csv round trip") {
  const auto ds = testing::random_panel(2, 3, 4, 2, 8);
  auto opts = quick_options(1);
  opts.training.max_epochs = 5;
  const auto s1 = fit_stage1(ds, period_range(0, 3), opts, 1);
  const auto dir = testing::scratch_dir("residuals");
  write_residuals_csv(ds, s1.residuals, dir / "residuals.csv");
  const auto back = read_residuals_csv(ds, dir / "residuals.csv");
  CHECK(back.features == s1.residuals.features);
  for (std::size_t k = 0; k < back.eps_s.size(); ++k) CHECK(back.eps_s[k] == s1.residuals.eps_s[k]);
}
