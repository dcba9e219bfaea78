#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "ldpm/deep_panel.hpp"
#include "ldpm/error.hpp"

using namespace ldpm;

namespace {

// Single-layer backbone with identity normalizations.
DeepPanelModel hand_model(int d_in, int dh, Activation act, int n_units, int n_groups) {
  DeepPanelModel m;
  m.backbone = FeedForwardNet({LayerShape{d_in, dh, act}});
  m.input_norm = Normalization::identity(d_in);
  m.hidden_norm = Normalization::identity(dh);
  m.heads = Eigen::MatrixXd::Zero(n_units, dh + 1);
  m.centers = Eigen::MatrixXd::Zero(n_groups, dh + 1);
  return m;
}

ResidualPanel zero_features(const PanelDataset& ds) {
  ResidualPanel r;
  r.n_units = ds.n_units();
  r.n_periods = ds.n_periods();
  r.features = Eigen::MatrixXd::Zero(Eigen::Index(ds.n_units()) * ds.n_periods(), kResidualFeatureDim);
  for (int i = 0; i < ds.n_units(); ++i)
    for (int t = 0; t < ds.n_periods(); ++t) r.eps_s.push_back(Eigen::VectorXd::Zero(ds.cell(i, t).n_days()));
  return r;
}

// Pair-counting adjusted Rand index.
double ari_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size();
  double both = 0, in_a = 0, in_b = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      in_a += sa;
      in_b += sb;
    }
  const double pairs = double(n) * double(n - 1) / 2.0;
  const double expected = in_a * in_b / pairs;
  const double top = 0.5 * (in_a + in_b);
  return top == expected ? 1.0 : (both - expected) / (top - expected);
}

// Panel whose outcome is a group-specific linear function of one exogenous covariate.
PanelDataset linear_panel(int n, int t, std::uint64_t seed) {
  Rng rng(seed);
  PanelDataset ds(n, t, 1, 3);
  for (int i = 0; i < n; ++i) {
    const double slope = i % 2 == 0 ? 1.0 : -0.5;
    const double offset = i % 2 == 0 ? 0.5 : -1.0;
    for (int p = 0; p < t; ++p) {
      const double u = rng.normal();
      ds.z()(ds.cell_index(i, p), 0) = u;
      ds.y()(i, p) = slope * u + offset;
      auto& cell = ds.cell(i, p);
      cell.embeddings.resize(3, 3);
      for (Eigen::Index k = 0; k < 9; ++k) cell.embeddings.data()[k] = rng.normal();
      cell.scores = Eigen::Vector3d::Zero();
    }
  }
  return ds;
}

DeepPanelOptions fast_options(int groups) {
  DeepPanelOptions o;
  o.n_groups = groups;
  o.warmup_epochs = 60;
  o.max_epochs = 60;
  o.kmeans_restarts = 5;
  return o;
}

}  // namespace

TEST_CASE("min-distance penalty") {
  Eigen::MatrixXd heads(2, 2), centers(1, 2);
  heads << 1, 0, 0, 2;
  centers << 0, 0;
  CHECK(min_distance_penalty(heads, centers, 2.0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(product_penalty(heads, centers, 2.0) == doctest::Approx(3.0).epsilon(1e-15));
  Eigen::MatrixXd two(2, 2);
  two << 1, 0, 0, 2;
  CHECK(min_distance_penalty(heads, two, 5.0) == 0.0);
}

TEST_CASE("penalized_loss combines the batch MSE and the penalty") {
  auto m = hand_model(2, 2, Activation::Identity, 2, 1);
  m.backbone.weight(0) = Eigen::Matrix2d::Identity();
  m.heads << 1, 0, 0.5, 0, 2, -0.5;
  m.centers << 0, 0, 0.5;  // distances 1 and sqrt(4 + 1)
  CellBatch b;
  b.inputs = testing::gaussian(2, 6, 3);
  b.units = {0, 1, 0, 1, 0, 1};
  b.periods = {0, 0, 1, 1, 2, 2};
  b.targets = testing::gaussian(6, 1, 4);
  const Eigen::VectorXd pred = m.predict_with_heads(b.units, b.inputs);
  const double mse = (pred - b.targets).squaredNorm() / 6.0;
  CHECK(penalized_loss(m, b, 0.0) == doctest::Approx(mse).epsilon(1e-14));
  const double pen = (2.0 / 2.0) * (1.0 + std::sqrt(5.0));
  CHECK(penalized_loss(m, b, 2.0) == doctest::Approx(mse + pen).epsilon(1e-14));
}

TEST_CASE("penalized_loss gradient agrees with central differences") {
  Rng rng(5);
  auto m = hand_model(4, 3, Activation::Sigmoid, 3, 2);
  for (Eigen::Index k = 0; k < m.backbone.n_params(); ++k) m.backbone.params()(k) = rng.normal();
  m.heads = testing::gaussian(3, 4, 6);
  m.centers = testing::gaussian(2, 4, 7);
  m.hidden_norm.location = Eigen::Vector3d(0.4, 0.5, 0.6);
  m.hidden_norm.scale = Eigen::Vector3d(0.2, 0.3, 0.25);
  CellBatch b;
  b.inputs = testing::gaussian(4, 9, 8);
  b.units = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  b.periods.assign(9, 0);
  b.targets = testing::gaussian(9, 1, 9);
  std::vector<Eigen::Index> cells(9);
  std::iota(cells.begin(), cells.end(), 0);
  auto probe = m;
  const Objective f = [&](const Eigen::VectorXd& p, Eigen::VectorXd* g) {
    unpack_parameters(probe, p);
    if (!g) return penalized_loss(probe, b, cells, 0.7);
    DeepPanelGradient grad;
    const double l = penalized_loss(probe, b, cells, 0.7, &grad);
    *g = pack_gradient(grad);
    return l;
  };
  CHECK(max_relative_gradient_error(f, pack_parameters(m)) < 1e-5);
}

TEST_CASE("assign_groups") {
  Eigen::MatrixXd centers(3, 2), heads(3, 2);
  centers << 0, 0, 5, 5, -5, 5;
  heads << 5, 5, 2.5, 2.5, -3, 4.5;
  const auto g = assign_groups(heads, centers);
  CHECK(g[0] == 1);  // equal to the second center
  CHECK(g[1] == 0);  // equidistant from centers 0 and 1: lowest index
  CHECK(g[2] == 2);

  const Eigen::MatrixXd h = testing::gaussian(40, 3, 1), c = testing::gaussian(4, 3, 2);
  const auto fast = assign_groups(h, c);
  for (int i = 0; i < 40; ++i) {
    int best = 0;
    double bd = INFINITY;
    for (int k = 0; k < 4; ++k) {
      const double d = (h.row(i) - c.row(k)).norm();
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    CHECK(fast[std::size_t(i)] == best);
  }
}

TEST_CASE("refit_centers") {
  SUBCASE("single cell, one hidden unit") {
    auto m = hand_model(1, 1, Activation::Identity, 1, 1);
    m.backbone.weight(0)(0, 0) = 1.0;
    m.assignment = {0};
    CellBatch b;
    b.inputs = Eigen::MatrixXd::Constant(1, 1, 2.0);
    b.units = {0};
    b.periods = {0};
    b.targets = Eigen::VectorXd::Constant(1, 3.5);
    refit_centers(m, b);
    CHECK(m.predict_with_centers(b.units, b.inputs)(0) == doctest::Approx(3.5).epsilon(1e-9));
  }
  SUBCASE("noiseless linear groups") {
    auto m = hand_model(3, 3, Activation::Identity, 4, 2);
    m.backbone.weight(0) = Eigen::Matrix3d::Identity();
    m.assignment = {0, 1, 0, 1};
    const Eigen::Vector3d a0(1, -2, 0.5), a1(-1, 0.3, 2);
    CellBatch b;
    b.inputs = testing::gaussian(3, 40, 3);
    b.targets.resize(40);
    for (int c = 0; c < 40; ++c) {
      b.units.push_back(c % 4);
      b.periods.push_back(c / 4);
      b.targets(c) = c % 2 == 0 ? a0.dot(b.inputs.col(c)) + 0.7 : a1.dot(b.inputs.col(c)) - 1.2;
    }
    refit_centers(m, b);
    CHECK((m.centers.row(0).head(3).transpose() - a0).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(m.centers(0, 3) - 0.7) < 1e-6);
    CHECK((m.centers.row(1).head(3).transpose() - a1).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(m.centers(1, 3) + 1.2) < 1e-6);
    CHECK(m.heads.row(2) == m.centers.row(0));
  }
  SUBCASE("never increases the in-group training MSE") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      auto m = hand_model(3, 2, Activation::Sigmoid, 6, 2);
      m.backbone.params() = testing::gaussian(m.backbone.n_params(), 1, s);
      m.centers = testing::gaussian(2, 3, s + 100);
      m.assignment = {0, 0, 0, 1, 1, 1};
      CellBatch b;
      b.inputs = testing::gaussian(3, 30, s + 200);
      b.targets = testing::gaussian(30, 1, s + 300);
      for (int c = 0; c < 30; ++c) {
        b.units.push_back(c % 6);
        b.periods.push_back(c / 6);
      }
      const double before = (m.predict_with_centers(b.units, b.inputs) - b.targets).squaredNorm();
      refit_centers(m, b);
      const double after = (m.predict_with_centers(b.units, b.inputs) - b.targets).squaredNorm();
      CHECK(after <= before + 1e-12);
    }
  }
}

TEST_CASE("reassign_by_fit picks the center with the lowest squared error") {
  auto m = hand_model(1, 1, Activation::Identity, 2, 2);
  m.backbone.weight(0)(0, 0) = 1.0;
  m.centers << 1, 0, -1, 0;
  CellBatch b;
  b.inputs.resize(1, 4);
  b.inputs << 1, 2, 1, 2;
  b.units = {0, 0, 1, 1};
  b.periods = {0, 1, 0, 1};
  b.targets = Eigen::Vector4d(-1, -2, 1.1, 1.9);
  CHECK(reassign_by_fit(m, b) == std::vector<int>{1, 0});
}

TEST_CASE("kmeans_centers separates clear clusters") {
  Eigen::MatrixXd pts(30, 2);
  const Eigen::MatrixXd noise = 0.1 * testing::gaussian(30, 2, 3);
  for (int i = 0; i < 30; ++i) pts.row(i) = Eigen::RowVector2d(10.0 * (i % 3), i % 3 == 1 ? 10.0 : 0.0) + noise.row(i);
  const auto c = kmeans_centers(pts, 3, 50, 7, 3);
  const auto g = assign_groups(pts, c);
  for (int i = 3; i < 30; ++i) CHECK(g[std::size_t(i)] == g[std::size_t(i % 3)]);
  CHECK(kmeans_inertia(pts, c) < 30 * 0.1);
  CHECK_THROWS_AS(kmeans_centers(pts.topRows(2), 3, 10, 1), Error);
}

TEST_CASE("adjusted_rand_index matches a pair-counting oracle") {
  const std::vector<int> truth{0, 0, 0, 1, 1, 1, 2, 2, 2};
  CHECK(adjusted_rand_index(truth, truth) == doctest::Approx(1.0));
  CHECK(adjusted_rand_index(truth, std::vector<int>{2, 2, 2, 0, 0, 0, 1, 1, 1}) == doctest::Approx(1.0));
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<int> a(25), b(25);
    for (int i = 0; i < 25; ++i) {
      a[std::size_t(i)] = int(rng.index(3));
      b[std::size_t(i)] = int(rng.index(4));
    }
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(ari_oracle(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("predictions through a constant backbone") {
  auto m = hand_model(4, 2, Activation::Identity, 3, 2);
  m.backbone.bias(0) = Eigen::Vector2d(0.5, -1.5);
  m.hidden_norm.location = Eigen::Vector2d(0.1, 0.2);
  m.hidden_norm.scale = Eigen::Vector2d(2.0, 0.5);
  m.centers << 1, 2, 3, -1, 0.5, 0.25;
  m.assignment = {1, 0, 1};
  const Eigen::MatrixXd x = testing::gaussian(4, 5, 2);
  const std::vector<int> units{0, 1, 2, 0, 1};
  const Eigen::VectorXd p = m.predict_with_centers(units, x);
  const Eigen::Vector2d ht((0.5 - 0.1) / 2.0, (-1.5 - 0.2) / 0.5);
  for (int c = 0; c < 5; ++c) {
    const int g = m.assignment[std::size_t(units[std::size_t(c)])];
    CHECK(p(c) == doctest::Approx(m.centers.row(g).head(2).dot(ht) + m.centers(g, 2)).epsilon(1e-14));
  }
  m.assignment.clear();
  CHECK_THROWS_AS(m.predict_with_centers(units, x), Error);
}

TEST_CASE("one-step and recursive forecasts") {
  // AR(1)-style panel: z holds y_{t-1}; the model predicts 0.6 y_{t-1} + 0.1.
  auto ds = testing::random_panel(2, 10, 2, 2, 4);
  const auto feats = zero_features(ds);
  const int d_in = ds.x_dim() + ds.z_dim() + kResidualFeatureDim;
  auto m = hand_model(d_in, 1, Activation::Identity, 2, 1);
  m.backbone.weight(0)(0, ds.x_dim()) = 1.0;
  m.centers << 0.6, 0.1;
  m.assignment = {0, 0};
  m.lag_columns = {{0, 1}};

  const double a = predict_one_step(m, ds, feats, 1, 6);
  CHECK(a == predict_one_step(m, ds, feats, 1, 6));
  CHECK(a == doctest::Approx(0.6 * ds.y(1, 5) + 0.1).epsilon(1e-14));
  CHECK(predict_h_step(m, ds, feats, 1, 6, 1)(0) == a);

  const Eigen::VectorXd path = predict_h_step(m, ds, feats, 1, 6, 4);
  double prev = ds.y(1, 5);
  for (int s = 0; s < 4; ++s) {
    prev = 0.6 * prev + 0.1;
    CHECK(std::abs(path(s) - prev) < 1e-10);
  }
  CHECK_THROWS_AS(predict_h_step(m, ds, feats, 1, 8, 4), Error);

  // Reading only an embedding coordinate makes every step a plain one-step forecast.
  m.backbone.weight(0).setZero();
  m.backbone.weight(0)(0, 1) = 1.0;
  const Eigen::VectorXd flat = predict_h_step(m, ds, feats, 0, 3, 5);
  for (int s = 0; s < 5; ++s) CHECK(flat(s) == predict_one_step(m, ds, feats, 0, 3 + s));
}

TEST_CASE("cell_input layout and missing features") {
  auto ds = testing::random_panel(1, 2, 3, 2, 1);
  auto feats = zero_features(ds);
  feats.features.row(1) = Eigen::RowVector3d(0.1, 0.2, 0.3);
  const Eigen::VectorXd in = cell_input(ds, feats, 0, 1);
  CHECK(in.size() == 2 + 1 + 3);
  CHECK(in.head(2) == month_features(ds, 0, 1));
  CHECK(in(2) == ds.z()(1, 0));
  CHECK(in.tail(3) == Eigen::Vector3d(0.1, 0.2, 0.3));
  ResidualPanel short_panel = feats;
  short_panel.n_periods = 1;
  short_panel.features.conservativeResize(1, 3);
  CHECK_THROWS_AS(cell_input(ds, short_panel, 0, 1), Error);
}

TEST_CASE("apply_symmetry") {
  Rng rng(8);
  DeepPanelModel m;
  m.backbone = FeedForwardNet::initialized(std::vector<int>{5, 6, 4},
                                           std::vector<Activation>{Activation::Relu, Activation::Relu}, rng);
  m.input_norm = Normalization::identity(5);
  m.hidden_norm.location = Eigen::Vector4d(0.1, 0.3, 0.2, 0.4);
  m.hidden_norm.scale = Eigen::Vector4d(0.5, 1.5, 0.7, 1.1);
  m.heads = testing::gaussian(6, 5, 1);
  m.centers = testing::gaussian(2, 5, 2);
  m.assignment = assign_groups(m);
  const Eigen::MatrixXd x = testing::gaussian(5, 1000, 3);
  std::vector<int> units(1000);
  for (int& u : units) u = int(rng.index(6));

  const std::vector<int> id{0, 1, 2, 3};
  const std::vector<double> ones(4, 1.0);
  const auto same = apply_symmetry(m, id, ones);
  CHECK(same.backbone.params() == m.backbone.params());
  CHECK(same.heads == m.heads);

  const std::vector<int> perm{2, 0, 3, 1};
  const std::vector<double> scales{0.3, 2.5, 1.7, 0.9};
  const auto moved = apply_symmetry(m, perm, scales);
  CHECK((moved.predict_with_centers(units, x) - m.predict_with_centers(units, x)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((moved.predict_with_heads(units, x) - m.predict_with_heads(units, x)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(assign_groups(moved) == m.assignment);

  const std::vector<double> bad{1.0, -1.0, 1.0, 1.0};
  CHECK_THROWS_AS(apply_symmetry(m, perm, bad), Error);
  DeepPanelModel sig = m;
  sig.backbone = FeedForwardNet::initialized(std::vector<int>{5, 4}, std::vector<Activation>{Activation::Sigmoid}, rng);
  CHECK_NOTHROW(apply_symmetry(sig, perm, ones));
  try {
    apply_symmetry(sig, perm, scales);
    FAIL("expected BadScale");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::BadScale);
  }
}

TEST_CASE("shortcut gradients") {
  Rng rng(12);
  std::vector<double> y(2000), e(2000);
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = rng.normal();
    e[k] = rng.normal();
  }
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / 2000.0;
  for (double& v : y) v -= my;
  double mean_sq = 0.0, sum_ye = 0.0, sum_ye2 = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    mean_sq += y[k] * y[k] / 2000.0;
    sum_ye += y[k] * e[k];
    sum_ye2 += y[k] * e[k] * y[k] * e[k];
  }
  const auto g = shortcut_gradients(y, y, e);
  CHECK(std::abs(g.direct + mean_sq) < 1e-10);
  const double m = sum_ye / 2000.0;
  const double se = std::sqrt((sum_ye2 / 2000.0 - m * m) / 1999.0);
  CHECK(std::abs(g.residual) < 3.0 * se);
  CHECK_THROWS_AS(shortcut_gradients(y, std::vector<double>(3), e), Error);
}

TEST_CASE("panel shortcut diagnostic with the surrogate equal to the target") {
  auto ds = testing::random_panel(3, 8, 4, 2, 6);
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 8; ++t) ds.cell(i, t).scores.setConstant(ds.y(i, t));
  const auto periods = period_range(0, 8);
  const auto g = shortcut_diagnostic(ds, zero_features(ds), periods);
  const double mean = ds.y().mean();
  CHECK(std::abs(g.direct + (ds.y().array() - mean).square().mean()) < 1e-10);
  CHECK(g.residual == 0.0);
}

TEST_CASE("train: single group with a strong penalty collapses the heads") {
  const auto ds = linear_panel(4, 30, 2);
  auto o = fast_options(1);
  o.lambda = 20.0;
  o.val_periods = 0;
  o.max_epochs = 1000;
  o.patience = 1000;  // run to convergence
  o.batch_size = 1000;
  const auto r = train(ds, zero_features(ds), period_range(0, 30), o, 3);
  for (int i = 0; i < 4; ++i) CHECK((r.report.penalized_heads.row(i) - r.report.penalized_centers.row(0)).norm() < 1e-2);
  CHECK(r.report.group_sizes == std::vector<int>{4});
}

TEST_CASE("train: identical units end with identical heads") {
  auto ds = linear_panel(2, 20, 4);
  for (int t = 0; t < 20; ++t) {
    ds.y()(1, t) = ds.y(0, t);
    ds.z()(ds.cell_index(1, t), 0) = ds.z()(ds.cell_index(0, t), 0);
    ds.cell(1, t) = ds.cell(0, t);
  }
  auto o = fast_options(2);
  o.batch_size = 1000;  // full batch: both units see the same updates
  const auto r = train(ds, zero_features(ds), period_range(0, 20), o, 5);
  CHECK((r.report.penalized_heads.row(0) - r.report.penalized_heads.row(1)).norm() < 1e-3);
}

TEST_CASE("train: noiseless grouped linear panel is forecast accurately") {
  const auto ds = linear_panel(6, 50, 9);
  const auto feats = zero_features(ds);
  auto o = fast_options(2);
  o.warmup_epochs = 200;
  o.max_epochs = 100;
  o.patience = 200;
  const auto r = train(ds, feats, period_range(0, 40), o, 1);
  double sse = 0.0;
  for (int i = 0; i < 6; ++i)
    for (int t = 40; t < 50; ++t) sse += std::pow(ds.y(i, t) - predict_one_step(r.model, ds, feats, i, t), 2);
  CHECK(sse / 60.0 < 1e-2);
  CHECK(adjusted_rand_index(r.model.assignment, std::vector<int>{0, 1, 0, 1, 0, 1}) == doctest::Approx(1.0));
}

TEST_CASE("train is deterministic and serializes losslessly") {
  const auto ds = linear_panel(4, 16, 1);
  auto o = fast_options(2);
  o.warmup_epochs = 5;
  o.max_epochs = 5;
  const auto feats = zero_features(ds);
  const auto a = train(ds, feats, period_range(0, 16), o, 7);
  const auto b = train(ds, feats, period_range(0, 16), o, 7);
  CHECK(to_json(a.model).dump() == to_json(b.model).dump());
  const auto back = model_from_json(to_json(a.model));
  CHECK(to_json(back).dump() == to_json(a.model).dump());
  for (int i = 0; i < 4; ++i) CHECK(predict_one_step(back, ds, feats, i, 15) == predict_one_step(a.model, ds, feats, i, 15));
}

TEST_CASE("train guards against divergence and bad splits") {
  const auto ds = linear_panel(4, 12, 1);
  auto o = fast_options(2);
  o.divergence_factor = 1e-12;
  try {
    train(ds, zero_features(ds), period_range(0, 12), o, 1);
    FAIL("expected NonFinite");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonFinite);
  }
  o = fast_options(5);
  CHECK_THROWS_AS(train(ds, zero_features(ds), period_range(0, 12), o, 1), Error);
  o = fast_options(2);
  o.val_periods = 12;
  CHECK_THROWS_AS(train(ds, zero_features(ds), period_range(0, 12), o, 1), Error);
}
