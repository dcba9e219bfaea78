#include "ldpm/deep_panel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "ldpm/error.hpp"
#include "ldpm/numerics.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

namespace {

constexpr double kScaleFloor = 1e-12;

nlohmann::json matrix_rows(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(std::size_t(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[std::size_t(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd matrix_from_rows(const nlohmann::json& rows, Eigen::Index cols) {
  Eigen::MatrixXd m(Eigen::Index(rows.size()), cols);
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    const auto values = row.get<std::vector<double>>();
    if (Eigen::Index(values.size()) != cols) throw Error(ErrorKind::DimMismatch, "model json: ragged matrix row");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = values[std::size_t(c)];
    ++r;
  }
  return m;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// Nearest row of `centers` to `point`, ties to the lowest index.
std::pair<int, double> nearest(const Eigen::MatrixXd& centers, const Eigen::RowVectorXd& point) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centers.rows(); ++k) {
    const double d = (centers.row(k) - point).norm();
    if (d < best_d) {
      best_d = d;
      best = int(k);
    }
  }
  return {best, best_d};
}

Eigen::VectorXd cell_input_with_z(const PanelDataset& ds, const ResidualPanel& features, int unit, int period,
                                  const Eigen::RowVectorXd& z) {
  if (period < 0 || period >= ds.n_periods() || period >= features.n_periods || unit < 0 ||
      unit >= ds.n_units() || unit >= features.n_units) {
    throw Error(ErrorKind::MissingFeatures, "no covariates for unit " + std::to_string(unit) + ", period " +
                                                std::to_string(period));
  }
  if (ds.cell(unit, period).n_days() == 0) {
    throw Error(ErrorKind::MissingFeatures, "no text features for unit " + std::to_string(unit) + ", period " +
                                                std::to_string(period));
  }
  const int dx = ds.x_dim();
  const int dz = ds.z_dim();
  Eigen::VectorXd in(dx + dz + kResidualFeatureDim);
  in.head(dx) = month_features(ds, unit, period);
  in.segment(dx, dz) = z.transpose();
  in.tail(kResidualFeatureDim) = features.feature_row(unit, period).transpose();
  return in;
}

Eigen::VectorXd predict_rows(const Eigen::MatrixXd& coefs, std::span<const int> rows, const Eigen::MatrixXd& hidden) {
  const Eigen::Index dh = hidden.rows();
  Eigen::VectorXd out(hidden.cols());
  for (Eigen::Index c = 0; c < hidden.cols(); ++c) {
    const auto row = coefs.row(rows[std::size_t(c)]);
    out(c) = row.head(dh).dot(hidden.col(c)) + row(dh);
  }
  return out;
}

double mean_squared(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == 0 ? 0.0 : (a - b).squaredNorm() / double(a.size());
}

}  // namespace

nlohmann::json to_json(const DeepPanelOptions& o) {
  nlohmann::json lags = nlohmann::json::array();
  for (const auto& l : o.lag_columns) lags.push_back({{"column", l.column}, {"lag", l.lag}});
  return {{"hidden", o.hidden},
          {"interior_activation", to_string(o.interior_activation)},
          {"final_activation", to_string(o.final_activation)},
          {"n_groups", o.n_groups},
          {"lambda", o.lambda},
          {"batch_size", o.batch_size},
          {"learning_rate", o.adam.learning_rate},
          {"head_learning_rate", o.head_learning_rate},
          {"warmup_epochs", o.warmup_epochs},
          {"max_epochs", o.max_epochs},
          {"lambda_ramp_epochs", o.lambda_ramp_epochs},
          {"patience", o.patience},
          {"val_periods", o.val_periods},
          {"kmeans_iterations", o.kmeans_iterations},
          {"kmeans_restarts", o.kmeans_restarts},
          {"reassign_iterations", o.reassign_iterations},
          {"divergence_factor", o.divergence_factor},
          {"lag_columns", lags}};
}

DeepPanelOptions deep_panel_options_from_json(const nlohmann::json& j) {
  DeepPanelOptions o;
  o.hidden = j.value("hidden", o.hidden);
  o.interior_activation = parse_activation(j.value("interior_activation", to_string(o.interior_activation)));
  o.final_activation = parse_activation(j.value("final_activation", to_string(o.final_activation)));
  o.n_groups = j.value("n_groups", o.n_groups);
  o.lambda = j.value("lambda", o.lambda);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.adam.learning_rate = j.value("learning_rate", o.adam.learning_rate);
  o.head_learning_rate = j.value("head_learning_rate", o.head_learning_rate);
  o.warmup_epochs = j.value("warmup_epochs", o.warmup_epochs);
  o.max_epochs = j.value("max_epochs", o.max_epochs);
  o.lambda_ramp_epochs = j.value("lambda_ramp_epochs", o.lambda_ramp_epochs);
  o.patience = j.value("patience", o.patience);
  o.val_periods = j.value("val_periods", o.val_periods);
  o.kmeans_iterations = j.value("kmeans_iterations", o.kmeans_iterations);
  o.kmeans_restarts = j.value("kmeans_restarts", o.kmeans_restarts);
  o.reassign_iterations = j.value("reassign_iterations", o.reassign_iterations);
  o.divergence_factor = j.value("divergence_factor", o.divergence_factor);
  if (j.contains("lag_columns")) {
    for (const auto& l : j.at("lag_columns")) o.lag_columns.push_back({l.at("column").get<int>(), l.at("lag").get<int>()});
  }
  return o;
}

Normalization Normalization::identity(Eigen::Index dim) {
  return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
}

Normalization Normalization::fit(const Eigen::MatrixXd& samples) {
  if (samples.cols() == 0) throw Error(ErrorKind::EmptyInput, "Normalization::fit: no samples");
  Normalization n;
  n.location = samples.rowwise().mean();
  n.scale = ((samples.colwise() - n.location).rowwise().squaredNorm() / double(samples.cols())).cwiseSqrt();
  for (Eigen::Index r = 0; r < n.scale.size(); ++r)
    if (!(n.scale(r) > kScaleFloor)) n.scale(r) = 1.0;
  return n;
}

Eigen::MatrixXd Normalization::apply(const Eigen::MatrixXd& samples) const {
  if (samples.rows() != location.size()) {
    throw Error(ErrorKind::DimMismatch, "normalization expects " + std::to_string(location.size()) + " rows, got " +
                                            std::to_string(samples.rows()));
  }
  return ((samples.colwise() - location).array().colwise() / scale.array()).matrix();
}

Eigen::MatrixXd DeepPanelModel::hidden(const Eigen::MatrixXd& raw_inputs) const {
  return hidden_norm.apply(backbone.forward_batch(input_norm.apply(raw_inputs)));
}

Eigen::VectorXd DeepPanelModel::predict_with_heads(std::span<const int> units, const Eigen::MatrixXd& raw_inputs) const {
  if (Eigen::Index(units.size()) != raw_inputs.cols()) {
    throw Error(ErrorKind::LengthMismatch, "predict: one unit per input column required");
  }
  return predict_rows(heads, units, hidden(raw_inputs));
}

Eigen::VectorXd DeepPanelModel::predict_with_centers(std::span<const int> units,
                                                     const Eigen::MatrixXd& raw_inputs) const {
  if (Eigen::Index(units.size()) != raw_inputs.cols()) {
    throw Error(ErrorKind::LengthMismatch, "predict: one unit per input column required");
  }
  if (int(assignment.size()) != n_units()) throw Error(ErrorKind::UnknownGroup, "predict: model has no assignment");
  std::vector<int> groups(units.size());
  for (std::size_t c = 0; c < units.size(); ++c) groups[c] = assignment[std::size_t(units[c])];
  return predict_rows(centers, groups, hidden(raw_inputs));
}

Eigen::VectorXd cell_input(const PanelDataset& ds, const ResidualPanel& features, int unit, int period) {
  if (period < 0 || period >= ds.n_periods() || unit < 0 || unit >= ds.n_units()) {
    throw Error(ErrorKind::MissingFeatures, "no covariates for unit " + std::to_string(unit) + ", period " +
                                                std::to_string(period));
  }
  return cell_input_with_z(ds, features, unit, period, ds.z_row(unit, period));
}

CellBatch build_cells(const PanelDataset& ds, const ResidualPanel& features, std::span<const int> periods) {
  CellBatch batch;
  const Eigen::Index n = Eigen::Index(ds.n_units()) * Eigen::Index(periods.size());
  batch.inputs.resize(ds.x_dim() + ds.z_dim() + kResidualFeatureDim, n);
  batch.targets.resize(n);
  Eigen::Index c = 0;
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t : periods) {
      batch.inputs.col(c) = cell_input(ds, features, i, t);
      batch.targets(c) = ds.y(i, t);
      batch.units.push_back(i);
      batch.periods.push_back(t);
      ++c;
    }
  }
  return batch;
}

double min_distance_penalty(const Eigen::MatrixXd& heads, const Eigen::MatrixXd& centers, double lambda,
                            DeepPanelGradient* grad) {
  if (heads.rows() == 0 || centers.rows() == 0) return 0.0;
  if (heads.cols() != centers.cols()) throw Error(ErrorKind::DimMismatch, "penalty: head/center widths differ");
  const double w = lambda / double(heads.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < heads.rows(); ++i) {
    const auto [k, d] = nearest(centers, heads.row(i));
    total += d;
    if (grad != nullptr && d > 1e-12 && lambda != 0.0) {
      const Eigen::RowVectorXd u = (heads.row(i) - centers.row(k)) / d;
      grad->heads.row(i) += w * u;
      grad->centers.row(k) -= w * u;
    }
  }
  return w * total;
}

double product_penalty(const Eigen::MatrixXd& heads, const Eigen::MatrixXd& centers, double lambda) {
  if (heads.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < heads.rows(); ++i) {
    double prod = 1.0;
    for (Eigen::Index k = 0; k < centers.rows(); ++k) prod *= (centers.row(k) - heads.row(i)).norm();
    total += prod;
  }
  return lambda / double(heads.rows()) * total;
}

double penalized_loss(const DeepPanelModel& model, const CellBatch& batch, std::span<const Eigen::Index> cells,
                      double lambda, DeepPanelGradient* grad) {
  if (cells.empty()) throw Error(ErrorKind::EmptyInput, "penalized_loss: empty batch");
  const Eigen::Index m = Eigen::Index(cells.size());
  const Eigen::Index dh = model.hidden_dim();
  Eigen::MatrixXd raw(batch.inputs.rows(), m);
  Eigen::VectorXd y(m);
  std::vector<int> units(cells.size());
  for (Eigen::Index c = 0; c < m; ++c) {
    const auto idx = cells[std::size_t(c)];
    raw.col(c) = batch.inputs.col(idx);
    y(c) = batch.targets(idx);
    units[std::size_t(c)] = batch.units[std::size_t(idx)];
  }
  FeedForwardNet::Cache cache;
  const Eigen::MatrixXd h = model.backbone.forward_batch(model.input_norm.apply(raw), cache);
  const Eigen::MatrixXd ht = model.hidden_norm.apply(h);
  const Eigen::VectorXd resid = predict_rows(model.heads, units, ht) - y;
  const double mse = resid.squaredNorm() / double(m);

  if (grad != nullptr) {
    grad->backbone = Eigen::VectorXd::Zero(model.backbone.n_params());
    grad->heads = Eigen::MatrixXd::Zero(model.heads.rows(), model.heads.cols());
    grad->centers = Eigen::MatrixXd::Zero(model.centers.rows(), model.centers.cols());
    Eigen::MatrixXd dh_raw(dh, m);
    for (Eigen::Index c = 0; c < m; ++c) {
      const double g = 2.0 * resid(c) / double(m);
      const int u = units[std::size_t(c)];
      grad->heads.row(u).head(dh) += g * ht.col(c).transpose();
      grad->heads(u, dh) += g;
      dh_raw.col(c) = g * model.heads.row(u).head(dh).transpose().cwiseQuotient(model.hidden_norm.scale);
    }
    model.backbone.backward(cache, dh_raw, grad->backbone);
  }
  return mse + min_distance_penalty(model.heads, model.centers, lambda, grad);
}

double penalized_loss(const DeepPanelModel& model, const CellBatch& batch, double lambda) {
  std::vector<Eigen::Index> all(std::size_t(batch.size()));
  std::iota(all.begin(), all.end(), Eigen::Index(0));
  return penalized_loss(model, batch, all, lambda);
}

Eigen::VectorXd pack_parameters(const DeepPanelModel& model) {
  Eigen::VectorXd flat(model.backbone.n_params() + model.heads.size() + model.centers.size());
  flat << model.backbone.params(), model.heads.reshaped(), model.centers.reshaped();
  return flat;
}

void unpack_parameters(DeepPanelModel& model, const Eigen::VectorXd& flat) {
  const Eigen::Index nb = model.backbone.n_params();
  if (flat.size() != nb + model.heads.size() + model.centers.size()) {
    throw Error(ErrorKind::DimMismatch, "unpack_parameters: wrong parameter count");
  }
  model.backbone.params() = flat.head(nb);
  model.heads.reshaped() = flat.segment(nb, model.heads.size());
  model.centers.reshaped() = flat.tail(model.centers.size());
}

Eigen::VectorXd pack_gradient(const DeepPanelGradient& grad) {
  Eigen::VectorXd flat(grad.backbone.size() + grad.heads.size() + grad.centers.size());
  flat << grad.backbone, grad.heads.reshaped(), grad.centers.reshaped();
  return flat;
}

std::vector<int> assign_groups(const Eigen::MatrixXd& heads, const Eigen::MatrixXd& centers) {
  if (centers.rows() == 0) throw Error(ErrorKind::EmptyGroup, "assign_groups: no centers");
  if (heads.cols() != centers.cols()) throw Error(ErrorKind::DimMismatch, "assign_groups: head/center widths differ");
  std::vector<int> g(std::size_t(heads.rows()));
  for (Eigen::Index i = 0; i < heads.rows(); ++i) g[std::size_t(i)] = nearest(centers, heads.row(i)).first;
  return g;
}

std::vector<int> assign_groups(const DeepPanelModel& model) { return assign_groups(model.heads, model.centers); }

namespace {

Eigen::MatrixXd kmeans_once(const Eigen::MatrixXd& points, int k, int iterations, Rng& rng) {
  const Eigen::Index n = points.rows();
  Eigen::MatrixXd centers(k, points.cols());
  centers.row(0) = points.row(Eigen::Index(rng.index(std::uint64_t(n))));
  Eigen::VectorXd d2(n);
  for (int c = 1; c < k; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = nearest(centers.topRows(c), points.row(i)).second;
      d2(i) = d * d;
    }
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= d2(i);
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = Eigen::Index(rng.index(std::uint64_t(n)));
    }
    centers.row(c) = points.row(pick);
  }
  for (int it = 0; it < iterations; ++it) {
    const auto labels = assign_groups(points, centers);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<int> counts(std::size_t(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[std::size_t(i)]) += points.row(i);
      ++counts[std::size_t(labels[std::size_t(i)])];
    }
    Eigen::MatrixXd next = centers;
    for (int c = 0; c < k; ++c)
      if (counts[std::size_t(c)] > 0) next.row(c) = sums.row(c) / double(counts[std::size_t(c)]);
    if (next == centers) break;
    centers = std::move(next);
  }
  return centers;
}

}  // namespace

double kmeans_inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double d = nearest(centers, points.row(i)).second;
    total += d * d;
  }
  return total;
}

Eigen::MatrixXd kmeans_centers(const Eigen::MatrixXd& points, int k, int iterations, std::uint64_t seed,
                               int restarts) {
  if (k < 1 || points.rows() < k) {
    throw Error(ErrorKind::InsufficientData, "kmeans: need at least " + std::to_string(k) + " points, got " +
                                                 std::to_string(points.rows()));
  }
  Eigen::MatrixXd best;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, restarts); ++r) {
    Rng rng(seed, Stream::KMeans, std::uint64_t(r));
    Eigen::MatrixXd centers = kmeans_once(points, k, iterations, rng);
    const double inertia = kmeans_inertia(points, centers);
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best = std::move(centers);
    }
  }
  return best;
}

RefitReport refit_centers(DeepPanelModel& model, const CellBatch& cells) {
  if (int(model.assignment.size()) != model.n_units()) {
    throw Error(ErrorKind::UnknownGroup, "refit_centers: assignment not set");
  }
  const Eigen::Index dh = model.hidden_dim();
  const Eigen::MatrixXd ht = model.hidden(cells.inputs);
  RefitReport report;
  report.used_fallback.assign(std::size_t(model.n_groups()), false);
  report.group_cells.assign(std::size_t(model.n_groups()), 0);
  std::vector<std::vector<Eigen::Index>> members(std::size_t(model.n_groups()));
  for (Eigen::Index c = 0; c < cells.size(); ++c) {
    members[std::size_t(model.assignment[std::size_t(cells.units[std::size_t(c)])])].push_back(c);
  }
  OlsOptions ols;
  ols.min_norm_fallback = true;
  for (int k = 0; k < model.n_groups(); ++k) {
    const auto& idx = members[std::size_t(k)];
    report.group_cells[std::size_t(k)] = int(idx.size());
    if (idx.empty()) continue;
    Eigen::MatrixXd X(Eigen::Index(idx.size()), dh + 1);
    Eigen::VectorXd y(Eigen::Index(idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      X.row(Eigen::Index(r)).head(dh) = ht.col(idx[r]).transpose();
      X(Eigen::Index(r), dh) = 1.0;
      y(Eigen::Index(r)) = cells.targets(idx[r]);
    }
    const auto fit = ols_fit_ex(X, y, ols);
    report.used_fallback[std::size_t(k)] = fit.used_fallback;
    model.centers.row(k) = fit.coefficients.transpose();
  }
  for (int i = 0; i < model.n_units(); ++i) model.heads.row(i) = model.centers.row(model.assignment[std::size_t(i)]);
  return report;
}

std::vector<int> reassign_by_fit(const DeepPanelModel& model, const CellBatch& cells) {
  const Eigen::MatrixXd ht = model.hidden(cells.inputs);
  const Eigen::Index dh = model.hidden_dim();
  Eigen::MatrixXd sse = Eigen::MatrixXd::Zero(model.n_units(), model.n_groups());
  for (Eigen::Index c = 0; c < cells.size(); ++c) {
    const int i = cells.units[std::size_t(c)];
    for (int k = 0; k < model.n_groups(); ++k) {
      const double e = cells.targets(c) - model.centers.row(k).head(dh).dot(ht.col(c)) - model.centers(k, dh);
      sse(i, k) += e * e;
    }
  }
  std::vector<int> out(static_cast<std::size_t>(model.n_units()));
  for (int i = 0; i < model.n_units(); ++i) {
    Eigen::Index best = 0;
    sse.row(i).minCoeff(&best);
    out[std::size_t(i)] = int(best);
  }
  return out;
}

nlohmann::json to_json(const TrainReport& r) {
  return {{"loss", r.loss},
          {"final_penalty", r.final_penalty},
          {"final_product_penalty", r.final_product_penalty},
          {"group_sizes", r.group_sizes},
          {"epochs_run", r.epochs_run},
          {"validation_pmse", r.validation_pmse},
          {"refit_used_fallback", r.refit_used_fallback},
          {"reassign_rounds", r.reassign_rounds}};
}

TrainResult train(const PanelDataset& ds, const ResidualPanel& features, std::span<const int> train_periods,
                  const DeepPanelOptions& options, std::uint64_t seed) {
  if (options.n_groups < 1) throw Error(ErrorKind::Config, "train: n_groups must be >= 1");
  if (options.hidden.empty()) throw Error(ErrorKind::Config, "train: at least one hidden layer required");
  if (options.val_periods < 0 || std::size_t(options.val_periods) >= train_periods.size()) {
    throw Error(ErrorKind::InsufficientData, "train: validation periods leave no fitting periods");
  }
  if (ds.n_units() < options.n_groups) {
    throw Error(ErrorKind::InsufficientData, "train: fewer units than groups");
  }
  const std::size_t n_fit = train_periods.size() - std::size_t(options.val_periods);
  const CellBatch fit = build_cells(ds, features, train_periods.first(n_fit));
  const CellBatch val = build_cells(ds, features, train_periods.subspan(n_fit));

  TrainResult result;
  auto& model = result.model;
  auto& report = result.report;
  model.options = options;
  model.lag_columns = options.lag_columns;
  model.seed = seed;
  model.lambda = options.lambda;
  model.input_norm = Normalization::fit(fit.inputs);

  std::vector<int> widths{int(fit.inputs.rows())};
  std::vector<Activation> acts;
  for (std::size_t l = 0; l < options.hidden.size(); ++l) {
    widths.push_back(options.hidden[l]);
    acts.push_back(l + 1 == options.hidden.size() ? options.final_activation : options.interior_activation);
  }
  Rng init_rng(seed, Stream::BackboneInit);
  model.backbone = FeedForwardNet::initialized(widths, acts, init_rng);
  const int dh = model.hidden_dim();
  model.hidden_norm = Normalization::identity(dh);

  const double bound = 1.0 / std::sqrt(double(dh));
  Eigen::RowVectorXd shared(dh + 1);
  for (int j = 0; j < dh; ++j) shared(j) = init_rng.uniform(-bound, bound);
  shared(dh) = fit.targets.mean();
  model.heads = shared.replicate(ds.n_units(), 1);
  model.centers = Eigen::MatrixXd::Zero(options.n_groups, dh + 1);

  AdamOptions head_adam = options.adam;
  head_adam.learning_rate = options.head_learning_rate;
  Rng shuffle_rng(seed, Stream::BatchShuffle);
  std::vector<Eigen::Index> order(std::size_t(fit.size()));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  const std::size_t batch = std::size_t(std::max(1, options.batch_size));
  double initial_loss = -1.0;

  auto run_epoch = [&](double lambda, OptimizerState& sb, OptimizerState& sh, OptimizerState* sc) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double total = 0.0;
    DeepPanelGradient grad;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t m = std::min(batch, order.size() - start);
      const std::span<const Eigen::Index> cells(order.data() + start, m);
      const double loss = penalized_loss(model, fit, cells, lambda, &grad);
      if (initial_loss < 0.0) initial_loss = std::max(loss, 1e-300);
      if (!std::isfinite(loss) || loss > options.divergence_factor * initial_loss) {
        throw Error(ErrorKind::NonFinite, "train: loss diverged (reduce the learning rate)");
      }
      total += loss * double(m);
      optimizer_step(sb, model.backbone.params(), grad.backbone);
      optimizer_step(sh, Eigen::Map<Eigen::VectorXd>(model.heads.data(), model.heads.size()), grad.heads.reshaped());
      if (sc != nullptr) optimizer_step(*sc, Eigen::Map<Eigen::VectorXd>(model.centers.data(), model.centers.size()),
                                        grad.centers.reshaped());
    }
    report.loss.push_back(total / double(order.size()));
  };

  // Warmup: unpenalized heads on the raw hidden representation.
  {
    OptimizerState sb(model.backbone.n_params(), options.adam);
    OptimizerState sh(model.heads.size(), head_adam);
    double best = std::numeric_limits<double>::infinity();
    DeepPanelModel best_model = model;
    int since_best = 0;
    for (int epoch = 1; epoch <= options.warmup_epochs; ++epoch) {
      run_epoch(0.0, sb, sh, nullptr);
      ++report.epochs_run;
      const double v = val.size() > 0 ? mean_squared(model.predict_with_heads(val.units, val.inputs), val.targets)
                                      : report.loss.back();
      if (v < best) {
        best = v;
        best_model = model;
        since_best = 0;
      } else if (++since_best >= options.patience) {
        break;
      }
    }
    if (options.warmup_epochs > 0) model = std::move(best_model);
  }

  // Freeze the hidden z-scores and re-express heads so predictions are unchanged.
  const Eigen::MatrixXd h_fit = model.backbone.forward_batch(model.input_norm.apply(fit.inputs));
  model.hidden_norm = Normalization::fit(h_fit);
  for (int i = 0; i < ds.n_units(); ++i) {
    const Eigen::VectorXd beta = model.heads.row(i).head(dh).transpose();
    model.heads(i, dh) += beta.dot(model.hidden_norm.location);
    model.heads.row(i).head(dh) = beta.cwiseProduct(model.hidden_norm.scale).transpose();
  }
  model.centers =
      kmeans_centers(model.heads, options.n_groups, options.kmeans_iterations, seed, options.kmeans_restarts);

  // Joint penalized phase.
  {
    OptimizerState sb(model.backbone.n_params(), options.adam);
    OptimizerState sh(model.heads.size(), head_adam);
    OptimizerState sc(model.centers.size(), head_adam);
    auto grouped_val = [&]() {
      model.assignment = assign_groups(model);
      if (val.size() == 0) return report.loss.back();
      return mean_squared(model.predict_with_centers(val.units, val.inputs), val.targets);
    };
    double best = std::numeric_limits<double>::infinity();
    DeepPanelModel best_model = model;
    int since_best = 0;
    const int ramp = std::max(1, options.lambda_ramp_epochs);
    for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
      const double lambda = options.lambda * std::min(1.0, double(epoch) / double(ramp));
      run_epoch(lambda, sb, sh, &sc);
      ++report.epochs_run;
      const double v = grouped_val();
      if (v < best) {
        best = v;
        best_model = model;
        since_best = 0;
      } else if (epoch > ramp && ++since_best >= options.patience) {
        break;
      }
    }
    if (options.max_epochs > 0) model = std::move(best_model);
  }

  model.assignment = assign_groups(model);
  report.penalized_heads = model.heads;
  report.penalized_centers = model.centers;
  report.final_penalty = min_distance_penalty(model.heads, model.centers, options.lambda);
  report.final_product_penalty = product_penalty(model.heads, model.centers, options.lambda);

  CellBatch all = build_cells(ds, features, train_periods);
  auto refit = refit_centers(model, all);
  auto any_fallback = [](const RefitReport& r) {
    return std::any_of(r.used_fallback.begin(), r.used_fallback.end(), [](bool b) { return b; });
  };
  report.refit_used_fallback = any_fallback(refit);
  for (int it = 0; it < options.reassign_iterations; ++it) {
    auto moved = reassign_by_fit(model, all);
    if (moved == model.assignment) break;
    std::vector<int> sizes(std::size_t(model.n_groups()), 0);
    for (int g : moved) ++sizes[std::size_t(g)];
    if (std::count(sizes.begin(), sizes.end(), 0) > 0) break;
    model.assignment = std::move(moved);
    refit = refit_centers(model, all);
    report.refit_used_fallback = report.refit_used_fallback || any_fallback(refit);
    ++report.reassign_rounds;
  }
  report.group_sizes.assign(std::size_t(options.n_groups), 0);
  for (int g : model.assignment) ++report.group_sizes[std::size_t(g)];
  report.validation_pmse =
      val.size() > 0 ? mean_squared(model.predict_with_centers(val.units, val.inputs), val.targets) : 0.0;
  for (double l : report.loss)
    if (!std::isfinite(l)) throw Error(ErrorKind::NonFinite, "train: non-finite loss trajectory");
  return result;
}

double predict_one_step(const DeepPanelModel& model, const PanelDataset& ds, const ResidualPanel& features, int unit,
                        int period) {
  const Eigen::MatrixXd in = cell_input(ds, features, unit, period);
  const int u[] = {unit};
  return model.predict_with_centers(u, in)(0);
}

Eigen::VectorXd predict_h_step(const DeepPanelModel& model, const PanelDataset& ds, const ResidualPanel& features,
                               int unit, int origin, int horizon) {
  if (horizon < 1) throw Error(ErrorKind::Config, "predict_h_step: horizon must be >= 1");
  if (origin < 0 || origin + horizon > ds.n_periods()) {
    throw Error(ErrorKind::MissingFeatures, "predict_h_step: covariates end at period " +
                                                std::to_string(ds.n_periods() - 1));
  }
  const int u[] = {unit};
  return recursive_forecast(ds, model.lag_columns, unit, origin, horizon, [&](int t, const Eigen::RowVectorXd& z) {
    const Eigen::MatrixXd in = cell_input_with_z(ds, features, unit, t, z);
    return model.predict_with_centers(u, in)(0);
  });
}

DeepPanelModel apply_symmetry(const DeepPanelModel& model, std::span<const int> perm, std::span<const double> scales) {
  const int last = model.backbone.n_layers() - 1;
  const int dh = model.hidden_dim();
  if (int(perm.size()) != dh || int(scales.size()) != dh) {
    throw Error(ErrorKind::DimMismatch, "apply_symmetry: permutation/scales must have length " + std::to_string(dh));
  }
  for (double c : scales)
    if (!(c > 0.0)) throw Error(ErrorKind::BadScale, "apply_symmetry: scales must be strictly positive");
  const bool unit_scales = std::all_of(scales.begin(), scales.end(), [](double c) { return c == 1.0; });
  if (!unit_scales && model.backbone.layer(last).activation != Activation::Relu) {
    throw Error(ErrorKind::BadScale, "apply_symmetry: positive scaling needs a relu final layer");
  }
  DeepPanelModel out = model;
  out.backbone.permute_scale_outputs(last, perm, scales);
  for (int j = 0; j < dh; ++j) {
    const int src = perm[std::size_t(j)];
    const double c = scales[std::size_t(j)];
    out.hidden_norm.location(j) = c * model.hidden_norm.location(src);
    out.hidden_norm.scale(j) = c * model.hidden_norm.scale(src);
    out.heads.col(j) = model.heads.col(src);
    out.centers.col(j) = model.centers.col(src);
  }
  return out;
}

Eigen::MatrixXd raw_head_slopes(const DeepPanelModel& model) {
  const Eigen::Index dh = model.hidden_dim();
  return model.heads.leftCols(dh) * model.hidden_norm.scale.cwiseInverse().asDiagonal();
}

ShortcutGradients shortcut_gradients(std::span<const double> y, std::span<const double> surrogate,
                                     std::span<const double> residual) {
  if (y.size() != surrogate.size() || y.size() != residual.size()) {
    throw Error(ErrorKind::LengthMismatch, "shortcut_gradients: series lengths differ");
  }
  if (y.empty()) throw Error(ErrorKind::EmptyInput, "shortcut_gradients: empty series");
  double direct = 0.0;
  double res = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    direct += y[k] * surrogate[k];
    res += y[k] * residual[k];
  }
  const double n = double(y.size());
  return {-direct / n, -res / n};
}

ShortcutGradients shortcut_diagnostic(const PanelDataset& ds, const ResidualPanel& features,
                                      std::span<const int> periods) {
  std::vector<double> y, ys, eps;
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t : periods) {
      const auto& cell = ds.cell(i, t);
      if (cell.n_days() == 0) continue;
      y.push_back(ds.y(i, t));
      ys.push_back(average_scores(cell.scores));
      eps.push_back(features.feature_row(i, t)(0));
    }
  }
  if (y.empty()) throw Error(ErrorKind::EmptyInput, "shortcut_diagnostic: no observed cells");
  for (auto* v : {&y, &ys, &eps}) {
    const double mean = std::accumulate(v->begin(), v->end(), 0.0) / double(v->size());
    for (double& x : *v) x -= mean;
  }
  return shortcut_gradients(y, ys, eps);
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::LengthMismatch, "adjusted_rand_index: label lengths differ");
  if (a.empty()) throw Error(ErrorKind::EmptyInput, "adjusted_rand_index: no labels");
  std::map<std::pair<int, int>, long long> joint;
  std::map<int, long long> rows, cols;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ++joint[{a[k], b[k]}];
    ++rows[a[k]];
    ++cols[b[k]];
  }
  auto pairs = [](long long n) { return double(n) * double(n - 1) / 2.0; };
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [key, n] : joint) index += pairs(n);
  for (const auto& [key, n] : rows) sum_a += pairs(n);
  for (const auto& [key, n] : cols) sum_b += pairs(n);
  const double total = pairs((long long)a.size());
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

nlohmann::json to_json(const DeepPanelModel& model) {
  return {{"backbone", to_json(model.backbone)},
          {"input_norm", {{"location", to_std(model.input_norm.location)}, {"scale", to_std(model.input_norm.scale)}}},
          {"hidden_norm",
           {{"location", to_std(model.hidden_norm.location)}, {"scale", to_std(model.hidden_norm.scale)}}},
          {"heads", matrix_rows(model.heads)},
          {"centers", matrix_rows(model.centers)},
          {"assignment", model.assignment},
          {"lambda", model.lambda},
          {"hyperparams", to_json(model.options)},
          {"seed", model.seed}};
}

DeepPanelModel model_from_json(const nlohmann::json& j) {
  DeepPanelModel m;
  m.backbone = net_from_json(j.at("backbone"));
  m.input_norm = {vector_from_json(j.at("input_norm").at("location")), vector_from_json(j.at("input_norm").at("scale"))};
  m.hidden_norm = {vector_from_json(j.at("hidden_norm").at("location")),
                   vector_from_json(j.at("hidden_norm").at("scale"))};
  const Eigen::Index width = m.hidden_dim() + 1;
  m.heads = matrix_from_rows(j.at("heads"), width);
  m.centers = matrix_from_rows(j.at("centers"), width);
  m.assignment = j.at("assignment").get<std::vector<int>>();
  m.lambda = j.at("lambda").get<double>();
  m.options = deep_panel_options_from_json(j.at("hyperparams"));
  m.lag_columns = m.options.lag_columns;
  m.seed = j.at("seed").get<std::uint64_t>();
  if (m.input_norm.location.size() != m.backbone.input_dim() || m.hidden_norm.location.size() != m.hidden_dim()) {
    throw Error(ErrorKind::DimMismatch, "model json: normalization sizes do not match the backbone");
  }
  for (int g : m.assignment)
    if (g < 0 || g >= m.n_groups()) throw Error(ErrorKind::UnknownGroup, "model json: assignment out of range");
  return m;
}

}  // namespace ldpm
