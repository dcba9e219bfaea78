#include "ldpm/baselines.hpp"

#include "ldpm/error.hpp"

namespace ldpm {

namespace {

Eigen::MatrixXd design(const LinearPanelModel& model, const PanelDataset& ds, int unit,
                       std::span<const int> periods) {
  const Eigen::Index width = ds.z_dim() + model.reducer.rank();
  Eigen::MatrixXd X(Eigen::Index(periods.size()), width);
  for (std::size_t r = 0; r < periods.size(); ++r) {
    X.row(Eigen::Index(r)) = model.features(ds, unit, periods[r], ds.z_row(unit, periods[r])).transpose();
  }
  return X;
}

LinearPanelModel fit_within(LinearPanelModel model, const PanelDataset& ds, std::span<const int> periods) {
  if (periods.empty()) throw Error(ErrorKind::InsufficientData, "linear panel fit: no training periods");
  const int n = ds.n_units();
  const Eigen::Index tp = Eigen::Index(periods.size());
  const Eigen::Index width = ds.z_dim() + model.reducer.rank();
  Eigen::MatrixXd X(n * tp, width);
  Eigen::VectorXd y(n * tp);
  std::vector<Eigen::RowVectorXd> x_means;
  std::vector<double> y_means;
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd Xi = design(model, ds, i, periods);
    Eigen::VectorXd yi(tp);
    for (Eigen::Index r = 0; r < tp; ++r) yi(r) = ds.y(i, periods[std::size_t(r)]);
    x_means.push_back(Xi.colwise().mean());
    y_means.push_back(yi.mean());
    X.middleRows(i * tp, tp) = Xi.rowwise() - x_means.back();
    y.segment(i * tp, tp) = yi.array() - y_means.back();
  }
  // Columns without within-unit variation are absorbed by the fixed effects;
  // they are not identified and keep a zero slope.
  std::vector<Eigen::Index> varying;
  for (Eigen::Index c = 0; c < width; ++c)
    if (X.col(c).cwiseAbs().maxCoeff() > 1e-12) varying.push_back(c);
  model.slopes = Eigen::VectorXd::Zero(width);
  if (!varying.empty()) {
    const Eigen::VectorXd b = ols_fit(X(Eigen::all, varying), y);
    model.slopes(varying) = b;
  }
  model.intercepts.resize(n);
  for (int i = 0; i < n; ++i) {
    model.intercepts(i) = y_means[std::size_t(i)] - (width > 0 ? x_means[std::size_t(i)].dot(model.slopes) : 0.0);
  }
  return model;
}

}  // namespace

Eigen::VectorXd LinearPanelModel::features(const PanelDataset& ds, int unit, int period,
                                           const Eigen::RowVectorXd& z) const {
  if (z.size() != ds.z_dim()) throw Error(ErrorKind::DimMismatch, "linear panel: covariate width mismatch");
  Eigen::VectorXd f(ds.z_dim() + reducer.rank());
  f.head(ds.z_dim()) = z.transpose();
  if (uses_embeddings()) {
    if (ds.cell(unit, period).n_days() == 0) {
      throw Error(ErrorKind::MissingFeatures, "linear panel: no text features for unit " + std::to_string(unit) +
                                                  ", period " + std::to_string(period));
    }
    f.tail(reducer.rank()) = reducer.transform(month_features(ds, unit, period).transpose()).transpose();
  }
  return f;
}

double LinearPanelModel::predict(const PanelDataset& ds, int unit, int period, const Eigen::RowVectorXd& z) const {
  if (unit < 0 || unit >= intercepts.size()) throw Error(ErrorKind::DimMismatch, "linear panel: unknown unit");
  if (period < 0 || period >= ds.n_periods()) {
    throw Error(ErrorKind::MissingFeatures, "linear panel: no covariates for period " + std::to_string(period));
  }
  const Eigen::VectorXd f = features(ds, unit, period, z);
  return intercepts(unit) + (f.size() > 0 ? f.dot(slopes) : 0.0);
}

double LinearPanelModel::predict(const PanelDataset& ds, int unit, int period) const {
  return predict(ds, unit, period, ds.z_row(unit, period));
}

LinearPanelModel fit_lpm(const PanelDataset& ds, std::span<const int> train_periods,
                         std::vector<LagColumn> lag_columns) {
  LinearPanelModel model;
  model.lag_columns = std::move(lag_columns);
  return fit_within(std::move(model), ds, train_periods);
}

LinearPanelModel fit_lpm_e(const PanelDataset& ds, int rank, std::span<const int> train_periods,
                           std::vector<LagColumn> lag_columns) {
  LinearPanelModel model;
  model.lag_columns = std::move(lag_columns);
  model.reducer = EmbeddingReducer<double>::fit(month_feature_matrix(ds, train_periods), rank);
  return fit_within(std::move(model), ds, train_periods);
}

Eigen::VectorXd predict_h_step(const LinearPanelModel& model, const PanelDataset& ds, int unit, int origin,
                               int horizon) {
  if (horizon < 1) throw Error(ErrorKind::Config, "predict_h_step: horizon must be >= 1");
  if (origin < 0 || origin + horizon > ds.n_periods()) {
    throw Error(ErrorKind::MissingFeatures, "predict_h_step: covariates end at period " +
                                                std::to_string(ds.n_periods() - 1));
  }
  return recursive_forecast(ds, model.lag_columns, unit, origin, horizon,
                            [&](int t, const Eigen::RowVectorXd& z) { return model.predict(ds, unit, t, z); });
}

double pmse(std::span<const double> predictions, std::span<const double> truths) {
  if (predictions.size() != truths.size()) throw Error(ErrorKind::LengthMismatch, "pmse: lengths differ");
  if (predictions.empty()) throw Error(ErrorKind::EmptyInput, "pmse: no predictions");
  double total = 0.0;
  for (std::size_t k = 0; k < truths.size(); ++k) {
    const double e = predictions[k] - truths[k];
    total += e * e;
  }
  return total / double(truths.size());
}

}  // namespace ldpm
