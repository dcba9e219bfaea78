#include "ldpm/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ldpm/csv.hpp"
#include "ldpm/error.hpp"
#include "ldpm/parallel.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

namespace {

// Flattened chronological daily scores of one region and the offset of each
// period's first day inside that sequence.
struct DailySequence {
  std::vector<double> scores;
  std::vector<Eigen::Index> period_start;
};

DailySequence daily_sequence(const PanelDataset& ds, int region) {
  DailySequence seq;
  for (int t = 0; t < ds.n_periods(); ++t) {
    seq.period_start.push_back(Eigen::Index(seq.scores.size()));
    const auto& cell = ds.cell(region, t);
    for (Eigen::Index d = 0; d < cell.n_days(); ++d) seq.scores.push_back(cell.scores(d));
  }
  return seq;
}

Eigen::Index count_days(const PanelDataset& ds, int region, std::span<const int> periods) {
  Eigen::Index n = 0;
  for (int t : periods) n += ds.cell(region, t).n_days();
  return n;
}

void check_periods(const PanelDataset& ds, std::span<const int> periods, const char* who) {
  for (int t : periods) {
    if (t < 0 || t >= ds.n_periods()) {
      throw Error(ErrorKind::InsufficientData, std::string(who) + ": period " + std::to_string(t) +
                                                   " is not observed in the dataset");
    }
  }
}

}  // namespace

Eigen::MatrixXd surrogate_inputs(const PanelDataset& ds, int region, int n_lags, std::span<const int> periods) {
  check_periods(ds, periods, "surrogate_inputs");
  const auto seq = daily_sequence(ds, region);
  const int dx = ds.x_dim();
  Eigen::MatrixXd inputs(dx + n_lags, count_days(ds, region, periods));
  Eigen::Index col = 0;
  for (int t : periods) {
    const auto& cell = ds.cell(region, t);
    for (Eigen::Index d = 0; d < cell.n_days(); ++d, ++col) {
      inputs.col(col).head(dx) = cell.embeddings.row(d).transpose();
      const Eigen::Index pos = seq.period_start[std::size_t(t)] + d;
      for (int l = 1; l <= n_lags; ++l) {
        inputs(dx + l - 1, col) = pos - l >= 0 ? seq.scores[std::size_t(pos - l)] : 0.0;
      }
    }
  }
  return inputs;
}

double SurrogateModel::predict(const Eigen::VectorXd& embedding, const Eigen::VectorXd& lags) const {
  Eigen::VectorXd input(embedding.size() + lags.size());
  input << embedding, lags;
  return predict_batch(input)(0);
}

Eigen::VectorXd SurrogateModel::predict_batch(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != input_location.size()) {
    throw Error(ErrorKind::DimMismatch, "surrogate model expects " + std::to_string(input_location.size()) +
                                            " inputs, got " + std::to_string(inputs.rows()));
  }
  Eigen::MatrixXd scaled = (inputs.colwise() - input_location).array().colwise() / input_scale.array();
  return (net.forward_batch(scaled).row(0).transpose().array() * target_scale + target_location).matrix();
}

SurrogateModel fit_surrogate(const PanelDataset& ds, int region, std::span<const int> periods,
                             const SurrogateOptions& options, std::uint64_t seed) {
  if (region < 0 || region >= ds.n_units()) throw Error(ErrorKind::InsufficientData, "fit_surrogate: unknown region");
  const Eigen::MatrixXd inputs = surrogate_inputs(ds, region, options.n_lags, periods);
  const Eigen::Index n = inputs.cols();
  if (n < options.n_lags + 1) {
    throw Error(ErrorKind::InsufficientData, "fit_surrogate: region " + std::to_string(region) + " has " +
                                                 std::to_string(n) + " observations, need at least " +
                                                 std::to_string(options.n_lags + 1));
  }
  Eigen::VectorXd targets(n);
  Eigen::Index col = 0;
  for (int t : periods) {
    const auto& cell = ds.cell(region, t);
    for (Eigen::Index d = 0; d < cell.n_days(); ++d) targets(col++) = cell.scores(d);
  }

  SurrogateModel model;
  model.region = region;
  model.n_lags = options.n_lags;
  model.input_location = inputs.rowwise().mean();
  model.input_scale =
      ((inputs.colwise() - model.input_location).rowwise().squaredNorm() / double(n)).cwiseSqrt();
  for (Eigen::Index r = 0; r < model.input_scale.size(); ++r)
    if (!(model.input_scale(r) > 1e-12)) model.input_scale(r) = 1.0;
  model.target_location = targets.mean();
  model.target_scale = std::sqrt((targets.array() - model.target_location).square().mean());
  const bool constant_target = !(model.target_scale > 1e-12);
  if (constant_target) model.target_scale = 1.0;

  std::vector<int> widths{int(inputs.rows())};
  std::vector<Activation> acts;
  for (int h : options.hidden) {
    widths.push_back(h);
    acts.push_back(Activation::Relu);
  }
  widths.push_back(1);
  acts.push_back(Activation::Identity);
  Rng init_rng(seed, Stream::SurrogateInit, std::uint64_t(region));
  model.net = FeedForwardNet::initialized(widths, acts, init_rng);
  if (constant_target) {
    // nothing to learn: predict the training constant
    const int last = model.net.n_layers() - 1;
    model.net.weight(last).setZero();
    model.net.bias(last).setZero();
    return model;
  }

  const Eigen::MatrixXd scaled =
      (inputs.colwise() - model.input_location).array().colwise() / model.input_scale.array();
  const Eigen::VectorXd scaled_targets = (targets.array() - model.target_location) / model.target_scale;
  Rng shuffle_rng(seed, Stream::SurrogateShuffle, std::uint64_t(region));
  fit_regression(model.net, scaled, scaled_targets, options.training, shuffle_rng);
  return model;
}

std::vector<Eigen::VectorXd> residuals(const SurrogateModel& model, const PanelDataset& ds, int region,
                                       std::span<const int> periods) {
  const Eigen::MatrixXd inputs = surrogate_inputs(ds, region, model.n_lags, periods);
  const Eigen::VectorXd fitted = model.predict_batch(inputs);
  std::vector<Eigen::VectorXd> out;
  Eigen::Index col = 0;
  for (int t : periods) {
    const auto& cell = ds.cell(region, t);
    out.push_back(cell.scores - fitted.segment(col, cell.n_days()));
    col += cell.n_days();
  }
  return out;
}

Eigen::Vector3d residual_features(const Eigen::VectorXd& r) {
  if (r.size() == 0) return Eigen::Vector3d::Zero();
  const double mean = r.mean();
  const double sd = std::sqrt((r.array() - mean).square().mean());
  const Eigen::Index tail = std::min<Eigen::Index>(5, r.size());
  return {mean, sd, r.tail(tail).mean()};
}

Eigen::MatrixXd forecast_residuals(const SurrogateModel& model, const PanelDataset& ds, int region,
                                   std::span<const int> periods) {
  check_periods(ds, periods, "forecast_residuals");
  const auto res = residuals(model, ds, region, periods);
  Eigen::MatrixXd out(Eigen::Index(periods.size()), kResidualFeatureDim);
  for (std::size_t k = 0; k < res.size(); ++k) out.row(Eigen::Index(k)) = residual_features(res[k]).transpose();
  return out;
}

Stage1Result fit_stage1(const PanelDataset& ds, std::span<const int> train_periods, const SurrogateOptions& options,
                        std::uint64_t seed, int threads) {
  Stage1Result result;
  result.models.resize(std::size_t(ds.n_units()));
  auto& panel = result.residuals;
  panel.n_units = ds.n_units();
  panel.n_periods = ds.n_periods();
  panel.eps_s.resize(std::size_t(ds.n_units()) * std::size_t(ds.n_periods()));
  panel.features.resize(Eigen::Index(ds.n_units()) * ds.n_periods(), kResidualFeatureDim);
  const auto all = period_range(0, ds.n_periods());
  parallel_for(ds.n_units(), threads, [&](int i) {
    auto& model = result.models[std::size_t(i)];
    model = fit_surrogate(ds, i, train_periods, options, seed);
    auto res = residuals(model, ds, i, all);
    for (int t = 0; t < ds.n_periods(); ++t) {
      const auto idx = panel.cell_index(i, t);
      panel.features.row(idx) = residual_features(res[std::size_t(t)]).transpose();
      panel.eps_s[std::size_t(idx)] = std::move(res[std::size_t(t)]);
    }
  });
  return result;
}

void write_residuals_csv(const PanelDataset& ds, const ResidualPanel& panel, const std::filesystem::path& path) {
  csv::Writer w(path);
  w.field("unit").field("period").field("day").field("residual");
  w.end_row();
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t = 0; t < ds.n_periods(); ++t) {
      const auto& r = panel.eps_s[std::size_t(panel.cell_index(i, t))];
      for (Eigen::Index d = 0; d < r.size(); ++d) {
        w.field(ds.unit_labels()[std::size_t(i)]).field(ds.period_labels()[std::size_t(t)]);
        w.field(static_cast<long long>(d + 1)).field(r(d));
        w.end_row();
      }
    }
  }
}

ResidualPanel read_residuals_csv(const PanelDataset& ds, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "missing " + path.string());
  const auto table = csv::read(path);
  const std::string file = path.string();
  const auto cu = table.column("unit", file);
  const auto cp = table.column("period", file);
  const auto cd = table.column("day", file);
  const auto cr = table.column("residual", file);
  std::map<std::string, int> unit_index, period_index;
  for (int i = 0; i < ds.n_units(); ++i) unit_index[ds.unit_labels()[std::size_t(i)]] = i;
  for (int t = 0; t < ds.n_periods(); ++t) period_index[ds.period_labels()[std::size_t(t)]] = t;

  ResidualPanel panel;
  panel.n_units = ds.n_units();
  panel.n_periods = ds.n_periods();
  panel.eps_s.resize(std::size_t(ds.n_units()) * std::size_t(ds.n_periods()));
  for (int i = 0; i < ds.n_units(); ++i)
    for (int t = 0; t < ds.n_periods(); ++t)
      panel.eps_s[std::size_t(panel.cell_index(i, t))] = Eigen::VectorXd::Constant(ds.cell(i, t).n_days(), NAN);

  for (std::size_t k = 0; k < table.rows.size(); ++k) {
    const auto& row = table.rows[k];
    const std::string where = file + ":" + std::to_string(table.line_numbers[k]);
    const auto u = unit_index.find(row[cu]);
    const auto p = period_index.find(row[cp]);
    if (u == unit_index.end() || p == period_index.end()) {
      throw Error(ErrorKind::Io, where + ": unknown unit/period " + row[cu] + "/" + row[cp]);
    }
    auto& cell = panel.eps_s[std::size_t(panel.cell_index(u->second, p->second))];
    const long long day = csv::parse_int(row[cd], where);
    if (day < 1 || day > cell.size()) throw Error(ErrorKind::Io, where + ": day " + row[cd] + " out of range");
    cell(day - 1) = csv::parse_double(row[cr], where);
  }
  panel.features.resize(Eigen::Index(ds.n_units()) * ds.n_periods(), kResidualFeatureDim);
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t = 0; t < ds.n_periods(); ++t) {
      const auto idx = panel.cell_index(i, t);
      const auto& r = panel.eps_s[std::size_t(idx)];
      if (r.hasNaN()) {
        throw Error(ErrorKind::Io, file + ": residuals missing for " + ds.unit_labels()[std::size_t(i)] + "/" +
                                       ds.period_labels()[std::size_t(t)]);
      }
      panel.features.row(idx) = residual_features(r).transpose();
    }
  }
  return panel;
}

}  // namespace ldpm
