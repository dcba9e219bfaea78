#include "ldpm/commands.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <numeric>

#include "ldpm/conformal.hpp"
#include "ldpm/error.hpp"
#include "ldpm/evaluation.hpp"
#include "ldpm/parallel.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

namespace {

using nlohmann::json;

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json lag_json(const std::vector<LagColumn>& cols) {
  json out = json::array();
  for (const auto& lc : cols) out.push_back({{"column", lc.column + 1}, {"lag", lc.lag}});
  return out;
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, path.string() + ": " + e.what());
  }
}

int workers(const RunConfig& cfg) { return cfg.threads > 0 ? cfg.threads : thread_limit(); }

const std::filesystem::path& data_dir(const RunConfig& cfg) {
  if (!cfg.data) throw Error(ErrorKind::Config, "this command needs \"data\" (a dataset directory)");
  return *cfg.data;
}

std::vector<LagColumn> resolve_lags(const RunConfig& cfg, const PanelDataset& ds) {
  std::vector<LagColumn> cols;
  if (cfg.lag_columns) {
    cols = *cfg.lag_columns;
  } else if (std::filesystem::exists(data_dir(cfg) / "truth.json")) {
    const json truth = read_json(data_dir(cfg) / "truth.json");
    for (const auto& item : truth.value("lag_columns", json::array()))
      cols.push_back({item.at("column").get<int>() - 1, item.at("lag").get<int>()});
  }
  for (const auto& lc : cols) {
    if (lc.column < 0 || lc.column >= ds.z_dim()) {
      throw Error(ErrorKind::Config, "lag column " + std::to_string(lc.column + 1) + " exceeds z dimension " +
                                         std::to_string(ds.z_dim()));
    }
  }
  return cols;
}

struct Fitted {
  DeepPanelModel model;
  ResidualPanel residuals;
  std::optional<TrainReport> report;
};

Fitted fit_or_load(const RunConfig& cfg, const PanelDataset& ds, std::span<const int> train) {
  Fitted f;
  if (cfg.model_dir) {
    f.model = model_from_json(read_json(*cfg.model_dir / "model.json"));
    f.residuals = read_residuals_csv(ds, *cfg.model_dir / "residuals.csv");
    if (f.model.n_units() != ds.n_units()) {
      throw Error(ErrorKind::DimMismatch, "model has " + std::to_string(f.model.n_units()) + " units, dataset " +
                                              std::to_string(ds.n_units()));
    }
    return f;
  }
  auto stage1 = fit_stage1(ds, train, cfg.pipeline.surrogate, cfg.seed, workers(cfg));
  DeepPanelOptions options = cfg.pipeline.deep;
  options.lag_columns = resolve_lags(cfg, ds);
  auto result = ldpm::train(ds, stage1.residuals, train, options, cfg.seed);
  f.model = std::move(result.model);
  f.report = std::move(result.report);
  f.residuals = std::move(stage1.residuals);
  return f;
}

std::vector<int> training_periods(const RunConfig& cfg, const PanelDataset& ds) {
  if (!cfg.split) return period_range(0, ds.n_periods());
  if (cfg.split->train_end > ds.n_periods()) {
    throw Error(ErrorKind::BadSplit, "train_end " + std::to_string(cfg.split->train_end) + " exceeds " +
                                         std::to_string(ds.n_periods()) + " periods");
  }
  return period_range(0, cfg.split->train_end);
}

double one_step_pmse(const Fitted& f, const PanelDataset& ds, std::span<const int> periods) {
  double total = 0.0;
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t : periods) {
      const double e = ds.y(i, t) - predict_one_step(f.model, ds, f.residuals, i, t);
      total += e * e;
    }
  }
  return total / double(ds.n_units() * std::ssize(periods));
}

}  // namespace

void cmd_simulate(const RunConfig& cfg) {
  SimConfig sim = cfg.simulation;
  sim.seed = cfg.seed;
  const Simulation s = simulate_panel(sim);
  save_dataset(s.data, cfg.out);
  std::vector<int> groups = s.truth.groups;
  for (int& g : groups) ++g;
  const json truth = {{"config", to_json(sim)},
                      {"groups", groups},
                      {"beta", matrix_json(s.truth.coefficients.beta)},
                      {"theta_s", matrix_json(s.truth.coefficients.theta_s)},
                      {"centers", matrix_json(s.truth.coefficients.centers)},
                      {"surrogate_centers", matrix_json(s.truth.coefficients.surrogate_centers)},
                      {"map", {{"weight", matrix_json(s.truth.map.weight)},
                               {"phase", matrix_json(s.truth.map.phase.transpose())}}},
                      {"signal", matrix_json(s.truth.signal)},
                      {"lag_columns", lag_json(s.truth.lag_columns)}};
  write_json(truth, cfg.out / "truth.json");
}

void cmd_fit(const RunConfig& cfg) {
  const PanelDataset ds = load_dataset(data_dir(cfg));
  const auto train = training_periods(cfg, ds);
  RunConfig fresh = cfg;
  fresh.model_dir.reset();
  const Fitted f = fit_or_load(fresh, ds, train);
  std::filesystem::create_directories(cfg.out);
  write_json(to_json(f.model), cfg.out / "model.json");
  write_residuals_csv(ds, f.residuals, cfg.out / "residuals.csv");

  json report = to_json(*f.report);
  report["seed"] = cfg.seed;
  report["train_periods"] = train.size();
  report["train_pmse"] = one_step_pmse(f, ds, train);
  const auto rest = period_range(int(train.size()), ds.n_periods());
  if (!rest.empty()) report["holdout_pmse"] = one_step_pmse(f, ds, rest);
  std::vector<int> groups = f.model.assignment;
  for (int& g : groups) ++g;
  report["groups"] = groups;
  write_json(report, cfg.out / "report.json");
}

void cmd_evaluate(const RunConfig& cfg) {
  ComparisonConfig cc;
  cc.sim = cfg.simulation;
  cc.pipeline = cfg.pipeline;
  cc.methods = cfg.evaluation.methods;
  cc.horizons = cfg.evaluation.horizons;
  cc.rhos = cfg.evaluation.rhos;
  cc.n_reps = cfg.evaluation.n_reps;
  cc.seed = cfg.seed;
  cc.threads = workers(cfg);
  const PmseTable table = run_comparison(cc);
  std::filesystem::create_directories(cfg.out);
  write_pmse_csv(table, cfg.out / "pmse_table.csv");
  write_summary_md(table, cfg.out / "summary.md");
}

void cmd_conformal(const RunConfig& cfg) {
  const PanelDataset ds = load_dataset(data_dir(cfg));
  if (!cfg.split || cfg.split->horizon < 1 || cfg.split->cal_end <= cfg.split->train_end) {
    throw Error(ErrorKind::Config, "conformal needs split.train_end < split.cal_end and split.horizon >= 1");
  }
  const ChronoSplit split = chrono_split(ds.n_periods(), cfg.split->train_end, cfg.split->cal_end, cfg.split->horizon);
  const Fitted f = fit_or_load(cfg, ds, split.train);
  const auto& groups = f.model.assignment;

  std::vector<double> preds, truths;
  std::vector<int> labels;
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t : split.calibration) {
      preds.push_back(predict_one_step(f.model, ds, f.residuals, i, t));
      truths.push_back(ds.y(i, t));
      labels.push_back(groups[std::size_t(i)]);
    }
  }
  const auto cal = calibrate(preds, truths, labels, cfg.alpha, f.model.n_groups());

  std::vector<IntervalRow> rows;
  std::vector<Interval> bounds;
  std::vector<double> test_truths;
  std::vector<int> test_groups;
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t : split.test) {
      IntervalRow row;
      row.unit = ds.unit_labels()[std::size_t(i)];
      row.period = ds.period_labels()[std::size_t(t)];
      row.group = groups[std::size_t(i)];
      row.prediction = predict_one_step(f.model, ds, f.residuals, i, t);
      row.bounds = interval(cal, row.prediction, row.group);
      row.truth = ds.y(i, t);
      bounds.push_back(row.bounds);
      test_truths.push_back(row.truth);
      test_groups.push_back(row.group);
      rows.push_back(std::move(row));
    }
  }
  std::filesystem::create_directories(cfg.out);
  write_intervals_csv(rows, cfg.out / "intervals.csv");
  const auto cov = coverage(bounds, test_truths, test_groups);
  write_json({{"alpha", cfg.alpha},
              {"quantiles", cal.quantiles},
              {"calibration_counts", cal.counts},
              {"max_score_fallback", cal.max_score_fallback},
              {"coverage", cov.overall},
              {"group_coverage", cov.per_group},
              {"group_test_counts", cov.per_group_count}},
             cfg.out / "conformal.json");
}

void cmd_diagnose(const RunConfig& cfg) {
  const PanelDataset ds = load_dataset(data_dir(cfg));
  const auto train = training_periods(cfg, ds);
  const Fitted f = fit_or_load(cfg, ds, train);
  const DeepPanelModel& model = f.model;
  Rng rng(cfg.seed, Stream::Diagnostics);

  // Symmetry: random permutation of the final hidden units, plus positive
  // rescaling when the last layer is relu.
  const int dh = model.hidden_dim();
  const bool relu_final = model.backbone.layer(model.backbone.n_layers() - 1).activation == Activation::Relu;
  std::vector<int> perm(static_cast<std::size_t>(dh));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<double> scales(static_cast<std::size_t>(dh), 1.0);
  if (relu_final)
    for (double& c : scales) c = rng.uniform(0.5, 2.0);
  const DeepPanelModel moved = apply_symmetry(model, perm, scales);

  const int n = cfg.diagnose.n_inputs;
  Eigen::MatrixXd inputs(model.backbone.input_dim(), n);
  for (Eigen::Index k = 0; k < inputs.size(); ++k) inputs.data()[k] = rng.normal();
  std::vector<int> units(static_cast<std::size_t>(n));
  for (int& u : units) u = int(rng.index(std::size_t(model.n_units())));
  const double delta_centers =
      (model.predict_with_centers(units, inputs) - moved.predict_with_centers(units, inputs)).cwiseAbs().maxCoeff();
  const double delta_heads =
      (model.predict_with_heads(units, inputs) - moved.predict_with_heads(units, inputs)).cwiseAbs().maxCoeff();
  const bool same_groups = assign_groups(moved) == assign_groups(model);

  // Gradient checks on a few training cells.
  const CellBatch batch = build_cells(ds, f.residuals, train);
  std::vector<Eigen::Index> cells;
  for (int k = 0; k < cfg.diagnose.grad_cells && k < batch.size(); ++k)
    cells.push_back(Eigen::Index(rng.index(std::size_t(batch.size()))));
  const double lambda = model.lambda > 0.0 ? model.lambda : cfg.pipeline.deep.lambda;
  DeepPanelModel probe = model;
  const Objective objective = [&](const Eigen::VectorXd& params, Eigen::VectorXd* grad) {
    unpack_parameters(probe, params);
    if (!grad) return penalized_loss(probe, batch, cells, lambda);
    DeepPanelGradient g;
    const double loss = penalized_loss(probe, batch, cells, lambda, &g);
    *grad = pack_gradient(g);
    return loss;
  };
  const double penalized_error = max_relative_gradient_error(objective, pack_parameters(model));
  Eigen::MatrixXd sub(batch.inputs.rows(), Eigen::Index(cells.size()));
  Eigen::MatrixXd targets(dh, Eigen::Index(cells.size()));
  for (std::size_t k = 0; k < cells.size(); ++k) sub.col(Eigen::Index(k)) = model.input_norm.apply(batch.inputs.col(cells[k]));
  for (Eigen::Index k = 0; k < targets.size(); ++k) targets.data()[k] = rng.normal();
  const double backbone_error = grad_check(model.backbone, sub, targets);

  const ShortcutGradients sc = shortcut_diagnostic(ds, f.residuals, train);
  const json report = {
      {"symmetry",
       {{"n_inputs", n},
        {"scaled", relu_final},
        {"max_abs_delta_centers", delta_centers},
        {"max_abs_delta_heads", delta_heads},
        {"max_abs_delta", std::max(delta_centers, delta_heads)},
        {"assignment_unchanged", same_groups}}},
      {"gradient",
       {{"penalized_loss_max_rel_error", penalized_error}, {"backbone_max_rel_error", backbone_error}}},
      {"shortcut",
       {{"direct", sc.direct},
        {"residual", sc.residual},
        {"ratio", sc.residual != 0.0 ? std::abs(sc.direct) / std::abs(sc.residual) : 0.0}}}};
  std::filesystem::create_directories(cfg.out);
  write_json(report, cfg.out / "diagnose.json");
}

void run_command(const std::string& command, const RunConfig& cfg) {
  if (command == "simulate") return cmd_simulate(cfg);
  if (command == "fit") return cmd_fit(cfg);
  if (command == "evaluate") return cmd_evaluate(cfg);
  if (command == "conformal") return cmd_conformal(cfg);
  if (command == "diagnose") return cmd_diagnose(cfg);
  throw Error(ErrorKind::Config, "unknown command '" + command + "'");
}

int exit_code(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) return is_numeric_failure(err->kind()) ? 3 : 2;
  if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::out_of_range*>(&e)) return 2;
  return 1;
}

}  // namespace ldpm
