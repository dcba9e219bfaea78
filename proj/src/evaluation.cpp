#include "ldpm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ldpm/baselines.hpp"
#include "ldpm/csv.hpp"
#include "ldpm/error.hpp"
#include "ldpm/parallel.hpp"

namespace ldpm {

ForecastWindow forecast_window(int n_periods, int horizon) {
  if (horizon < 1) throw Error(ErrorKind::BadSplit, "forecast window: horizon must be >= 1");
  ForecastWindow w;
  w.train_end = n_periods - horizon - 1;
  w.origin = w.train_end;
  w.steps = horizon + 1;
  w.first_scored = n_periods - horizon;
  if (w.train_end < 2) {
    throw Error(ErrorKind::BadSplit, "forecast window: horizon " + std::to_string(horizon) + " leaves " +
                                         std::to_string(w.train_end) + " training periods");
  }
  return w;
}

PipelineResult run_pipeline(const Simulation& sim, int horizon, const std::vector<std::string>& methods,
                            const PipelineOptions& options, std::uint64_t seed) {
  const auto& ds = sim.data;
  const auto w = forecast_window(ds.n_periods(), horizon);
  const auto train_periods = period_range(0, w.train_end);
  const int skip = w.first_scored - w.origin;

  std::vector<double> truths;
  for (int i = 0; i < ds.n_units(); ++i)
    for (int t = w.first_scored; t < ds.n_periods(); ++t) truths.push_back(ds.y(i, t));

  auto score = [&](auto&& forecast) {
    std::vector<double> preds;
    for (int i = 0; i < ds.n_units(); ++i) {
      const Eigen::VectorXd f = forecast(i);
      for (Eigen::Index s = skip; s < f.size(); ++s) preds.push_back(f(s));
    }
    return pmse(preds, truths);
  };

  PipelineResult result;
  for (const auto& method : methods) {
    if (method == "oracle") {
      result.pmse[method] = pmse(truths, truths);
    } else if (method == "LPM") {
      const auto m = fit_lpm(ds, train_periods, sim.truth.lag_columns);
      result.pmse[method] = score([&](int i) { return predict_h_step(m, ds, i, w.origin, w.steps); });
    } else if (method == "LPM-E") {
      const auto m = fit_lpm_e(ds, options.lpm_rank, train_periods, sim.truth.lag_columns);
      result.pmse[method] = score([&](int i) { return predict_h_step(m, ds, i, w.origin, w.steps); });
    } else if (method == "LDPM") {
      const auto stage1 = fit_stage1(ds, train_periods, options.surrogate, seed);
      DeepPanelOptions deep = options.deep;
      deep.lag_columns = sim.truth.lag_columns;
      const auto fitted = train(ds, stage1.residuals, train_periods, deep, seed);
      result.pmse[method] = score(
          [&](int i) { return predict_h_step(fitted.model, ds, stage1.residuals, i, w.origin, w.steps); });
      result.group_ari = adjusted_rand_index(fitted.model.assignment, sim.truth.groups);
    } else {
      throw Error(ErrorKind::Config, "unknown method '" + method + "' (expected LPM, LPM-E, LDPM or oracle)");
    }
  }
  return result;
}

const PmseCell& PmseTable::at(const std::string& method, int horizon, double rho) const {
  for (const auto& c : cells)
    if (c.method == method && c.horizon == horizon && c.rho == rho) return c;
  throw Error(ErrorKind::Config, "PmseTable: no cell for " + method);
}

std::uint64_t replication_seed(std::uint64_t root, int rep) {
  return derive_seed(root, Stream::Replication, std::uint64_t(rep));
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1) / double(v.size()));
}

double paired_standard_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorKind::LengthMismatch, "paired_standard_error: lengths differ");
  std::vector<double> d(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) d[k] = a[k] - b[k];
  return standard_error(d);
}

PmseTable run_comparison(const ComparisonConfig& config) {
  if (config.n_reps < 1) throw Error(ErrorKind::Config, "run_comparison: n_reps must be >= 1");
  if (config.methods.empty() || config.horizons.empty() || config.rhos.empty()) {
    throw Error(ErrorKind::Config, "run_comparison: empty grid");
  }
  const std::size_t n_rho = config.rhos.size();
  const std::size_t n_h = config.horizons.size();
  // results[rep][rho][horizon]
  std::vector<std::vector<std::vector<PipelineResult>>> results(
      std::size_t(config.n_reps), std::vector<std::vector<PipelineResult>>(n_rho, std::vector<PipelineResult>(n_h)));
  parallel_for(config.n_reps, config.threads, [&](int rep) {
    const std::uint64_t s = replication_seed(config.seed, rep);
    for (std::size_t r = 0; r < n_rho; ++r) {
      SimConfig sc = config.sim;
      sc.rho = config.rhos[r];
      sc.seed = s;
      const auto sim = simulate_panel(sc);
      for (std::size_t h = 0; h < n_h; ++h) {
        results[std::size_t(rep)][r][h] = run_pipeline(sim, config.horizons[h], config.methods, config.pipeline, s);
      }
    }
  });

  PmseTable table;
  for (std::size_t r = 0; r < n_rho; ++r) {
    for (const auto& method : config.methods) {
      for (std::size_t h = 0; h < n_h; ++h) {
        PmseCell cell;
        cell.method = method;
        cell.horizon = config.horizons[h];
        cell.rho = config.rhos[r];
        cell.n_reps = config.n_reps;
        for (const auto& rep : results) {
          cell.values.push_back(rep[r][h].pmse.at(method));
          if (method == "LDPM") cell.group_ari.push_back(rep[r][h].group_ari);
        }
        cell.mean = mean(cell.values);
        cell.std_error = standard_error(cell.values);
        table.cells.push_back(std::move(cell));
      }
    }
  }
  return table;
}

void write_pmse_csv(const PmseTable& table, const std::filesystem::path& path) {
  csv::Writer w(path);
  for (const char* h : {"method", "horizon", "rho", "mean", "stderr", "n_reps"}) w.field(h);
  w.end_row();
  for (const auto& c : table.cells) {
    w.field(c.method).field(c.horizon).field(c.rho).field(c.mean).field(c.std_error).field(c.n_reps);
    w.end_row();
  }
}

void write_summary_md(const PmseTable& table, const std::filesystem::path& path) {
  std::vector<double> rhos;
  std::vector<int> horizons;
  std::vector<std::string> methods;
  for (const auto& c : table.cells) {
    if (std::find(rhos.begin(), rhos.end(), c.rho) == rhos.end()) rhos.push_back(c.rho);
    if (std::find(horizons.begin(), horizons.end(), c.horizon) == horizons.end()) horizons.push_back(c.horizon);
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
  }
  std::ostringstream md;
  md << "# PMSE(H)\n";
  auto fixed = [](double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(3);
    s << v;
    return s.str();
  };
  for (double rho : rhos) {
    md << "\n## rho = " << csv::format(rho) << "\n\n| Method |";
    for (int h : horizons) md << " H=" << h << " |";
    md << " Average |\n|---|";
    for (std::size_t k = 0; k <= horizons.size(); ++k) md << "---:|";
    md << "\n";
    for (const auto& m : methods) {
      md << "| " << m << " |";
      double total = 0.0;
      int n = 0;
      for (int h : horizons) {
        const auto& c = table.at(m, h, rho);
        md << " " << fixed(c.mean) << " (" << fixed(c.std_error) << ") |";
        total += c.mean;
        ++n;
      }
      md << " " << fixed(total / n) << " |\n";
    }
  }
  md << "\nEntries are means over replications with standard errors in parentheses.\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << md.str();
}

}  // namespace ldpm
