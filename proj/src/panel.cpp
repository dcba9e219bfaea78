#include "ldpm/panel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>

#include "ldpm/csv.hpp"
#include "ldpm/error.hpp"

namespace ldpm {

PanelDataset::PanelDataset(int n_units, int n_periods, int z_dim, int x_dim)
    : n_units_(n_units),
      n_periods_(n_periods),
      z_dim_(z_dim),
      x_dim_(x_dim),
      y_(Eigen::MatrixXd::Zero(n_units, n_periods)),
      z_(Eigen::MatrixXd::Zero(Eigen::Index(n_units) * n_periods, z_dim)),
      cells_(static_cast<std::size_t>(n_units) * n_periods) {
  if (n_units <= 0 || n_periods <= 0 || z_dim < 0 || x_dim < 0) {
    throw Error(ErrorKind::DimMismatch, "PanelDataset: invalid dimensions");
  }
  for (auto& cell : cells_) {
    cell.embeddings.resize(0, x_dim);
    cell.scores.resize(0);
  }
  for (int i = 0; i < n_units; ++i) unit_labels_.push_back(std::to_string(i + 1));
  for (int t = 0; t < n_periods; ++t) period_labels_.push_back(std::to_string(t + 1));
}

void PanelDataset::validate() const {
  if (y_.rows() != n_units_ || y_.cols() != n_periods_) throw Error(ErrorKind::DimMismatch, "y shape");
  if (z_.rows() != Eigen::Index(n_units_) * n_periods_ || z_.cols() != z_dim_) {
    throw Error(ErrorKind::DimMismatch, "z shape");
  }
  if (!y_.allFinite()) throw Error(ErrorKind::NonFinite, "y contains non-finite values");
  if (!z_.allFinite()) throw Error(ErrorKind::NonFinite, "z contains non-finite values");
  for (int i = 0; i < n_units_; ++i) {
    for (int t = 0; t < n_periods_; ++t) {
      const auto& c = cell(i, t);
      const std::string where = "cell (unit " + unit_labels_[i] + ", period " + period_labels_[t] + ")";
      if (c.embeddings.rows() != c.scores.size()) {
        throw Error(ErrorKind::DimMismatch, where + ": embeddings and scores have different day counts");
      }
      if (c.embeddings.cols() != x_dim_) throw Error(ErrorKind::DimMismatch, where + ": embedding dimension");
      if (!c.embeddings.allFinite() || !c.scores.allFinite()) {
        throw Error(ErrorKind::NonFinite, where + ": non-finite text features");
      }
    }
  }
}

Eigen::MatrixXd normalize_cpi(const Eigen::MatrixXd& raw) {
  if (!raw.allFinite()) throw Error(ErrorKind::NonFinite, "normalize_cpi: non-finite input");
  if (raw.cols() < 2) throw Error(ErrorKind::ZeroDispersion, "normalize_cpi: need at least two periods");
  Eigen::MatrixXd shifted = raw.array() - 100.0;
  for (Eigen::Index i = 0; i < shifted.rows(); ++i) {
    auto row = shifted.row(i);
    const double mean = row.mean();
    const double sd = std::sqrt((row.array() - mean).square().sum() / double(row.size() - 1));
    if (!(sd > 0.0)) {
      throw Error(ErrorKind::ZeroDispersion, "normalize_cpi: region " + std::to_string(i) + " is constant");
    }
    row /= sd;
  }
  return shifted;
}

Eigen::VectorXd pool_embeddings(const Eigen::MatrixXd& posts) {
  if (posts.rows() == 0) throw Error(ErrorKind::EmptyGroup, "pool_embeddings: no posts");
  return posts.colwise().maxCoeff().transpose();
}

double average_scores(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorKind::EmptyGroup, "average_scores: no scores");
  return std::accumulate(scores.begin(), scores.end(), 0.0) / double(scores.size());
}

double average_scores(const Eigen::VectorXd& scores) {
  return average_scores(std::span<const double>(scores.data(), std::size_t(scores.size())));
}

Eigen::VectorXd month_features(const PanelDataset& ds, int unit, int period) {
  const auto& cell = ds.cell(unit, period);
  if (cell.n_days() == 0) {
    throw Error(ErrorKind::EmptyGroup, "month_features: no days in unit " + std::to_string(unit) +
                                           ", period " + std::to_string(period));
  }
  return pool_embeddings(cell.embeddings);
}

Eigen::MatrixXd month_feature_matrix(const PanelDataset& ds, std::span<const int> periods) {
  Eigen::MatrixXd out(Eigen::Index(ds.n_units()) * Eigen::Index(periods.size()), ds.x_dim());
  Eigen::Index row = 0;
  for (int i = 0; i < ds.n_units(); ++i)
    for (int t : periods) out.row(row++) = month_features(ds, i, t).transpose();
  return out;
}

std::vector<int> period_range(int begin, int end) {
  std::vector<int> out;
  for (int t = begin; t < end; ++t) out.push_back(t);
  return out;
}

ChronoSplit chrono_split(int n_periods, int train_end, int cal_end, int horizon) {
  if (train_end <= 0 || cal_end <= train_end || horizon < 1 || cal_end + horizon > n_periods) {
    throw Error(ErrorKind::BadSplit, "chrono_split: need 0 < T1 < T2 <= T - H with H >= 1 (T=" +
                                         std::to_string(n_periods) + ", T1=" + std::to_string(train_end) +
                                         ", T2=" + std::to_string(cal_end) + ", H=" + std::to_string(horizon) + ")");
  }
  ChronoSplit split;
  split.train_end = train_end;
  split.cal_end = cal_end;
  split.horizon = horizon;
  split.train = period_range(0, train_end);
  split.calibration = period_range(train_end, cal_end);
  split.test = period_range(cal_end, cal_end + horizon);
  return split;
}

namespace {

// Integer labels sort numerically, anything else lexicographically.
std::vector<std::string> ordered_labels(std::vector<std::string> labels) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  const bool numeric = std::all_of(labels.begin(), labels.end(), [](const std::string& s) {
    try {
      csv::parse_int(s, "");
      return true;
    } catch (const Error&) {
      return false;
    }
  });
  if (numeric) {
    std::sort(labels.begin(), labels.end(), [](const std::string& a, const std::string& b) {
      return csv::parse_int(a, "") < csv::parse_int(b, "");
    });
  }
  return labels;
}

std::vector<std::size_t> prefixed_columns(const csv::Table& table, const std::string& prefix, const std::string& file) {
  std::vector<std::size_t> cols;
  for (int k = 1;; ++k) {
    const std::string name = prefix + std::to_string(k);
    auto it = std::find(table.header.begin(), table.header.end(), name);
    if (it == table.header.end()) break;
    cols.push_back(std::size_t(it - table.header.begin()));
  }
  for (const auto& h : table.header) {
    if (h.rfind(prefix, 0) == 0 && std::find_if(cols.begin(), cols.end(), [&](std::size_t c) {
                                     return table.header[c] == h;
                                   }) == cols.end()) {
      throw Error(ErrorKind::Io, file + ": column '" + h + "' breaks the " + prefix + "1.." + prefix + "d sequence");
    }
  }
  return cols;
}

}  // namespace

PanelDataset load_dataset(const std::filesystem::path& dir) {
  const auto panel_path = dir / "panel.csv";
  const auto posts_path = dir / "posts.csv";
  if (!std::filesystem::exists(panel_path)) throw Error(ErrorKind::Io, "missing " + panel_path.string());
  if (!std::filesystem::exists(posts_path)) throw Error(ErrorKind::Io, "missing " + posts_path.string());
  const auto panel = csv::read(panel_path);
  const auto posts = csv::read(posts_path);
  const std::string pfile = panel_path.string();
  const std::string qfile = posts_path.string();

  const auto pu = panel.column("unit", pfile);
  const auto pp = panel.column("period", pfile);
  const auto py = panel.column("y", pfile);
  const auto zcols = prefixed_columns(panel, "z_", pfile);
  const auto qu = posts.column("unit", qfile);
  const auto qp = posts.column("period", qfile);
  const auto qd = posts.column("day", qfile);
  const auto qs = posts.column("score", qfile);
  const auto ecols = prefixed_columns(posts, "e_", qfile);

  std::vector<std::string> units, periods;
  for (const auto& row : panel.rows) {
    units.push_back(row[pu]);
    periods.push_back(row[pp]);
  }
  units = ordered_labels(std::move(units));
  periods = ordered_labels(std::move(periods));
  if (units.empty()) throw Error(ErrorKind::Io, pfile + ": no data rows");
  std::map<std::string, int> unit_index, period_index;
  for (std::size_t k = 0; k < units.size(); ++k) unit_index[units[k]] = int(k);
  for (std::size_t k = 0; k < periods.size(); ++k) period_index[periods[k]] = int(k);

  PanelDataset ds(int(units.size()), int(periods.size()), int(zcols.size()), int(ecols.size()));
  ds.unit_labels() = units;
  ds.period_labels() = periods;
  std::vector<bool> seen(units.size() * periods.size(), false);
  for (std::size_t r = 0; r < panel.rows.size(); ++r) {
    const auto& row = panel.rows[r];
    const std::string where = pfile + ":" + std::to_string(panel.line_numbers[r]);
    const int i = unit_index.at(row[pu]);
    const int t = period_index.at(row[pp]);
    const auto idx = std::size_t(ds.cell_index(i, t));
    if (seen[idx]) throw Error(ErrorKind::Io, where + ": duplicate (unit, period)");
    seen[idx] = true;
    const double y = csv::parse_double(row[py], where);
    if (!std::isfinite(y)) throw Error(ErrorKind::NonFinite, where + ": y is not finite");
    ds.y()(i, t) = y;
    for (std::size_t k = 0; k < zcols.size(); ++k) {
      const double v = csv::parse_double(row[zcols[k]], where);
      if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, where + ": z is not finite");
      ds.z()(Eigen::Index(idx), Eigen::Index(k)) = v;
    }
  }
  for (int i = 0; i < ds.n_units(); ++i)
    for (int t = 0; t < ds.n_periods(); ++t)
      if (!seen[std::size_t(ds.cell_index(i, t))]) {
        throw Error(ErrorKind::Io, pfile + ": missing y for unit " + units[i] + ", period " + periods[t]);
      }

  // cell -> day -> post rows
  std::vector<std::map<long long, std::vector<std::size_t>>> by_day(seen.size());
  for (std::size_t r = 0; r < posts.rows.size(); ++r) {
    const auto& row = posts.rows[r];
    const std::string where = qfile + ":" + std::to_string(posts.line_numbers[r]);
    auto ui = unit_index.find(row[qu]);
    auto ti = period_index.find(row[qp]);
    if (ui == unit_index.end() || ti == period_index.end()) {
      throw Error(ErrorKind::Io, where + ": (unit, period) not present in panel.csv");
    }
    const long long day = csv::parse_int(row[qd], where);
    by_day[std::size_t(ds.cell_index(ui->second, ti->second))][day].push_back(r);
  }
  const Eigen::Index dx = Eigen::Index(ecols.size());
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t = 0; t < ds.n_periods(); ++t) {
      const auto& days = by_day[std::size_t(ds.cell_index(i, t))];
      auto& cell = ds.cell(i, t);
      cell.embeddings.resize(Eigen::Index(days.size()), dx);
      cell.scores.resize(Eigen::Index(days.size()));
      Eigen::Index d = 0;
      for (const auto& [day, rows] : days) {
        Eigen::MatrixXd post_embeddings(Eigen::Index(rows.size()), dx);
        std::vector<double> scores;
        for (std::size_t k = 0; k < rows.size(); ++k) {
          const auto& row = posts.rows[rows[k]];
          const std::string where = qfile + ":" + std::to_string(posts.line_numbers[rows[k]]);
          const double s = csv::parse_double(row[qs], where);
          if (!std::isfinite(s)) throw Error(ErrorKind::NonFinite, where + ": score is not finite");
          scores.push_back(s);
          for (Eigen::Index e = 0; e < dx; ++e) {
            const double v = csv::parse_double(row[ecols[std::size_t(e)]], where);
            if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, where + ": embedding is not finite");
            post_embeddings(Eigen::Index(k), e) = v;
          }
        }
        if (dx > 0) cell.embeddings.row(d) = pool_embeddings(post_embeddings).transpose();
        cell.scores(d) = average_scores(scores);
        ++d;
      }
    }
  }
  ds.validate();
  return ds;
}

void save_dataset(const PanelDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    csv::Writer w(dir / "panel.csv");
    w.field("unit").field("period").field("y");
    for (int k = 1; k <= ds.z_dim(); ++k) w.field("z_" + std::to_string(k));
    w.end_row();
    for (int i = 0; i < ds.n_units(); ++i) {
      for (int t = 0; t < ds.n_periods(); ++t) {
        w.field(ds.unit_labels()[i]).field(ds.period_labels()[t]).field(ds.y(i, t));
        for (int k = 0; k < ds.z_dim(); ++k) w.field(ds.z()(ds.cell_index(i, t), k));
        w.end_row();
      }
    }
  }
  csv::Writer w(dir / "posts.csv");
  w.field("unit").field("period").field("day").field("score");
  for (int k = 1; k <= ds.x_dim(); ++k) w.field("e_" + std::to_string(k));
  w.end_row();
  for (int i = 0; i < ds.n_units(); ++i) {
    for (int t = 0; t < ds.n_periods(); ++t) {
      const auto& cell = ds.cell(i, t);
      for (Eigen::Index d = 0; d < cell.n_days(); ++d) {
        w.field(ds.unit_labels()[i]).field(ds.period_labels()[t]).field(static_cast<long long>(d + 1));
        w.field(cell.scores(d));
        for (Eigen::Index k = 0; k < ds.x_dim(); ++k) w.field(cell.embeddings(d, k));
        w.end_row();
      }
    }
  }
}

}  // namespace ldpm
