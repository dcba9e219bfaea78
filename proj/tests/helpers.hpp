#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ldpm/mlp.hpp"
#include "ldpm/panel.hpp"
#include "ldpm/random.hpp"

namespace testing {

// Panel with `days` random days per cell, y ~ N(0,1) and z = lagged y.
inline ldpm::PanelDataset random_panel(int n, int t, int days, int dx, std::uint64_t seed) {
  ldpm::Rng rng(seed);
  ldpm::PanelDataset ds(n, t, 1, dx);
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < t; ++p) {
      ds.y()(i, p) = rng.normal();
      auto& cell = ds.cell(i, p);
      cell.embeddings.resize(days, dx);
      cell.scores.resize(days);
      for (Eigen::Index k = 0; k < cell.embeddings.size(); ++k) cell.embeddings.data()[k] = rng.normal();
      for (int d = 0; d < days; ++d) cell.scores(d) = rng.normal();
    }
    for (int p = 0; p < t; ++p) ds.z()(ds.cell_index(i, p), 0) = p > 0 ? ds.y(i, p - 1) : 0.0;
  }
  return ds;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ldpm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  ldpm::Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return m;
}

// Shift inputs until no relu pre-activation is within `gap` of zero.
inline Eigen::MatrixXd away_from_kinks(const ldpm::FeedForwardNet& net, Eigen::MatrixXd x, double gap) {
  ldpm::Rng rng(99);
  for (int tries = 0; tries < 200; ++tries) {
    bool ok = true;
    for (Eigen::Index c = 0; c < x.cols() && ok; ++c) {
      Eigen::MatrixXd a = x.col(c);
      for (int l = 0; l < net.n_layers() && ok; ++l) {
        a = (net.weight(l) * a).colwise() + Eigen::VectorXd(net.bias(l));
        if (net.layer(l).activation == ldpm::Activation::Relu && a.cwiseAbs().minCoeff() < gap) ok = false;
        ldpm::apply_activation(net.layer(l).activation, a);
      }
      if (!ok)
        for (Eigen::Index r = 0; r < x.rows(); ++r) x(r, c) += 0.3 * rng.normal();
    }
    if (ok) return x;
  }
  return x;
}

}  // namespace testing
