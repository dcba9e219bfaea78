#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "ldpm/error.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct OlsOptions {
  /// Largest tolerated condition number of X'X.
  double max_condition = 1e12;
  /// When set, an ill-conditioned system is solved as (X'X + ridge I) b = X'y
  /// instead of raising RankDeficient.
  bool ridge_fallback = false;
  double ridge = 1e-8;
  /// Takes precedence over the ridge: ill-conditioned or underdetermined
  /// systems get the minimum-norm least-squares solution, which interpolates
  /// whenever an exact fit exists.
  bool min_norm_fallback = false;
};

template <typename Scalar>
struct OlsResult {
  VectorX<Scalar> coefficients;
  /// Set when the system was ill-conditioned and a fallback solved it.
  bool used_fallback = false;
};

/// Least-squares coefficients of y on the columns of X.
///
/// The condition number of X'X is the squared ratio of the extreme singular
/// values of X. Well-conditioned systems are solved by column-pivoted QR.
template <typename DerivedX, typename DerivedY>
OlsResult<typename DerivedX::Scalar> ols_fit_ex(const Eigen::MatrixBase<DerivedX>& X,
                                                const Eigen::MatrixBase<DerivedY>& y,
                                                const OlsOptions& options = {}) {
  using Scalar = typename DerivedX::Scalar;
  if (X.rows() != y.rows()) {
    throw Error(ErrorKind::DimMismatch, "ols_fit: X has " + std::to_string(X.rows()) +
                                            " rows but y has " + std::to_string(y.rows()));
  }
  OlsResult<Scalar> out;
  const auto p = X.cols();
  if (p == 0) {
    out.coefficients.resize(0);
    return out;
  }
  bool ill_conditioned = X.rows() < p;
  if (!ill_conditioned) {
    Eigen::JacobiSVD<MatrixX<Scalar>> svd(X);
    const auto& s = svd.singularValues();
    const Scalar smax = s(0);
    const Scalar smin = s(p - 1);
    ill_conditioned = !(smin > Scalar(0)) || (smax / smin) * (smax / smin) > Scalar(options.max_condition);
  }
  if (ill_conditioned) {
    if (options.min_norm_fallback) {
      out.coefficients = X.completeOrthogonalDecomposition().solve(y);
      out.used_fallback = true;
      return out;
    }
    if (!options.ridge_fallback) {
      throw Error(ErrorKind::RankDeficient, "ols_fit: X'X condition number exceeds threshold");
    }
    MatrixX<Scalar> gram = X.transpose() * X;
    gram.diagonal().array() += Scalar(options.ridge);
    out.coefficients = gram.ldlt().solve(X.transpose() * y);
    out.used_fallback = true;
    return out;
  }
  out.coefficients = X.colPivHouseholderQr().solve(y);
  return out;
}

template <typename DerivedX, typename DerivedY>
VectorX<typename DerivedX::Scalar> ols_fit(const Eigen::MatrixBase<DerivedX>& X,
                                           const Eigen::MatrixBase<DerivedY>& y,
                                           const OlsOptions& options = {}) {
  return ols_fit_ex(X, y, options).coefficients;
}

template <typename Scalar>
struct SvdResult {
  MatrixX<Scalar> u;  // n x r
  VectorX<Scalar> s;  // r, descending
  MatrixX<Scalar> v;  // p x r

  MatrixX<Scalar> reconstruct() const { return u * s.asDiagonal() * v.transpose(); }
};

/// Rank-r truncation of the thin SVD of X. Singular vector signs are fixed so
/// that the largest-magnitude entry of every right singular vector is positive.
template <typename Derived>
SvdResult<typename Derived::Scalar> truncated_svd(const Eigen::MatrixBase<Derived>& X, Eigen::Index rank) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index full = std::min(X.rows(), X.cols());
  if (rank < 1 || rank > full) {
    throw Error(ErrorKind::BadRank, "truncated_svd: rank " + std::to_string(rank) + " outside [1, " +
                                        std::to_string(full) + "]");
  }
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult<Scalar> out;
  out.u = svd.matrixU().leftCols(rank);
  out.s = svd.singularValues().head(rank);
  out.v = svd.matrixV().leftCols(rank);
  for (Eigen::Index r = 0; r < rank; ++r) {
    Eigen::Index pivot = 0;
    out.v.col(r).cwiseAbs().maxCoeff(&pivot);
    if (out.v(pivot, r) < Scalar(0)) {
      out.v.col(r) = -out.v.col(r);
      out.u.col(r) = -out.u.col(r);
    }
  }
  return out;
}

/// Projection X V onto the leading r right singular vectors of a reference
/// matrix. Fitted once (e.g. on training rows) and reused for new rows.
template <typename Scalar>
class EmbeddingReducer {
 public:
  EmbeddingReducer() = default;

  template <typename Derived>
  static EmbeddingReducer fit(const Eigen::MatrixBase<Derived>& X, Eigen::Index rank) {
    EmbeddingReducer reducer;
    reducer.basis_ = truncated_svd(X, rank).v;
    return reducer;
  }

  template <typename Derived>
  MatrixX<Scalar> transform(const Eigen::MatrixBase<Derived>& X) const {
    if (X.cols() != basis_.rows()) {
      throw Error(ErrorKind::DimMismatch, "EmbeddingReducer: input has " + std::to_string(X.cols()) +
                                              " columns, basis expects " + std::to_string(basis_.rows()));
    }
    return X * basis_;
  }

  const MatrixX<Scalar>& basis() const { return basis_; }
  Eigen::Index rank() const { return basis_.cols(); }

 private:
  MatrixX<Scalar> basis_;
};

/// X V for the rank-r truncated SVD of X itself.
template <typename Derived>
MatrixX<typename Derived::Scalar> reduce_embeddings(const Eigen::MatrixBase<Derived>& X, Eigen::Index rank) {
  return EmbeddingReducer<typename Derived::Scalar>::fit(X, rank).transform(X);
}

/// Unit-variance Gaussian vector with common pairwise correlation rho.
struct EquiCorrSpec {
  Eigen::Index dim = 2;
  double rho = 0.0;

  void validate() const {
    if (dim < 1) throw Error(ErrorKind::DimMismatch, "EquiCorrSpec: dim must be positive");
    const double lower = dim > 1 ? -1.0 / static_cast<double>(dim - 1) : -1.0;
    if (!(rho <= 1.0) || !(rho > lower)) {
      throw Error(ErrorKind::NotPSD, "equicorrelation rho=" + std::to_string(rho) + " outside (" +
                                         std::to_string(lower) + ", 1] for dim " + std::to_string(dim));
    }
  }

  Eigen::MatrixXd covariance() const {
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(dim, dim, rho);
    sigma.diagonal().setOnes();
    return sigma;
  }
};

/// Lower factor F with F F' = Sigma, from a pivoted LDL' so that the
/// singular rho = 1 case is handled.
inline Eigen::MatrixXd equicorr_factor(const EquiCorrSpec& spec) {
  spec.validate();
  const Eigen::MatrixXd sigma = spec.covariance();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sigma);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorKind::NotPSD, "LDLT factorization failed");
  Eigen::VectorXd d = ldlt.vectorD();
  if (d.minCoeff() < -1e-12) throw Error(ErrorKind::NotPSD, "negative pivot in LDLT");
  d = d.cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd L = ldlt.matrixL();
  Eigen::MatrixXd factor = ldlt.transpositionsP().transpose() * (L * d.asDiagonal());
  return factor;
}

/// n_draws rows of N(0, Sigma) with the equicorrelated Sigma.
inline Eigen::MatrixXd sample_equicorr(const EquiCorrSpec& spec, Eigen::Index n_draws, Rng& rng) {
  const Eigen::MatrixXd factor = equicorr_factor(spec);
  Eigen::MatrixXd standard(spec.dim, n_draws);
  for (Eigen::Index j = 0; j < n_draws; ++j)
    for (Eigen::Index i = 0; i < spec.dim; ++i) standard(i, j) = rng.normal();
  return (factor * standard).transpose();
}

inline Eigen::MatrixXd sample_equicorr(const EquiCorrSpec& spec, Eigen::Index n_draws, std::uint64_t seed) {
  Rng rng(seed);
  return sample_equicorr(spec, n_draws, rng);
}

}  // namespace ldpm
