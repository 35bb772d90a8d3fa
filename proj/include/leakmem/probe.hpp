#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "leakmem/errors.hpp"

namespace leakmem {

inline constexpr double kProbeRidge = 1e-6;

/// Affine least-squares map representation -> identity latent, fit by the
/// ridge-regularized normal equations (the intercept is not penalized).
class IdentityProbe {
 public:
  IdentityProbe() = default;
  IdentityProbe(Eigen::MatrixXd weights, Eigen::RowVectorXd intercept)
      : weights_(std::move(weights)), intercept_(std::move(intercept)) {}

  std::size_t input_dim() const { return static_cast<std::size_t>(weights_.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(weights_.cols()); }
  const Eigen::MatrixXd& weights() const { return weights_; }
  const Eigen::RowVectorXd& intercept() const { return intercept_; }

  std::vector<double> predict(const std::vector<double>& x) const {
    if (x.size() != input_dim()) {
      throw DimensionError("probe: representation [" + std::to_string(x.size()) + "] vs expected [" +
                           std::to_string(input_dim()) + "]");
    }
    Eigen::RowVectorXd r = Eigen::Map<const Eigen::RowVectorXd>(x.data(), Eigen::Index(x.size())) * weights_ + intercept_;
    return std::vector<double>(r.data(), r.data() + r.size());
  }

  Eigen::MatrixXd predict(const Eigen::MatrixXd& xs) const {
    return (xs * weights_).rowwise() + intercept_;
  }

 private:
  Eigen::MatrixXd weights_;
  Eigen::RowVectorXd intercept_;
};

/// Pooled coefficient of determination over all output columns.
inline double r_squared(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& targets) {
  const Eigen::RowVectorXd mu = targets.colwise().mean();
  const double ss_res = (targets - predicted).squaredNorm();
  const double ss_tot = (targets.rowwise() - mu).squaredNorm();
  if (ss_tot <= 0) throw NumericError("r_squared: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

inline Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DimensionError("probe: no samples");
  Eigen::MatrixXd m(Eigen::Index(rows.size()), Eigen::Index(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw DimensionError("probe: ragged sample rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
  }
  return m;
}

inline IdentityProbe fit_probe_matrix(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double ridge = kProbeRidge) {
  if (x.rows() != y.rows()) throw DimensionError("probe: sample counts differ");
  const Eigen::Index n = x.rows(), d = x.cols();
  Eigen::MatrixXd aug(n, d + 1);
  aug.leftCols(d) = x;
  aug.col(d).setOnes();
  Eigen::MatrixXd gram = aug.transpose() * aug;
  gram.diagonal().head(d).array() += ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw NumericError("probe: normal equations are singular beyond ridge rescue");
  }
  Eigen::MatrixXd coef = ldlt.solve(aug.transpose() * y);
  if (!coef.allFinite()) throw NumericError("probe: non-finite coefficients");
  return IdentityProbe(coef.topRows(d), coef.row(d));
}

struct ProbeFit {
  IdentityProbe probe;
  double train_r2 = 0;
  double holdout_r2 = 0;
};

/// Fits on the first (1 - holdout_fraction) of the samples and scores the
/// rest. Requires at least 10 samples per representation dimension.
inline ProbeFit fit_identity_probe(const std::vector<std::vector<double>>& representations,
                                   const std::vector<std::vector<double>>& targets, double holdout_fraction = 0.25) {
  if (representations.size() != targets.size()) throw DimensionError("probe: sample counts differ");
  if (representations.empty()) throw DimensionError("probe: no samples");
  const std::size_t n = representations.size(), d = representations[0].size();
  if (n < 10 * d) {
    throw ContractError("probe: need >= 10 samples per dimension (" + std::to_string(n) + " samples, dim " +
                        std::to_string(d) + ")");
  }
  const auto x = to_matrix(representations);
  const auto y = to_matrix(targets);
  const Eigen::Index n_hold = Eigen::Index(std::floor(double(n) * holdout_fraction));
  const Eigen::Index n_fit = Eigen::Index(n) - n_hold;
  ProbeFit fit;
  fit.probe = fit_probe_matrix(x.topRows(n_fit), y.topRows(n_fit));
  fit.train_r2 = r_squared(fit.probe.predict(Eigen::MatrixXd(x.topRows(n_fit))), y.topRows(n_fit));
  fit.holdout_r2 = n_hold > 1 ? r_squared(fit.probe.predict(Eigen::MatrixXd(x.bottomRows(n_hold))), y.bottomRows(n_hold))
                              : fit.train_r2;
  return fit;
}

}  // namespace leakmem
