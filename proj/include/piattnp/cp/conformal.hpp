#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "piattnp/errors.hpp"
#include "piattnp/model/train.hpp"

namespace piattnp::cp {

using Matrix = Eigen::MatrixXd;
using Vector12 = Eigen::Matrix<double, 12, 1>;

struct EmptyCalibration : ConfigError {
  EmptyCalibration() : ConfigError("calibration set is empty") {}
};

enum class Mode { Marginal, Joint, Off };

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Marginal: return "marginal";
    case Mode::Joint: return "joint";
    default: return "off";
  }
}

inline Mode mode_from_name(const std::string& s) {
  if (s == "marginal") return Mode::Marginal;
  if (s == "joint") return Mode::Joint;
  if (s == "off") return Mode::Off;
  throw ConfigError("unknown conformal mode '" + s + "'");
}

/// Calibrated quantiles. Marginal mode fills q per dimension; joint mode
/// uses the scalar; off means uncalibrated (q = 1 everywhere).
struct QuantileVector {
  Mode mode = Mode::Off;
  Vector12 q = Vector12::Ones();
  double q_joint = 1.0;
  double alpha = 0.05;
  int cal_size = 0;

  double for_dim(int j) const {
    switch (mode) {
      case Mode::Marginal: return q(j);
      case Mode::Joint: return q_joint;
      default: return 1.0;
    }
  }
};

/// Normalized squared residuals s = (y - mu)^2 / sd, with sd the
/// standard deviation sqrt(sigma2).
inline Matrix marginal_scores(const Matrix& y, const Matrix& mu, const Matrix& sigma2) {
  if (y.rows() != mu.rows() || y.cols() != mu.cols() || y.rows() != sigma2.rows() ||
      y.cols() != sigma2.cols())
    throw ShapeMismatch("marginal_scores: shapes differ");
  return (y - mu).array().square() / sigma2.array().sqrt();
}

/// Diagonal-scaled quadratic form; equals the sum of marginal scores.
inline Eigen::VectorXd joint_scores(const Matrix& y, const Matrix& mu, const Matrix& sigma2) {
  return marginal_scores(y, mu, sigma2).rowwise().sum();
}

/// The ceil((N+1)(1-alpha))-th smallest score (1-based); +inf when the
/// index exceeds N. Sorting is ascending and stable, so tied scores keep
/// a deterministic order.
inline double conformal_quantile(std::vector<double> scores, double alpha) {
  const int n = static_cast<int>(scores.size());
  if (n == 0) throw EmptyCalibration();
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  const double raw = (n + 1) * (1.0 - alpha);
  const int index = static_cast<int>(std::ceil(raw));
  if (index > n) return std::numeric_limits<double>::infinity();
  std::stable_sort(scores.begin(), scores.end());
  return scores[static_cast<size_t>(index - 1)];
}

/// Quantiles from a precomputed calibration score table (N x 12).
inline QuantileVector calibrate_from_scores(const Matrix& scores, double alpha, Mode mode) {
  if (scores.rows() == 0) throw EmptyCalibration();
  QuantileVector out;
  out.mode = mode;
  out.alpha = alpha;
  out.cal_size = static_cast<int>(scores.rows());
  if (mode == Mode::Off) return out;
  if (mode == Mode::Marginal) {
    for (int j = 0; j < 12; ++j) {
      std::vector<double> col(scores.col(j).data(), scores.col(j).data() + scores.rows());
      out.q(j) = conformal_quantile(std::move(col), alpha);
    }
  } else {
    const Eigen::VectorXd sums = scores.rowwise().sum();
    std::vector<double> all(sums.data(), sums.data() + sums.size());
    out.q_joint = conformal_quantile(std::move(all), alpha);
  }
  return out;
}

/// End-to-end calibration: deployment-mode forward passes over the
/// calibration records, then quantile extraction.
inline QuantileVector calibrate(model::PiAttNP& m, const data::MetaDataset& meta,
                                const std::vector<int>& cal_indices, const Matrix& priors,
                                double alpha, Mode mode, int chunk, std::mt19937_64& rng) {
  if (cal_indices.empty()) throw EmptyCalibration();
  model::Prediction pred = model::predict_records(m, meta, cal_indices, priors, chunk, rng);
  Matrix y(cal_indices.size(), 12);
  for (size_t i = 0; i < cal_indices.size(); ++i)
    y.row(static_cast<long>(i)) =
        meta.records[static_cast<size_t>(cal_indices[i])].y_T.transpose();
  return calibrate_from_scores(marginal_scores(y, pred.mu, pred.sigma2), alpha, mode);
}

struct ConformalInterval {
  Vector12 lower = Vector12::Zero();
  Vector12 upper = Vector12::Zero();
  bool unbounded = false;
};

/// Guarantee-carrying interval: mu +- sqrt(q * sd) per dimension. An
/// infinite quantile marks the whole dimension unbounded.
inline ConformalInterval interval_theorem(const Vector12& mu, const Vector12& sigma2,
                                          const QuantileVector& q) {
  ConformalInterval out;
  for (int j = 0; j < 12; ++j) {
    const double qj = q.for_dim(j);
    if (!std::isfinite(qj)) {
      out.lower(j) = -std::numeric_limits<double>::infinity();
      out.upper(j) = std::numeric_limits<double>::infinity();
      out.unbounded = true;
      continue;
    }
    const double half = std::sqrt(qj * std::sqrt(sigma2(j)));
    out.lower(j) = mu(j) - half;
    out.upper(j) = mu(j) + half;
  }
  return out;
}

/// Linear scaling sigma+ = q * sd used by the recursive estimator's fusion
/// weight. Distinct from the theorem interval by design.
inline Vector12 scaled_sigma(const Vector12& sigma2, const QuantileVector& q) {
  Vector12 out;
  for (int j = 0; j < 12; ++j) out(j) = q.for_dim(j) * std::sqrt(sigma2(j));
  return out;
}

struct CoverageStats {
  Vector12 per_dim = Vector12::Zero();
  double mean = 0.0;
};

/// Fraction of records whose truth falls inside the theorem intervals.
/// Marginal/off modes average the per-dimension coverages; joint mode's
/// mean is the fraction of records whose joint score stays within q.
inline CoverageStats audit_coverage(const Matrix& y, const Matrix& mu, const Matrix& sigma2,
                                    const QuantileVector& q) {
  const long n = y.rows();
  if (n == 0) throw ShapeMismatch("audit_coverage: empty evaluation set");
  const Matrix scores = marginal_scores(y, mu, sigma2);
  CoverageStats out;
  for (int j = 0; j < 12; ++j) {
    const double qj = q.for_dim(j);
    long hits = 0;
    for (long i = 0; i < n; ++i)
      if (scores(i, j) <= qj) ++hits;
    out.per_dim(j) = static_cast<double>(hits) / static_cast<double>(n);
  }
  if (q.mode == Mode::Joint) {
    const Eigen::VectorXd js = scores.rowwise().sum();
    long hits = 0;
    for (long i = 0; i < n; ++i)
      if (js(i) <= q.q_joint) ++hits;
    out.mean = static_cast<double>(hits) / static_cast<double>(n);
  } else {
    out.mean = out.per_dim.mean();
  }
  return out;
}

/// Finite-sample guarantee band for the attained coverage:
/// [1 - alpha, 1 - alpha + 1/(N+1)] for N calibration points.
inline std::pair<double, double> coverage_band(double alpha, int cal_size) {
  return {1.0 - alpha, 1.0 - alpha + 1.0 / (cal_size + 1)};
}

}  // namespace piattnp::cp
