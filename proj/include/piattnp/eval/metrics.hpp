#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "piattnp/errors.hpp"

namespace piattnp::eval {

using Matrix = Eigen::MatrixXd;

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": matrix shapes differ");
}

/// sqrt((1/N) sum_i sum_j residual^2). The inner sum over state dims is
/// deliberately not averaged.
inline double rmse(const Matrix& y, const Matrix& y_hat) {
  check_same_shape(y, y_hat, "rmse");
  if (y.rows() == 0) throw ShapeMismatch("rmse: empty input");
  const double total = (y - y_hat).array().square().sum();
  return std::sqrt(total / static_cast<double>(y.rows()));
}

/// (1/2N) sum_i sum_j [ ln(2 pi sigma2) + residual^2 / sigma2 ].
inline double nll(const Matrix& y, const Matrix& mu, const Matrix& sigma2) {
  check_same_shape(y, mu, "nll");
  check_same_shape(y, sigma2, "nll");
  if (y.rows() == 0) throw ShapeMismatch("nll: empty input");
  if ((sigma2.array() <= 0.0).any()) throw NumericalError("nll: sigma2 must be positive");
  const auto r2 = (y - mu).array().square();
  const double total = ((2.0 * M_PI * sigma2.array()).log() + r2 / sigma2.array()).sum();
  return total / (2.0 * static_cast<double>(y.rows()));
}

/// RMSE per 3-dim state block: velocity, acceleration, rates, rate
/// derivatives. Inner sums span each block's 3 components.
inline std::array<double, 4> group_rmse(const Matrix& y, const Matrix& y_hat) {
  check_same_shape(y, y_hat, "group_rmse");
  if (y.cols() != 12) throw ShapeMismatch("group_rmse: expected 12 state columns");
  if (y.rows() == 0) throw ShapeMismatch("group_rmse: empty input");
  std::array<double, 4> out{};
  for (int g = 0; g < 4; ++g) {
    const double total = (y.middleCols(3 * g, 3) - y_hat.middleCols(3 * g, 3)).array().square().sum();
    out[static_cast<size_t>(g)] = std::sqrt(total / static_cast<double>(y.rows()));
  }
  return out;
}

struct BatchedMetric {
  double mean = 0.0;
  double stddev = 0.0;  // sample std across minibatches; 0 when fewer than 2
  int n_batches = 0;
};

inline BatchedMetric summarize(const std::vector<double>& per_batch) {
  BatchedMetric m;
  m.n_batches = static_cast<int>(per_batch.size());
  if (per_batch.empty()) return m;
  double sum = 0.0;
  for (double v : per_batch) sum += v;
  m.mean = sum / m.n_batches;
  if (m.n_batches >= 2) {
    double sq = 0.0;
    for (double v : per_batch) sq += (v - m.mean) * (v - m.mean);
    m.stddev = std::sqrt(sq / (m.n_batches - 1));
  }
  return m;
}

/// Metric with an error bar formed by rechunking the rows into consecutive
/// minibatches of `batch_size` (last partial chunk dropped when another
/// full chunk exists).
inline BatchedMetric rmse_batched(const Matrix& y, const Matrix& y_hat, int batch_size) {
  check_same_shape(y, y_hat, "rmse_batched");
  std::vector<double> vals;
  const long n = y.rows();
  for (long at = 0; at + batch_size <= n || (at == 0 && at < n); at += batch_size) {
    const long b = std::min<long>(batch_size, n - at);
    vals.push_back(rmse(y.middleRows(at, b), y_hat.middleRows(at, b)));
  }
  return summarize(vals);
}

inline BatchedMetric nll_batched(const Matrix& y, const Matrix& mu, const Matrix& sigma2,
                                 int batch_size) {
  check_same_shape(y, mu, "nll_batched");
  std::vector<double> vals;
  const long n = y.rows();
  for (long at = 0; at + batch_size <= n || (at == 0 && at < n); at += batch_size) {
    const long b = std::min<long>(batch_size, n - at);
    vals.push_back(nll(y.middleRows(at, b), mu.middleRows(at, b), sigma2.middleRows(at, b)));
  }
  return summarize(vals);
}

}  // namespace piattnp::eval
