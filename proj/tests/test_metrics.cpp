#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "piattnp/eval/metrics.hpp"

using namespace piattnp;
using namespace piattnp::eval;
using Catch::Approx;

namespace {

Matrix random_matrix(std::mt19937_64& rng, long r, long c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

double rmse_loops(const Matrix& y, const Matrix& y_hat) {
  double total = 0.0;
  for (long i = 0; i < y.rows(); ++i)
    for (long j = 0; j < y.cols(); ++j) {
      const double r = y(i, j) - y_hat(i, j);
      total += r * r;
    }
  return std::sqrt(total / static_cast<double>(y.rows()));
}

double nll_loops(const Matrix& y, const Matrix& mu, const Matrix& sigma2) {
  double total = 0.0;
  for (long i = 0; i < y.rows(); ++i)
    for (long j = 0; j < y.cols(); ++j) {
      const double r = y(i, j) - mu(i, j);
      total += std::log(2.0 * M_PI * sigma2(i, j)) + r * r / sigma2(i, j);
    }
  return total / (2.0 * static_cast<double>(y.rows()));
}

}  // namespace

TEST_CASE("rmse oracles", "[metrics]") {
  SECTION("unit residual across 12 dims") {
    const Matrix y = Matrix::Ones(1, 12);
    const Matrix y_hat = Matrix::Zero(1, 12);
    CHECK(rmse(y, y_hat) == std::sqrt(12.0));
    CHECK(rmse(y, y_hat) == Approx(3.4641016151377544).margin(1e-15));
  }
  SECTION("row average, not element average") {
    Matrix y(2, 2), y_hat = Matrix::Zero(2, 2);
    y << 3.0, 4.0, 0.0, 0.0;
    CHECK(rmse(y, y_hat) == Approx(std::sqrt(12.5)).margin(1e-15));
  }
  SECTION("row permutation invariance") {
    std::mt19937_64 rng(51);
    const Matrix y = random_matrix(rng, 40, 12, -3.0, 3.0);
    const Matrix y_hat = random_matrix(rng, 40, 12, -3.0, 3.0);
    Matrix yp(40, 12), y_hatp(40, 12);
    std::vector<int> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int i = 0; i < 40; ++i) {
      yp.row(i) = y.row(order[static_cast<size_t>(i)]);
      y_hatp.row(i) = y_hat.row(order[static_cast<size_t>(i)]);
    }
    CHECK(rmse(yp, y_hatp) == Approx(rmse(y, y_hat)).margin(1e-12));
  }
}

TEST_CASE("nll oracles", "[metrics]") {
  SECTION("perfect unit-variance prediction") {
    const Matrix y = Matrix::Zero(1, 12);
    const Matrix sigma2 = Matrix::Ones(1, 12);
    CHECK(nll(y, y, sigma2) == Approx(6.0 * std::log(2.0 * M_PI)).margin(1e-12));
    CHECK(nll(y, y, sigma2) == Approx(11.027262398456072).margin(1e-12));
  }
  SECTION("one unit residual adds one half") {
    const Matrix y = Matrix::Zero(1, 12);
    Matrix mu = Matrix::Zero(1, 12);
    mu(0, 4) = 1.0;
    const Matrix sigma2 = Matrix::Ones(1, 12);
    CHECK(nll(y, mu, sigma2) == Approx(6.0 * std::log(2.0 * M_PI) + 0.5).margin(1e-12));
  }
  SECTION("inflated variance term") {
    Matrix y(1, 1), mu(1, 1), s2(1, 1);
    y << 2.0;
    mu << 0.0;
    s2 << 4.0;
    CHECK(nll(y, mu, s2) == Approx(0.5 * (std::log(8.0 * M_PI) + 1.0)).margin(1e-12));
  }
  SECTION("both over- and under-confidence are penalized") {
    const Matrix y = Matrix::Zero(4, 12);
    const Matrix mu = Matrix::Ones(4, 12);  // residual 1 everywhere
    const double calibrated = nll(y, mu, Matrix::Ones(4, 12));
    CHECK(nll(y, mu, Matrix::Constant(4, 12, 0.1)) > calibrated);
    CHECK(nll(y, mu, Matrix::Constant(4, 12, 10.0)) > calibrated);
  }
  SECTION("rejects non-positive variance and empty input") {
    const Matrix y = Matrix::Zero(2, 3);
    Matrix s2 = Matrix::Ones(2, 3);
    s2(1, 1) = 0.0;
    CHECK_THROWS_AS(nll(y, y, s2), NumericalError);
    s2(1, 1) = -1.0;
    CHECK_THROWS_AS(nll(y, y, s2), NumericalError);
    CHECK_THROWS_AS(nll(Matrix(0, 3), Matrix(0, 3), Matrix(0, 3)), ShapeMismatch);
    CHECK_THROWS_AS(nll(y, Matrix::Zero(3, 2), s2), ShapeMismatch);
    CHECK_THROWS_AS(rmse(Matrix(0, 3), Matrix(0, 3)), ShapeMismatch);
    CHECK_THROWS_AS(rmse(y, Matrix::Zero(3, 2)), ShapeMismatch);
  }
}

TEST_CASE("metrics agree with independent double-loop implementations", "[metrics]") {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    const long rows = 1 + static_cast<long>(rng() % 50);
    const Matrix y = random_matrix(rng, rows, 12, -5.0, 5.0);
    const Matrix mu = random_matrix(rng, rows, 12, -5.0, 5.0);
    const Matrix sigma2 = random_matrix(rng, rows, 12, 0.05, 9.0);
    CHECK(rmse(y, mu) == Approx(rmse_loops(y, mu)).margin(1e-12));
    CHECK(nll(y, mu, sigma2) == Approx(nll_loops(y, mu, sigma2)).margin(1e-12));
  }
}

TEST_CASE("group rmse maps onto the four state blocks", "[metrics]") {
  SECTION("signal isolated in one block") {
    Matrix y = Matrix::Zero(5, 12);
    const Matrix y_hat = Matrix::Zero(5, 12);
    y.middleCols(6, 3).setConstant(2.0);  // body-rate block
    const auto g = group_rmse(y, y_hat);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == Approx(std::sqrt(12.0)).margin(1e-15));  // 2^2 * 3 dims
    CHECK(g[3] == 0.0);
  }
  SECTION("blocks add up to the full metric") {
    std::mt19937_64 rng(53);
    const Matrix y = random_matrix(rng, 30, 12, -4.0, 4.0);
    const Matrix y_hat = random_matrix(rng, 30, 12, -4.0, 4.0);
    const auto g = group_rmse(y, y_hat);
    const double total = g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + g[3] * g[3];
    const double full = rmse(y, y_hat);
    CHECK(total == Approx(full * full).margin(1e-12));
  }
  SECTION("wrong width is rejected") {
    CHECK_THROWS_AS(group_rmse(Matrix::Zero(2, 11), Matrix::Zero(2, 11)), ShapeMismatch);
  }
}

TEST_CASE("summarize computes the sample standard deviation", "[metrics]") {
  const BatchedMetric two = summarize({1.0, 3.0});
  CHECK(two.n_batches == 2);
  CHECK(two.mean == 2.0);
  CHECK(two.stddev == Approx(std::sqrt(2.0)).margin(1e-15));

  const BatchedMetric one = summarize({4.5});
  CHECK(one.n_batches == 1);
  CHECK(one.mean == 4.5);
  CHECK(one.stddev == 0.0);

  const BatchedMetric none = summarize({});
  CHECK(none.n_batches == 0);
  CHECK(none.mean == 0.0);
}

TEST_CASE("batched metrics drop a trailing partial chunk", "[metrics]") {
  Matrix y = Matrix::Zero(10, 2);
  Matrix y_hat = Matrix::Zero(10, 2);
  y.topRows(4).setConstant(1.0);
  y.middleRows(4, 4).setConstant(3.0);
  y.bottomRows(2).setConstant(100.0);  // would dominate if the partial chunk leaked in

  const BatchedMetric m = rmse_batched(y, y_hat, 4);
  REQUIRE(m.n_batches == 2);
  CHECK(m.mean == Approx(0.5 * (std::sqrt(2.0) + std::sqrt(18.0))).margin(1e-12));

  SECTION("a single short chunk is kept when it is all there is") {
    const BatchedMetric solo = rmse_batched(y.topRows(3), y_hat.topRows(3), 16);
    CHECK(solo.n_batches == 1);
    CHECK(solo.mean == Approx(rmse(y.topRows(3), y_hat.topRows(3))).margin(1e-15));
  }
  SECTION("nll variant uses the same chunking") {
    const Matrix sigma2 = Matrix::Ones(10, 2);
    const BatchedMetric n = nll_batched(y, y_hat, sigma2, 4);
    REQUIRE(n.n_batches == 2);
    const double c1 = nll(y.topRows(4), y_hat.topRows(4), sigma2.topRows(4));
    const double c2 = nll(y.middleRows(4, 4), y_hat.middleRows(4, 4), sigma2.middleRows(4, 4));
    CHECK(n.mean == Approx(0.5 * (c1 + c2)).margin(1e-12));
  }
}
