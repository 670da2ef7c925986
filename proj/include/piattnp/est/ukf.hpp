#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "piattnp/data/dataset.hpp"
#include "piattnp/errors.hpp"
#include "piattnp/est/estimator.hpp"
#include "piattnp/sim/quadrotor.hpp"

namespace piattnp::est {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct CholeskyFailure : NumericalError {
  CholeskyFailure() : NumericalError("sigma-point square root failed after jitter retry") {}
};

struct UkfConfig {
  VectorXd q_diag;  // process noise diagonal, scaled by dt each predict
  VectorXd r_diag;  // measurement noise diagonal
  double alpha = 1e-3;
  double beta = 2.0;
  double kappa = 0.0;

  /// Hand-tuned quadrotor defaults: moderate process noise on velocities
  /// and rates, higher on their derivatives; measurement noise at the
  /// midpoint of the simulated sensor-noise bounds.
  static UkfConfig quadrotor_default() {
    UkfConfig c;
    c.q_diag = VectorXd::Zero(12);
    for (int i = 0; i < 3; ++i) {
      c.q_diag(i) = 1e-2;       // velocity
      c.q_diag(3 + i) = 1e-1;   // acceleration
      c.q_diag(6 + i) = 1e-2;   // body rates
      c.q_diag(9 + i) = 1e-1;   // rate derivatives
    }
    const double accel_sd = 0.5 * (0.015 + 0.9);
    const double rate_sd = 0.5 * (0.05 + 1.0);
    c.r_diag = VectorXd::Zero(6);
    for (int i = 0; i < 3; ++i) {
      c.r_diag(i) = accel_sd * accel_sd;
      c.r_diag(3 + i) = rate_sd * rate_sd;
    }
    return c;
  }
};

/// Unscented Kalman filter over an arbitrary state dimension with a
/// linear selection measurement (the observed components are a subset of
/// the state vector).
class Ukf {
 public:
  using Process = std::function<VectorXd(const VectorXd&, double dt)>;

  Ukf(VectorXd mean0, MatrixXd cov0, UkfConfig cfg, std::vector<int> obs_idx)
      : mean_(std::move(mean0)), cov_(std::move(cov0)), cfg_(std::move(cfg)),
        obs_idx_(std::move(obs_idx)) {
    const long n = mean_.size();
    if (cov_.rows() != n || cov_.cols() != n) throw ShapeMismatch("ukf: covariance shape mismatch");
    if (cfg_.q_diag.size() != n) throw ShapeMismatch("ukf: q_diag length mismatch");
    if (cfg_.r_diag.size() != static_cast<long>(obs_idx_.size()))
      throw ShapeMismatch("ukf: r_diag length mismatch");
    if (cfg_.q_diag.minCoeff() <= 0 || cfg_.r_diag.minCoeff() <= 0)
      throw ConfigError("ukf: Q and R diagonals must be positive");
  }

  const VectorXd& mean() const { return mean_; }
  const MatrixXd& cov() const { return cov_; }

  /// Unscented-transform weights for the current state dimension.
  void weights(VectorXd& wm, VectorXd& wc) const {
    const double n = static_cast<double>(mean_.size());
    const double lambda = cfg_.alpha * cfg_.alpha * (n + cfg_.kappa) - n;
    const int count = 2 * static_cast<int>(n) + 1;
    wm = VectorXd::Constant(count, 1.0 / (2.0 * (n + lambda)));
    wc = wm;
    wm(0) = lambda / (n + lambda);
    wc(0) = wm(0) + (1.0 - cfg_.alpha * cfg_.alpha + cfg_.beta);
  }

  void predict(const Process& f, double dt) {
    const long n = mean_.size();
    const double nd = static_cast<double>(n);
    const double lambda = cfg_.alpha * cfg_.alpha * (nd + cfg_.kappa) - nd;

    const MatrixXd sqrt_term = sqrt_scaled_cov(nd + lambda);
    std::vector<VectorXd> pts;
    pts.reserve(static_cast<size_t>(2 * n + 1));
    pts.push_back(mean_);
    for (long i = 0; i < n; ++i) pts.push_back(mean_ + sqrt_term.col(i));
    for (long i = 0; i < n; ++i) pts.push_back(mean_ - sqrt_term.col(i));

    VectorXd wm, wc;
    weights(wm, wc);

    std::vector<VectorXd> prop;
    prop.reserve(pts.size());
    for (const VectorXd& p : pts) prop.push_back(f(p, dt));

    VectorXd mean_new = VectorXd::Zero(n);
    for (size_t i = 0; i < prop.size(); ++i) mean_new += wm(static_cast<long>(i)) * prop[i];

    MatrixXd cov_new = MatrixXd::Zero(n, n);
    for (size_t i = 0; i < prop.size(); ++i) {
      const VectorXd d = prop[i] - mean_new;
      cov_new += wc(static_cast<long>(i)) * d * d.transpose();
    }
    cov_new += (dt * cfg_.q_diag).asDiagonal().toDenseMatrix();

    mean_ = mean_new;
    cov_ = 0.5 * (cov_new + cov_new.transpose());
  }

  /// Measurement update: the linear selection model allows an exact
  /// Kalman update against the predicted covariance.
  void update(const VectorXd& y_obs) {
    const long m = static_cast<long>(obs_idx_.size());
    if (y_obs.size() != m) throw ShapeMismatch("ukf: observation length mismatch");
    const long n = mean_.size();

    MatrixXd h = MatrixXd::Zero(m, n);
    for (long i = 0; i < m; ++i) h(i, obs_idx_[static_cast<size_t>(i)]) = 1.0;

    const MatrixXd pht = cov_ * h.transpose();
    MatrixXd s = h * pht;
    s += MatrixXd(cfg_.r_diag.asDiagonal());
    const MatrixXd k = pht * s.inverse();
    mean_ += k * (y_obs - h * mean_);
    MatrixXd cov_new = cov_ - k * s * k.transpose();
    cov_ = 0.5 * (cov_new + cov_new.transpose());
  }

 private:
  MatrixXd sqrt_scaled_cov(double scale) {
    MatrixXd scaled = scale * cov_;
    Eigen::LLT<MatrixXd> llt(scaled);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    // Re-symmetrize with a small jitter and retry once.
    MatrixXd repaired = 0.5 * (scaled + scaled.transpose());
    repaired.diagonal().array() += 1e-9;
    Eigen::LLT<MatrixXd> retry(repaired);
    if (retry.info() == Eigen::Success) return retry.matrixL();
    throw CholeskyFailure();
  }

  VectorXd mean_;
  MatrixXd cov_;
  UkfConfig cfg_;
  std::vector<int> obs_idx_;
};

/// UKF rollout over one stored trajectory, emitting the same row schema as
/// the learned estimator. The process model is the disturbance-blind
/// physics prior driven by the commanded rotor speeds and the noisy Euler
/// channel, both refreshed per step.
inline std::vector<RolloutRow> run_ukf_trajectory(const sim::QuadrotorParams& qp,
                                                  const UkfConfig& cfg,
                                                  const data::MetaDataset& meta, int traj) {
  const int steps = meta.steps_per_task;
  const data::TaskSet& first = meta.trajectory_record(traj, 0);

  std::vector<int> obs_idx;
  for (int j = 0; j < sim::kObsDim; ++j) obs_idx.push_back(sim::kObsStart + j);
  Ukf ukf(first.y_C_noisy, MatrixXd::Identity(12, 12), cfg, obs_idx);

  std::vector<RolloutRow> rows;
  rows.reserve(static_cast<size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const data::TaskSet& rec = meta.trajectory_record(traj, k);
    sim::ControlInput u;
    u.rotor_speeds = rec.rotor_cmd;
    const sim::Vector3 euler = rec.euler_noisy;
    auto process = [&](const VectorXd& x, double dt) {
      return VectorXd(sim::physics_prior_g(x, euler, u, dt, qp).y_next);
    };
    ukf.predict(process, rec.dt);

    RolloutRow row;
    row.step = k;
    row.t = rec.t_next;
    row.y_true = rec.y_T;
    if (k + 1 < steps) {
      const data::TaskSet& nxt = meta.trajectory_record(traj, k + 1);
      row.y_obs = nxt.y_C_noisy.segment<6>(sim::kObsStart);
      row.has_obs = true;
      ukf.update(row.y_obs);
    }
    row.y_plus = ukf.mean();
    row.sigma_plus = ukf.cov().diagonal().cwiseMax(0.0).cwiseSqrt();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace piattnp::est
