#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "piattnp/cp/conformal.hpp"
#include "piattnp/model/train.hpp"

namespace piattnp::est {

using sim::Vector12;
using sim::Vector3;
using sim::Vector4;
using Vector6 = Eigen::Matrix<double, 6, 1>;
using data::Vector5;

struct ModelNotCalibrated : ConfigError {
  ModelNotCalibrated() : ConfigError("rollout requires a calibrated quantile") {}
};

/// Uncertainty std assigned when the model emits a non-finite prediction
/// and the physics prior substitutes: large but finite, so the fusion
/// weight collapses toward the raw observation.
constexpr double kFallbackSigma = 1e12;

/// beta = 1 / (1 + sigma+), elementwise over the 6 observed dims.
inline Vector6 fusion_beta(const Vector6& sigma_plus_obs) {
  Vector6 beta;
  for (int j = 0; j < 6; ++j) beta(j) = 1.0 / (1.0 + sigma_plus_obs(j));
  return beta;
}

/// Next fused context: convex blend over observed dims, prediction
/// pass-through on unobserved dims.
inline Vector12 fuse_context(const Vector12& y_plus, const Vector12& sigma_plus,
                             const Vector6& y_obs) {
  const Vector6 beta = fusion_beta(sigma_plus.segment<6>(sim::kObsStart));
  Vector12 fused = y_plus;
  for (int j = 0; j < 6; ++j) {
    const int d = sim::kObsStart + j;
    fused(d) = beta(j) * y_plus(d) + (1.0 - beta(j)) * y_obs(j);
  }
  return fused;
}

struct EstimatorState {
  double t = 0.0;            // timestamp of the current context
  Vector4 u = Vector4::Zero();
  Vector12 y_C = Vector12::Zero();  // fused noisy context
  Vector3 euler = Vector3::Zero();  // noisy Euler channel at t
  double dt = 0.0;                  // horizon of the pending prediction
  int step_index = 0;

  Vector5 x_C() const {
    Vector5 x;
    x(0) = t;
    x.segment<4>(1) = u;
    return x;
  }
  Vector5 x_T() const {
    Vector5 x = Vector5::Zero();
    x(0) = t + dt;
    return x;
  }
};

struct StepResult {
  Vector12 y_plus = Vector12::Zero();      // posterior estimate at t + dt
  Vector12 sigma_plus = Vector12::Zero();  // quantile-scaled uncertainty std
  Vector12 y_prior = Vector12::Zero();
  bool prior_fallback = false;  // model output was non-finite; prior substituted
};

struct RolloutRow {
  int step = 0;
  double t = 0.0;
  Vector12 y_true = Vector12::Zero();
  Vector12 y_plus = Vector12::Zero();
  Vector12 sigma_plus = Vector12::Zero();
  Vector6 y_obs = Vector6::Constant(std::numeric_limits<double>::quiet_NaN());
  bool has_obs = false;
  bool prior_fallback = false;
};

/// Recursive inference: each step computes the physics prior from the
/// fused context, queries the model, scales its uncertainty with the
/// conformal quantile, then blends the prediction with the next noisy
/// observation to form the following context.
class RecursiveEstimator {
 public:
  RecursiveEstimator(model::PiAttNP& m, const cp::QuantileVector& q,
                     const sim::QuadrotorParams& qp)
      : model_(&m), q_(q), qp_(qp) {
    if (q.cal_size == 0 && q.mode != cp::Mode::Off) throw ModelNotCalibrated();
  }

  /// One recursion. `y_obs_next`, `euler_next`, `u_next`, `dt_next` are
  /// the sensor readings and controls that become the next context; pass
  /// has_obs = false at the trajectory tail to skip the fusion update.
  StepResult step(EstimatorState& st, const Vector6& y_obs_next, const Vector3& euler_next,
                  const Vector4& u_next, double dt_next, bool has_obs, std::mt19937_64& rng) {
    sim::ControlInput u;
    u.rotor_speeds = st.u;
    const sim::PriorResult pr = sim::physics_prior_g(st.y_C, st.euler, u, st.dt, qp_);

    StepResult out;
    out.y_prior = pr.y_next;
    const Eigen::MatrixXd prior_row = model_->hyper.use_prior
                                          ? Eigen::MatrixXd(pr.y_next.transpose())
                                          : Eigen::MatrixXd(Eigen::RowVectorXd::Zero(12));
    try {
      model::Prediction p = model_->predict(st.x_C().transpose(), st.y_C.transpose(),
                                            st.x_T().transpose(), prior_row, rng);
      out.y_plus = p.mu.row(0).transpose();
      out.sigma_plus = cp::scaled_sigma(p.sigma2.row(0).transpose(), q_);
    } catch (const model::NonFinitePrediction&) {
      out.y_plus = pr.y_next;
      out.sigma_plus = Vector12::Constant(kFallbackSigma);
      out.prior_fallback = true;
    }

    st.t += st.dt;
    st.y_C = has_obs ? fuse_context(out.y_plus, out.sigma_plus, y_obs_next) : out.y_plus;
    if (has_obs) st.euler = euler_next;
    st.u = u_next;
    st.dt = dt_next;
    st.step_index += 1;
    return out;
  }

 private:
  model::PiAttNP* model_;
  cp::QuantileVector q_;
  sim::QuadrotorParams qp_;
};

/// Runs the estimator along one stored trajectory: context seeded from the
/// first record, observations taken from each following record's noisy
/// context state. The final step has no successor observation.
inline std::vector<RolloutRow> run_trajectory(model::PiAttNP& m, const cp::QuantileVector& q,
                                              const sim::QuadrotorParams& qp,
                                              const data::MetaDataset& meta, int traj,
                                              std::mt19937_64& rng) {
  const int steps = meta.steps_per_task;
  RecursiveEstimator est(m, q, qp);

  const data::TaskSet& first = meta.trajectory_record(traj, 0);
  EstimatorState st;
  st.t = first.t_k;
  st.u = first.rotor_cmd;
  st.y_C = first.y_C_noisy;
  st.euler = first.euler_noisy;
  st.dt = first.dt;

  std::vector<RolloutRow> rows;
  rows.reserve(static_cast<size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const data::TaskSet& rec = meta.trajectory_record(traj, k);
    RolloutRow row;
    row.step = k;
    row.t = rec.t_next;
    row.y_true = rec.y_T;

    const bool has_next = k + 1 < steps;
    Vector6 y_obs = Vector6::Constant(std::numeric_limits<double>::quiet_NaN());
    Vector3 euler_next = st.euler;
    Vector4 u_next = st.u;
    double dt_next = st.dt;
    if (has_next) {
      const data::TaskSet& nxt = meta.trajectory_record(traj, k + 1);
      y_obs = nxt.y_C_noisy.segment<6>(sim::kObsStart);
      euler_next = nxt.euler_noisy;
      u_next = nxt.rotor_cmd;
      dt_next = nxt.dt;
    }

    StepResult sr = est.step(st, y_obs, euler_next, u_next, dt_next, has_next, rng);
    row.y_plus = sr.y_plus;
    row.sigma_plus = sr.sigma_plus;
    row.y_obs = y_obs;
    row.has_obs = has_next;
    row.prior_fallback = sr.prior_fallback;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace piattnp::est
