#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>

#include "piattnp/config.hpp"
#include "piattnp/errors.hpp"

namespace piattnp::sim {

using Vector3 = Eigen::Vector3d;
using Vector4 = Eigen::Vector4d;
using Vector12 = Eigen::Matrix<double, 12, 1>;
using Matrix3 = Eigen::Matrix3d;

/// Layout of the 12-dim estimation state: velocity, acceleration, body
/// rates, body-rate derivatives (all 3-vectors, in that order).
constexpr int kVel = 0;
constexpr int kAcc = 3;
constexpr int kRate = 6;
constexpr int kRateDot = 9;
constexpr int kStateDim = 12;

/// The sensors expose acceleration and body rates only.
constexpr int kObsStart = 3;
constexpr int kObsDim = 6;

constexpr double kGimbalEps = 1e-3;  // rad margin from |pitch| = pi/2

struct GimbalLockError : NumericalError {
  explicit GimbalLockError(double pitch)
      : NumericalError("pitch " + std::to_string(pitch) + " rad too close to +-pi/2") {}
};

struct QuadrotorState {
  Vector3 v_I = Vector3::Zero();           // translational velocity, inertial frame [m/s]
  Vector3 a_I = Vector3::Zero();           // translational acceleration [m/s^2]
  Vector3 omega_b = Vector3::Zero();       // body rates [rad/s]
  Vector3 omega_dot_b = Vector3::Zero();   // body-rate derivatives [rad/s^2]
  Vector3 euler = Vector3::Zero();         // roll, pitch, yaw [rad]

  Vector12 as_vector() const {
    Vector12 x;
    x.segment<3>(kVel) = v_I;
    x.segment<3>(kAcc) = a_I;
    x.segment<3>(kRate) = omega_b;
    x.segment<3>(kRateDot) = omega_dot_b;
    return x;
  }

  static QuadrotorState from_vector(const Vector12& x, const Vector3& euler) {
    QuadrotorState s;
    s.v_I = x.segment<3>(kVel);
    s.a_I = x.segment<3>(kAcc);
    s.omega_b = x.segment<3>(kRate);
    s.omega_dot_b = x.segment<3>(kRateDot);
    s.euler = euler;
    return s;
  }
};

struct QuadrotorParams {
  double m = 1.0;                                   // [kg]
  double g = 9.81;                                  // [m/s^2]
  Vector3 inertia = Vector3(0.0112, 0.0112, 0.021); // diagonal of I [kg m^2]
  double k_T = 1e-5;                                // thrust coefficient [N s^2/rad^2]
  double b_drag = 1e-6;                             // yaw drag coefficient [N m s^2/rad^2]
  double L = 0.23;                                  // arm length [m]
  double I_r = 6e-5;                                // rotor inertia [kg m^2]

  /// Rotor speed balancing gravity: 4 k_T w^2 = m g.
  double hover_speed() const { return std::sqrt(m * g / (4.0 * k_T)); }

  static QuadrotorParams from_config(const Config& cfg) {
    QuadrotorParams p;
    p.m = cfg.get_double("mass", p.m);
    p.g = cfg.get_double("gravity", p.g);
    p.inertia.x() = cfg.get_double("inertia_xx", p.inertia.x());
    p.inertia.y() = cfg.get_double("inertia_yy", p.inertia.y());
    p.inertia.z() = cfg.get_double("inertia_zz", p.inertia.z());
    p.k_T = cfg.get_double("k_t", p.k_T);
    p.b_drag = cfg.get_double("b_drag", p.b_drag);
    p.L = cfg.get_double("arm_length", p.L);
    p.I_r = cfg.get_double("rotor_inertia", p.I_r);
    if (p.m <= 0 || p.g <= 0 || p.inertia.minCoeff() <= 0 || p.k_T <= 0 || p.b_drag <= 0 ||
        p.L <= 0 || p.I_r <= 0)
      throw ConfigError("quadrotor parameters must be strictly positive");
    return p;
  }
};

struct ControlInput {
  Vector4 rotor_speeds = Vector4::Zero();  // [rad/s], nonnegative
};

struct DisturbanceConfig {
  Vector3 v_w = Vector3::Zero();  // wind velocity [m/s]
  double delta_rotor_max = 0.0;   // rotor spike amplitude bound [rad/s]
  double k_drag_lin = 0.1;        // quadratic drag gain [N s^2/m^2]
  double k_drag_torque = 0.01;    // drag torque gain [N m s^2/m^2]
  double spike_prob = 0.1;        // per-step spike probability

  static DisturbanceConfig disabled() {
    DisturbanceConfig d;
    d.k_drag_lin = 0.0;
    d.k_drag_torque = 0.0;
    d.delta_rotor_max = 0.0;
    d.spike_prob = 0.0;
    return d;
  }
};

/// Rotation body -> inertial for roll/pitch/yaw (Z-Y-X convention).
inline Matrix3 rotation_body_to_inertial(const Vector3& euler) {
  const double cphi = std::cos(euler.x()), sphi = std::sin(euler.x());
  const double cth = std::cos(euler.y()), sth = std::sin(euler.y());
  const double cpsi = std::cos(euler.z()), spsi = std::sin(euler.z());
  Matrix3 r;
  r << cpsi * cth, cpsi * sth * sphi - spsi * cphi, cpsi * sth * cphi + spsi * sphi,
       spsi * cth, spsi * sth * sphi + cpsi * cphi, spsi * sth * cphi - cpsi * sphi,
       -sth,       cth * sphi,                      cth * cphi;
  return r;
}

/// Matrix mapping Euler-angle rates to body rates; singular at |pitch| = pi/2.
inline Matrix3 euler_rate_to_body_rate(const Vector3& euler) {
  const double cphi = std::cos(euler.x()), sphi = std::sin(euler.x());
  const double cth = std::cos(euler.y()), sth = std::sin(euler.y());
  Matrix3 w;
  w << 1.0, 0.0, -sth,
       0.0, cphi, cth * sphi,
       0.0, -sphi, cth * cphi;
  return w;
}

struct ForcesTorques {
  Vector3 F_m_b = Vector3::Zero();   // rotor thrust, body frame [N]
  Vector3 tau_m = Vector3::Zero();   // rotor torques [N m]
  Vector3 tau_g = Vector3::Zero();   // gyroscopic torques [N m]
};

/// Thrust and torques produced by the four rotors. Yaw terms alternate sign
/// with rotor index; the gyroscopic term couples rotor speed with the
/// roll/pitch body rates.
inline ForcesTorques rotor_forces_torques(const ControlInput& u, const QuadrotorParams& p,
                                          const Vector3& omega_b) {
  const Vector4& w = u.rotor_speeds;
  ForcesTorques out;
  const double thrust = p.k_T * w.array().square().sum();
  out.F_m_b = Vector3(0.0, 0.0, thrust);

  out.tau_m.x() = p.L * p.k_T * (w(0) * w(0) - w(2) * w(2));
  out.tau_m.y() = p.L * p.k_T * (w(1) * w(1) - w(3) * w(3));
  out.tau_m.z() = p.b_drag * (w(0) * w(0) - w(1) * w(1) + w(2) * w(2) - w(3) * w(3));

  const double roll_rate = omega_b.x();
  const double pitch_rate = omega_b.y();
  const double alt = w(0) - w(1) + w(2) - w(3);  // sum of (-1)^(i+1) w_i
  out.tau_g.x() = alt * p.I_r * pitch_rate / p.inertia.x();
  out.tau_g.y() = alt * p.I_r * roll_rate / p.inertia.y();
  out.tau_g.z() = 0.0;
  return out;
}

struct AeroDisturbance {
  Vector3 F_aero = Vector3::Zero();    // inertial frame [N]
  Vector3 tau_aero = Vector3::Zero();  // body frame [N m]
};

/// Surrogate aerodynamic model: quadratic drag against the wind-relative
/// velocity, plus a torque from the misalignment between the relative flow
/// and the body z-axis.
inline AeroDisturbance aero_disturbance(const QuadrotorState& state, const DisturbanceConfig& cfg) {
  AeroDisturbance out;
  const Vector3 v_rel = state.v_I - cfg.v_w;
  const double speed = v_rel.norm();
  out.F_aero = -cfg.k_drag_lin * speed * v_rel;
  const Matrix3 r = rotation_body_to_inertial(state.euler);
  const Vector3 z_body_in_I = r.col(2);
  out.tau_aero = -cfg.k_drag_torque * speed * (r.transpose() * v_rel.cross(z_body_in_I));
  return out;
}

struct StateDerivative {
  Vector3 v_dot_I = Vector3::Zero();
  Vector3 euler_dot = Vector3::Zero();
  Vector3 omega_dot_b = Vector3::Zero();
};

inline StateDerivative state_derivative(const QuadrotorState& state, const ControlInput& u,
                                        const QuadrotorParams& p, const DisturbanceConfig& cfg) {
  if (std::abs(state.euler.y()) >= M_PI / 2.0 - kGimbalEps) throw GimbalLockError(state.euler.y());

  const ForcesTorques ft = rotor_forces_torques(u, p, state.omega_b);
  const AeroDisturbance aero = aero_disturbance(state, cfg);
  const Matrix3 r = rotation_body_to_inertial(state.euler);

  StateDerivative d;
  d.v_dot_I = Vector3(0.0, 0.0, -p.g) + (r * ft.F_m_b + aero.F_aero) / p.m;
  d.euler_dot = euler_rate_to_body_rate(state.euler).inverse() * state.omega_b;

  const Vector3 i_omega = p.inertia.cwiseProduct(state.omega_b);
  const Vector3 torque = ft.tau_m + aero.tau_aero - ft.tau_g - state.omega_b.cross(i_omega);
  d.omega_dot_b = torque.cwiseQuotient(p.inertia);
  return d;
}

/// Classical RK4 step over (v_I, euler, omega_b); the returned state's
/// acceleration and rate-derivative blocks are the derivative evaluated at
/// the new state, so the 12-dim target stays self-consistent.
inline QuadrotorState integrate_step(const QuadrotorState& state, const ControlInput& u,
                                     const QuadrotorParams& p, const DisturbanceConfig& cfg,
                                     double dt) {
  using Vector9 = Eigen::Matrix<double, 9, 1>;
  auto pack = [](const QuadrotorState& s) {
    Vector9 y;
    y.segment<3>(0) = s.v_I;
    y.segment<3>(3) = s.euler;
    y.segment<3>(6) = s.omega_b;
    return y;
  };
  auto unpack = [&state](const Vector9& y) {
    QuadrotorState s = state;
    s.v_I = y.segment<3>(0);
    s.euler = y.segment<3>(3);
    s.omega_b = y.segment<3>(6);
    return s;
  };
  auto deriv = [&](const Vector9& y) {
    const StateDerivative d = state_derivative(unpack(y), u, p, cfg);
    Vector9 dy;
    dy.segment<3>(0) = d.v_dot_I;
    dy.segment<3>(3) = d.euler_dot;
    dy.segment<3>(6) = d.omega_dot_b;
    return dy;
  };

  const Vector9 y0 = pack(state);
  const Vector9 k1 = deriv(y0);
  const Vector9 k2 = deriv(y0 + 0.5 * dt * k1);
  const Vector9 k3 = deriv(y0 + 0.5 * dt * k2);
  const Vector9 k4 = deriv(y0 + dt * k3);
  const Vector9 y1 = y0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

  QuadrotorState next = unpack(y1);
  const StateDerivative d_new = state_derivative(next, u, p, cfg);
  next.a_I = d_new.v_dot_I;
  next.omega_dot_b = d_new.omega_dot_b;
  return next;
}

struct PriorResult {
  Vector12 y_next = Vector12::Zero();
  bool gimbal_fallback = false;
};

/// Simplified physics prior: one integration step of the nominal dynamics
/// with no aerodynamic disturbance and the commanded rotor speeds taken at
/// face value, starting from the noisy state. Never throws; near gimbal
/// lock it returns the input unchanged and sets the fallback flag.
inline PriorResult physics_prior_g(const Vector12& y_noisy, const Vector3& euler_noisy,
                                   const ControlInput& u, double dt, const QuadrotorParams& p) {
  PriorResult out;
  try {
    const QuadrotorState start = QuadrotorState::from_vector(y_noisy, euler_noisy);
    const QuadrotorState next = integrate_step(start, u, p, DisturbanceConfig::disabled(), dt);
    out.y_next = next.as_vector();
  } catch (const GimbalLockError&) {
    out.y_next = y_noisy;
    out.gimbal_fallback = true;
  }
  return out;
}

}  // namespace piattnp::sim
