#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "piattnp/est/estimator.hpp"

using namespace piattnp;
using namespace piattnp::est;
using Catch::Approx;

namespace {

data::MetaDataset benign_dataset(uint64_t seed) {
  data::GenParams gp;
  gp.n_tasks = 4;
  gp.steps_per_task = 15;
  gp.wind_bound = 2.0;
  gp.rotor_spike_max = 10.0;
  gp.dt_max = 0.02;
  return data::generate_meta_dataset(gp, sim::QuadrotorParams{}, sim::NoiseGenConfig{}, seed);
}

model::PiAttNP small_model(uint64_t seed, bool use_prior = true) {
  model::ModelHyper h;
  h.hidden = 16;
  h.latent = 8;
  h.heads = 2;
  h.use_prior = use_prior;
  return model::PiAttNP(h, seed);
}

cp::QuantileVector off_quantile() {
  cp::QuantileVector q;
  q.mode = cp::Mode::Off;
  return q;
}

}  // namespace

TEST_CASE("fusion weight limits", "[estimator]") {
  Vector6 s = Vector6::Zero();
  CHECK((fusion_beta(s) - Vector6::Ones()).norm() == 0.0);  // no uncertainty: trust the model
  s.setConstant(1.0);
  CHECK(fusion_beta(s)(0) == 0.5);
  s.setConstant(kFallbackSigma);
  CHECK(fusion_beta(s)(2) == Approx(1e-12).epsilon(1e-9));

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 50.0);
  for (int trial = 0; trial < 100; ++trial) {
    for (int j = 0; j < 6; ++j) s(j) = u(rng);
    const Vector6 b = fusion_beta(s);
    for (int j = 0; j < 6; ++j) {
      CHECK(b(j) > 0.0);
      CHECK(b(j) <= 1.0);
    }
  }
}

TEST_CASE("context fusion blends only the observed dims", "[estimator]") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-5.0, 5.0), su(0.0, 10.0);

  for (int trial = 0; trial < 50; ++trial) {
    Vector12 y_plus, sigma_plus;
    Vector6 y_obs;
    for (int j = 0; j < 12; ++j) {
      y_plus(j) = u(rng);
      sigma_plus(j) = su(rng);
    }
    for (int j = 0; j < 6; ++j) y_obs(j) = u(rng);

    const Vector12 fused = fuse_context(y_plus, sigma_plus, y_obs);
    for (int d : {0, 1, 2, 9, 10, 11}) CHECK(fused(d) == y_plus(d));  // pass-through
    for (int j = 0; j < 6; ++j) {
      const int d = sim::kObsStart + j;
      const double lo = std::min(y_plus(d), y_obs(j));
      const double hi = std::max(y_plus(d), y_obs(j));
      CHECK(fused(d) >= lo - 1e-12);
      CHECK(fused(d) <= hi + 1e-12);
    }
  }

  SECTION("zero uncertainty keeps the prediction exactly") {
    Vector12 y_plus = Vector12::LinSpaced(12, -1.0, 1.0);
    const Vector12 fused = fuse_context(y_plus, Vector12::Zero(), Vector6::Constant(99.0));
    CHECK((fused - y_plus).norm() == 0.0);
  }
  SECTION("huge uncertainty collapses onto the observation") {
    Vector12 y_plus = Vector12::Constant(3.0);
    Vector6 y_obs = Vector6::Constant(-2.0);
    const Vector12 fused =
        fuse_context(y_plus, Vector12::Constant(kFallbackSigma), y_obs);
    for (int j = 0; j < 6; ++j)
      CHECK(fused(sim::kObsStart + j) == Approx(-2.0).margin(1e-9));
    CHECK(fused(0) == 3.0);
  }
}

TEST_CASE("estimator state feature layout", "[estimator]") {
  EstimatorState st;
  st.t = 1.5;
  st.u = Vector4(400.0, 410.0, 420.0, 430.0);
  st.dt = 0.02;
  const Vector5 xc = st.x_C();
  CHECK(xc(0) == 1.5);
  CHECK(xc(1) == 400.0);
  CHECK(xc(4) == 430.0);
  const Vector5 xt = st.x_T();
  CHECK(xt(0) == 1.52);
  CHECK(xt.segment<4>(1).norm() == 0.0);
}

TEST_CASE("construction requires calibration unless scaling is off", "[estimator]") {
  model::PiAttNP m = small_model(21);
  cp::QuantileVector q;  // cal_size == 0
  q.mode = cp::Mode::Marginal;
  CHECK_THROWS_AS(RecursiveEstimator(m, q, sim::QuadrotorParams{}), ModelNotCalibrated);
  q.mode = cp::Mode::Joint;
  CHECK_THROWS_AS(RecursiveEstimator(m, q, sim::QuadrotorParams{}), ModelNotCalibrated);
  CHECK_NOTHROW(RecursiveEstimator(m, off_quantile(), sim::QuadrotorParams{}));
  q.mode = cp::Mode::Marginal;
  q.cal_size = 10;
  CHECK_NOTHROW(RecursiveEstimator(m, q, sim::QuadrotorParams{}));
}

TEST_CASE("one recursion with an untrained model", "[estimator]") {
  // Zero-initialized decoder head: the prediction equals the physics prior
  // and the variance sits at its constant initial value.
  model::PiAttNP m = small_model(22);
  const sim::QuadrotorParams qp;
  RecursiveEstimator est(m, off_quantile(), qp);

  EstimatorState st;
  st.t = 0.1;
  st.u = Vector4::Constant(qp.hover_speed());
  st.y_C = Vector12::Zero();
  st.y_C(2) = -1.0;
  st.y_C(3) = 0.4;
  st.euler = Vector3(0.01, -0.02, 0.03);
  st.dt = 0.02;
  const EstimatorState before = st;

  sim::ControlInput u;
  u.rotor_speeds = before.u;
  const sim::PriorResult pr = sim::physics_prior_g(before.y_C, before.euler, u, before.dt, qp);

  const Vector6 y_obs = Vector6::Constant(0.25);
  const Vector3 euler_next(0.02, -0.01, 0.04);
  const Vector4 u_next = Vector4::Constant(500.0);
  std::mt19937_64 rng(make_rng(77));
  StepResult sr = est.step(st, y_obs, euler_next, u_next, 0.03, true, rng);

  CHECK((sr.y_prior - pr.y_next).norm() == 0.0);
  CHECK((sr.y_plus - pr.y_next).norm() == 0.0);
  const double sd0 = std::sqrt(std::log(2.0) + 1e-6);
  for (int j = 0; j < 12; ++j) CHECK(sr.sigma_plus(j) == Approx(sd0).margin(1e-15));
  CHECK_FALSE(sr.prior_fallback);

  // state rolled forward
  CHECK(st.t == before.t + before.dt);
  CHECK(st.dt == 0.03);
  CHECK((st.u - u_next).norm() == 0.0);
  CHECK((st.euler - euler_next).norm() == 0.0);
  CHECK(st.step_index == 1);
  const Vector12 fused = fuse_context(sr.y_plus, sr.sigma_plus, y_obs);
  CHECK((st.y_C - fused).norm() == 0.0);

  SECTION("no observation keeps the pure prediction as context") {
    EstimatorState st2 = before;
    RecursiveEstimator est2(m, off_quantile(), qp);
    std::mt19937_64 rng2(make_rng(77));
    StepResult sr2 = est2.step(st2, y_obs, euler_next, u_next, 0.03, false, rng2);
    CHECK((st2.y_C - sr2.y_plus).norm() == 0.0);
    CHECK((st2.euler - before.euler).norm() == 0.0);  // stale attitude retained
  }
}

TEST_CASE("quantile scaling reaches the reported uncertainty", "[estimator]") {
  model::PiAttNP m = small_model(23);
  cp::QuantileVector q;
  q.mode = cp::Mode::Marginal;
  q.cal_size = 50;
  q.q = Vector12::Constant(4.0);
  RecursiveEstimator est(m, q, sim::QuadrotorParams{});

  EstimatorState st;
  st.u = Vector4::Constant(450.0);
  st.dt = 0.02;
  std::mt19937_64 rng(make_rng(5));
  StepResult sr = est.step(st, Vector6::Zero(), Vector3::Zero(), st.u, 0.02, true, rng);
  // sigma+ = q * sd with sd = sqrt(ln 2 + 1e-6)
  const double expect = 4.0 * std::sqrt(std::log(2.0) + 1e-6);
  for (int j = 0; j < 12; ++j) CHECK(sr.sigma_plus(j) == Approx(expect).margin(1e-15));
}

TEST_CASE("non-finite model output falls back to the prior", "[estimator]") {
  model::PiAttNP m = small_model(24);
  m.params().front()->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const sim::QuadrotorParams qp;
  RecursiveEstimator est(m, off_quantile(), qp);

  EstimatorState st;
  st.u = Vector4::Constant(qp.hover_speed());
  st.dt = 0.02;
  const EstimatorState before = st;
  sim::ControlInput u;
  u.rotor_speeds = before.u;
  const sim::PriorResult pr = sim::physics_prior_g(before.y_C, before.euler, u, before.dt, qp);

  const Vector6 y_obs = Vector6::Constant(0.5);
  std::mt19937_64 rng(make_rng(6));
  StepResult sr = est.step(st, y_obs, Vector3::Zero(), before.u, 0.02, true, rng);

  CHECK(sr.prior_fallback);
  CHECK((sr.y_plus - pr.y_next).norm() == 0.0);  // finite prior substituted
  for (int j = 0; j < 12; ++j) CHECK(sr.sigma_plus(j) == kFallbackSigma);
  // fusion weight collapsed: the next context tracks the raw observation
  for (int j = 0; j < 6; ++j)
    CHECK(st.y_C(sim::kObsStart + j) == Approx(0.5).margin(1e-9));
}

TEST_CASE("trajectory rollout shape and determinism", "[estimator]") {
  const data::MetaDataset meta = benign_dataset(41);
  model::PiAttNP m = small_model(41);

  std::mt19937_64 rng(make_rng(derive_seed(41, 0x0117)));
  const std::vector<RolloutRow> rows =
      run_trajectory(m, off_quantile(), sim::QuadrotorParams{}, meta, 1, rng);
  REQUIRE(rows.size() == static_cast<size_t>(meta.steps_per_task));

  for (int k = 0; k < meta.steps_per_task; ++k) {
    const data::TaskSet& rec = meta.trajectory_record(1, k);
    CHECK(rows[static_cast<size_t>(k)].step == k);
    CHECK(rows[static_cast<size_t>(k)].t == rec.t_next);
    CHECK((rows[static_cast<size_t>(k)].y_true - rec.y_T).norm() == 0.0);
    CHECK(rows[static_cast<size_t>(k)].sigma_plus.allFinite());
  }
  CHECK(rows.back().has_obs == false);
  CHECK(std::isnan(rows.back().y_obs(0)));
  CHECK(rows.front().has_obs == true);
  CHECK(rows.front().y_obs.allFinite());

  // same seed reruns bit-identically; a different seed may not
  std::mt19937_64 rng_b(make_rng(derive_seed(41, 0x0117)));
  const std::vector<RolloutRow> again =
      run_trajectory(m, off_quantile(), sim::QuadrotorParams{}, meta, 1, rng_b);
  for (size_t k = 0; k < rows.size(); ++k) {
    CHECK((rows[k].y_plus - again[k].y_plus).norm() == 0.0);
    CHECK((rows[k].sigma_plus - again[k].sigma_plus).norm() == 0.0);
  }
}

TEST_CASE("untrained rollout reproduces the recursive prior chain", "[estimator]") {
  // With mu == prior, each y_plus must equal the physics step applied to the
  // previous fused context, independently recomputed here.
  const data::MetaDataset meta = benign_dataset(42);
  model::PiAttNP m = small_model(42);
  const sim::QuadrotorParams qp;

  std::mt19937_64 rng(make_rng(1));
  const std::vector<RolloutRow> rows = run_trajectory(m, off_quantile(), qp, meta, 0, rng);

  const data::TaskSet& first = meta.trajectory_record(0, 0);
  Vector12 y_C = first.y_C_noisy;
  Vector3 euler = first.euler_noisy;
  Vector4 u_cur = first.rotor_cmd;
  double dt = first.dt;
  const double sd0 = std::sqrt(std::log(2.0) + 1e-6);

  for (int k = 0; k < meta.steps_per_task; ++k) {
    sim::ControlInput u;
    u.rotor_speeds = u_cur;
    const sim::PriorResult pr = sim::physics_prior_g(y_C, euler, u, dt, qp);
    REQUIRE((rows[static_cast<size_t>(k)].y_plus - pr.y_next).norm() == 0.0);

    if (k + 1 < meta.steps_per_task) {
      const data::TaskSet& nxt = meta.trajectory_record(0, k + 1);
      y_C = fuse_context(pr.y_next, Vector12::Constant(sd0),
                         nxt.y_C_noisy.segment<6>(sim::kObsStart));
      euler = nxt.euler_noisy;
      u_cur = nxt.rotor_cmd;
      dt = nxt.dt;
    }
  }
}
