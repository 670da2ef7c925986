#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "piattnp/config.hpp"
#include "piattnp/errors.hpp"
#include "piattnp/rng.hpp"
#include "piattnp/sim/noise.hpp"
#include "piattnp/sim/quadrotor.hpp"

namespace piattnp::data {

using sim::Vector12;
using sim::Vector3;
using sim::Vector4;
using Vector5 = Eigen::Matrix<double, 5, 1>;

struct TrajectoryRejected : std::runtime_error {
  TrajectoryRejected() : std::runtime_error("trajectory hit gimbal lock") {}
};

struct InsufficientData : ConfigError {
  explicit InsufficientData(const std::string& what) : ConfigError(what) {}
};

struct SchemaMismatch : MissingArtifact {
  explicit SchemaMismatch(const std::string& what) : MissingArtifact(what) {}
};

struct CorruptRecord : MissingArtifact {
  explicit CorruptRecord(const std::string& what) : MissingArtifact(what) {}
};

/// One consecutive-step training task: context at t_k, target at t_{k+1}.
struct TaskSet {
  double t_k = 0.0;
  Vector4 rotor_cmd = Vector4::Zero();     // commanded speeds (spikes unobserved)
  Vector12 y_C_clean = Vector12::Zero();
  Vector12 y_C_noisy = Vector12::Zero();   // differs from clean on the 6 observed dims only
  Vector3 euler_noisy = Vector3::Zero();
  double t_next = 0.0;
  Vector12 y_T = Vector12::Zero();
  double dt = 0.0;                          // equals t_next - t_k; stored for integrity checks

  Vector5 x_C() const {
    Vector5 x;
    x(0) = t_k;
    x.segment<4>(1) = rotor_cmd;
    return x;
  }

  /// Target input: next timestamp with four padded zeros for size consistency.
  Vector5 x_T() const {
    Vector5 x = Vector5::Zero();
    x(0) = t_next;
    return x;
  }
};

constexpr int kRecordDoubles = 46;
constexpr const char* kSchemaVersion = "piattnp-meta-1";

/// Everything needed to re-run the integrator for one stored record;
/// kept in memory only, never persisted.
struct ReplayInfo {
  Vector12 y_prev_clean = Vector12::Zero();
  Vector3 euler_prev_clean = Vector3::Zero();
  Vector4 rotor_actual = Vector4::Zero();  // command plus any spike, clamped at zero
  Vector3 v_w = Vector3::Zero();
  double dt = 0.0;
};

struct SplitIndices {
  std::vector<int> train;  // includes the calibration subset
  std::vector<int> test;
  std::vector<int> cal;    // proper subset of train
  uint64_t seed = 0;
  double train_frac = 0.0;
};

struct GenParams {
  int n_tasks = 400;
  int steps_per_task = 50;
  double dt_min = 0.01, dt_max = 0.05;
  double init_vel_bound = 5.0;     // [m/s]
  double init_rate_bound = 1.0;    // [rad/s]
  double init_euler_bound = 0.3;   // [rad]
  double wind_bound = 30.0;        // [m/s]
  double rotor_spike_max = 100.0;  // [rad/s]
  double spike_prob = 0.1;
  double rotor_walk_step = 5.0;    // [rad/s] per-step command walk amplitude
  double euler_noise_std = 0.1;    // [rad]

  static GenParams from_config(const Config& cfg) {
    GenParams g;
    g.n_tasks = cfg.get_int("n_tasks", g.n_tasks);
    g.steps_per_task = cfg.get_int("steps_per_task", g.steps_per_task);
    g.dt_min = cfg.get_double("dt_min", g.dt_min);
    g.dt_max = cfg.get_double("dt_max", g.dt_max);
    g.init_vel_bound = cfg.get_double("init_vel_bound", g.init_vel_bound);
    g.init_rate_bound = cfg.get_double("init_rate_bound", g.init_rate_bound);
    g.init_euler_bound = cfg.get_double("init_euler_bound", g.init_euler_bound);
    g.wind_bound = cfg.get_double("wind_bound", g.wind_bound);
    g.rotor_spike_max = cfg.get_double("rotor_spike_max", g.rotor_spike_max);
    g.spike_prob = cfg.get_double("spike_prob", g.spike_prob);
    g.rotor_walk_step = cfg.get_double("rotor_walk_step", g.rotor_walk_step);
    g.euler_noise_std = cfg.get_double("euler_noise_std", g.euler_noise_std);
    if (g.n_tasks < 1 || g.steps_per_task < 1) throw ConfigError("n_tasks and steps_per_task must be >= 1");
    if (!(g.dt_min > 0) || !(g.dt_max >= g.dt_min)) throw ConfigError("need 0 < dt_min <= dt_max");
    if (g.spike_prob < 0 || g.spike_prob > 1) throw ConfigError("spike_prob must be in [0, 1]");
    return g;
  }
};

class MetaDataset {
 public:
  std::vector<TaskSet> records;
  std::vector<ReplayInfo> replay;  // empty after load(); populated by generate
  sim::NoiseModel noise;
  int n_tasks = 0;
  int steps_per_task = 0;
  uint64_t seed = 0;
  int trajectories_rejected = 0;
  nlohmann::json generation_config;  // echo of the knobs that produced the records

  int size() const { return static_cast<int>(records.size()); }

  const TaskSet& trajectory_record(int traj, int step) const {
    return records[static_cast<size_t>(traj * steps_per_task + step)];
  }
};

namespace detail {

struct TrajectoryDraw {
  std::vector<TaskSet> records;
  std::vector<ReplayInfo> replay;
};

inline TrajectoryDraw generate_trajectory(std::mt19937_64& rng, const GenParams& gp,
                                          const sim::QuadrotorParams& qp,
                                          const sim::NoiseModel& noise) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_real_distribution<double> vel_d(-gp.init_vel_bound, gp.init_vel_bound);
  std::uniform_real_distribution<double> rate_d(-gp.init_rate_bound, gp.init_rate_bound);
  std::uniform_real_distribution<double> euler_d(-gp.init_euler_bound, gp.init_euler_bound);
  std::uniform_real_distribution<double> wind_d(-gp.wind_bound, gp.wind_bound);
  std::uniform_real_distribution<double> dt_d(gp.dt_min, gp.dt_max);
  std::uniform_real_distribution<double> walk_d(-gp.rotor_walk_step, gp.rotor_walk_step);
  std::uniform_real_distribution<double> spike_d(-gp.rotor_spike_max, gp.rotor_spike_max);
  std::normal_distribution<double> euler_noise_d(0.0, gp.euler_noise_std);

  sim::QuadrotorState state;
  for (int i = 0; i < 3; ++i) state.v_I(i) = vel_d(rng);
  for (int i = 0; i < 3; ++i) state.omega_b(i) = rate_d(rng);
  for (int i = 0; i < 3; ++i) state.euler(i) = euler_d(rng);

  sim::DisturbanceConfig dist;
  for (int i = 0; i < 3; ++i) dist.v_w(i) = wind_d(rng);
  dist.delta_rotor_max = gp.rotor_spike_max;
  dist.spike_prob = gp.spike_prob;

  Vector4 cmd = Vector4::Constant(qp.hover_speed());

  TrajectoryDraw out;
  out.records.reserve(static_cast<size_t>(gp.steps_per_task));
  out.replay.reserve(static_cast<size_t>(gp.steps_per_task));
  double t = 0.0;
  bool accel_filled = false;

  for (int k = 0; k < gp.steps_per_task; ++k) {
    const double dt = dt_d(rng);
    for (int i = 0; i < 4; ++i) cmd(i) = std::max(0.0, cmd(i) + walk_d(rng));

    sim::ControlInput actual;
    actual.rotor_speeds = cmd;
    if (u01(rng) < gp.spike_prob)
      for (int i = 0; i < 4; ++i)
        actual.rotor_speeds(i) = std::max(0.0, actual.rotor_speeds(i) + spike_d(rng));

    sim::QuadrotorState next;
    try {
      if (!accel_filled) {
        // First step: back-fill the initial acceleration blocks so the
        // stored context state is dynamically consistent.
        const sim::StateDerivative d0 = sim::state_derivative(state, actual, qp, dist);
        state.a_I = d0.v_dot_I;
        state.omega_dot_b = d0.omega_dot_b;
        accel_filled = true;
      }
      next = sim::integrate_step(state, actual, qp, dist, dt);
    } catch (const sim::GimbalLockError&) {
      throw TrajectoryRejected();
    }

    TaskSet rec;
    rec.t_k = t;
    rec.rotor_cmd = cmd;
    rec.y_C_clean = state.as_vector();
    rec.y_C_noisy = noise.inject(rec.y_C_clean, noise.sample_row(rng));
    for (int i = 0; i < 3; ++i) rec.euler_noisy(i) = state.euler(i) + euler_noise_d(rng);
    rec.t_next = t + dt;
    rec.y_T = next.as_vector();
    rec.dt = dt;

    ReplayInfo rep;
    rep.y_prev_clean = rec.y_C_clean;
    rep.euler_prev_clean = state.euler;
    rep.rotor_actual = actual.rotor_speeds;
    rep.v_w = dist.v_w;
    rep.dt = dt;

    out.records.push_back(rec);
    out.replay.push_back(rep);
    state = next;
    t = rec.t_next;
  }
  return out;
}

}  // namespace detail

/// Simulates n_tasks trajectories and slices them into consecutive-step
/// task records. Each trajectory gets its own derived seed; a trajectory
/// that reaches gimbal lock is discarded and redrawn under the next seed.
inline MetaDataset generate_meta_dataset(const GenParams& gp, const sim::QuadrotorParams& qp,
                                         const sim::NoiseGenConfig& nc, uint64_t seed) {
  MetaDataset meta;
  meta.n_tasks = gp.n_tasks;
  meta.steps_per_task = gp.steps_per_task;
  meta.seed = seed;

  std::mt19937_64 noise_rng = make_rng(derive_seed(seed, 0));
  meta.noise = sim::NoiseModel::build(noise_rng, nc);

  meta.records.reserve(static_cast<size_t>(gp.n_tasks) * static_cast<size_t>(gp.steps_per_task));
  meta.replay.reserve(meta.records.capacity());

  uint64_t attempt = 1;
  for (int task = 0; task < gp.n_tasks; ++task) {
    for (;;) {
      std::mt19937_64 rng = make_rng(derive_seed(seed, attempt));
      ++attempt;
      try {
        detail::TrajectoryDraw draw = detail::generate_trajectory(rng, gp, qp, meta.noise);
        meta.records.insert(meta.records.end(), draw.records.begin(), draw.records.end());
        meta.replay.insert(meta.replay.end(), draw.replay.begin(), draw.replay.end());
        break;
      } catch (const TrajectoryRejected&) {
        ++meta.trajectories_rejected;
      }
    }
  }
  return meta;
}

/// Shuffled record-level split. The train block contains the calibration
/// subset; downstream consumers train on train minus cal.
inline SplitIndices split(const MetaDataset& meta, double train_frac, int cal_size, uint64_t seed) {
  const int n = meta.size();
  if (train_frac < 0.6)
    throw InsufficientData("train fraction " + std::to_string(train_frac) + " below the 0.6 floor");
  if (train_frac > 1.0) throw InsufficientData("train fraction above 1");
  const int n_train = static_cast<int>(std::llround(train_frac * n));
  if (cal_size < 1 || cal_size >= n_train)
    throw InsufficientData("calibration size must satisfy 1 <= cal < " + std::to_string(n_train));

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng = make_rng(derive_seed(seed, 0x73706c69));  // distinct stream for splitting
  std::shuffle(order.begin(), order.end(), rng);

  SplitIndices s;
  s.seed = seed;
  s.train_frac = train_frac;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.test.assign(order.begin() + n_train, order.end());
  std::vector<int> train_order = s.train;
  std::shuffle(train_order.begin(), train_order.end(), rng);
  s.cal.assign(train_order.begin(), train_order.begin() + cal_size);
  return s;
}

/// Train indices with the calibration subset removed, original order kept.
inline std::vector<int> proper_train_indices(const SplitIndices& s) {
  std::vector<int> cal_sorted = s.cal;
  std::sort(cal_sorted.begin(), cal_sorted.end());
  std::vector<int> out;
  out.reserve(s.train.size() - s.cal.size());
  for (int idx : s.train)
    if (!std::binary_search(cal_sorted.begin(), cal_sorted.end(), idx)) out.push_back(idx);
  return out;
}

namespace detail {

inline void pack_record(const TaskSet& r, double* p) {
  int i = 0;
  p[i++] = r.t_k;
  for (int j = 0; j < 4; ++j) p[i++] = r.rotor_cmd(j);
  for (int j = 0; j < 12; ++j) p[i++] = r.y_C_clean(j);
  for (int j = 0; j < 12; ++j) p[i++] = r.y_C_noisy(j);
  for (int j = 0; j < 3; ++j) p[i++] = r.euler_noisy(j);
  p[i++] = r.t_next;
  for (int j = 0; j < 12; ++j) p[i++] = r.y_T(j);
  p[i++] = r.dt;
}

inline TaskSet unpack_record(const double* p) {
  TaskSet r;
  int i = 0;
  r.t_k = p[i++];
  for (int j = 0; j < 4; ++j) r.rotor_cmd(j) = p[i++];
  for (int j = 0; j < 12; ++j) r.y_C_clean(j) = p[i++];
  for (int j = 0; j < 12; ++j) r.y_C_noisy(j) = p[i++];
  for (int j = 0; j < 3; ++j) r.euler_noisy(j) = p[i++];
  r.t_next = p[i++];
  for (int j = 0; j < 12; ++j) r.y_T(j) = p[i++];
  r.dt = p[i++];
  return r;
}

inline uint64_t fnv1a(const unsigned char* data, size_t n) {
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace detail

/// Writes records.bin (little-endian 64-bit floats, 46 per record) and
/// manifest.json next to it. An existing split can be embedded so the
/// partition survives the round trip.
inline void save_dataset(const MetaDataset& meta, const std::string& dir,
                         const SplitIndices* split_opt = nullptr) {
  const std::string bin_path = dir + "/records.bin";
  std::vector<double> flat(static_cast<size_t>(meta.size()) * kRecordDoubles);
  for (int i = 0; i < meta.size(); ++i)
    detail::pack_record(meta.records[static_cast<size_t>(i)],
                        flat.data() + static_cast<size_t>(i) * kRecordDoubles);

  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw MissingArtifact("cannot open " + bin_path + " for writing");
  bin.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  bin.close();

  nlohmann::json m;
  m["schema"] = kSchemaVersion;
  m["n_records"] = meta.size();
  m["n_tasks"] = meta.n_tasks;
  m["steps_per_task"] = meta.steps_per_task;
  m["seed"] = meta.seed;
  m["trajectories_rejected"] = meta.trajectories_rejected;
  m["checksum_fnv1a"] =
      detail::hex64(detail::fnv1a(reinterpret_cast<const unsigned char*>(flat.data()),
                                  flat.size() * sizeof(double)));
  m["generation_config"] = meta.generation_config;
  if (split_opt) {
    m["split"] = {{"seed", split_opt->seed},
                  {"train_frac", split_opt->train_frac},
                  {"train", split_opt->train},
                  {"test", split_opt->test},
                  {"cal", split_opt->cal}};
  }
  std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
  if (!mf) throw MissingArtifact("cannot open " + dir + "/manifest.json for writing");
  mf << m.dump(2) << "\n";
}

inline MetaDataset load_dataset(const std::string& dir, SplitIndices* split_out = nullptr) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw MissingArtifact("manifest not found in " + dir);
  nlohmann::json m;
  try {
    mf >> m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptRecord(std::string("manifest parse failure: ") + e.what());
  }
  if (!m.contains("schema") || m["schema"] != kSchemaVersion)
    throw SchemaMismatch("unsupported dataset schema in " + dir);

  const std::string bin_path = dir + "/records.bin";
  std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
  if (!bin) throw MissingArtifact("records not found at " + bin_path);
  const auto bytes = static_cast<size_t>(bin.tellg());
  bin.seekg(0);
  const size_t rec_bytes = kRecordDoubles * sizeof(double);
  if (bytes % rec_bytes != 0) throw CorruptRecord("record file size is not a whole record multiple");
  const size_t n = bytes / rec_bytes;
  if (m.contains("n_records") && m["n_records"].get<size_t>() != n)
    throw CorruptRecord("manifest record count disagrees with file size");

  std::vector<double> flat(n * kRecordDoubles);
  bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(bytes));
  if (!bin) throw CorruptRecord("short read on " + bin_path);

  const std::string sum = detail::hex64(detail::fnv1a(
      reinterpret_cast<const unsigned char*>(flat.data()), flat.size() * sizeof(double)));
  if (m.contains("checksum_fnv1a") && m["checksum_fnv1a"].get<std::string>() != sum)
    throw CorruptRecord("checksum mismatch on " + bin_path);

  MetaDataset meta;
  meta.records.resize(n);
  for (size_t i = 0; i < n; ++i)
    meta.records[i] = detail::unpack_record(flat.data() + i * kRecordDoubles);
  meta.n_tasks = m.value("n_tasks", 0);
  meta.steps_per_task = m.value("steps_per_task", 0);
  meta.seed = m.value("seed", uint64_t{0});
  meta.trajectories_rejected = m.value("trajectories_rejected", 0);
  if (m.contains("generation_config")) meta.generation_config = m["generation_config"];

  if (split_out) {
    if (!m.contains("split")) throw MissingArtifact("dataset in " + dir + " carries no split");
    const auto& s = m["split"];
    split_out->seed = s.value("seed", uint64_t{0});
    split_out->train_frac = s.value("train_frac", 0.0);
    split_out->train = s["train"].get<std::vector<int>>();
    split_out->test = s["test"].get<std::vector<int>>();
    split_out->cal = s["cal"].get<std::vector<int>>();
  }
  return meta;
}

/// Column-matrix views over a list of record indices, ready for batched
/// model evaluation. Rows follow the index order given.
struct Batch {
  Eigen::MatrixXd x_C;          // B x 5
  Eigen::MatrixXd y_C_noisy;    // B x 12
  Eigen::MatrixXd y_C_clean;    // B x 12
  Eigen::MatrixXd euler_noisy;  // B x 3
  Eigen::MatrixXd x_T;          // B x 5
  Eigen::MatrixXd y_T;          // B x 12
  Eigen::VectorXd dt;           // B
};

inline Batch make_batch(const MetaDataset& meta, const std::vector<int>& indices) {
  const int b = static_cast<int>(indices.size());
  Batch out;
  out.x_C.resize(b, 5);
  out.y_C_noisy.resize(b, 12);
  out.y_C_clean.resize(b, 12);
  out.euler_noisy.resize(b, 3);
  out.x_T.resize(b, 5);
  out.y_T.resize(b, 12);
  out.dt.resize(b);
  for (int i = 0; i < b; ++i) {
    const TaskSet& r = meta.records[static_cast<size_t>(indices[static_cast<size_t>(i)])];
    out.x_C.row(i) = r.x_C().transpose();
    out.y_C_noisy.row(i) = r.y_C_noisy.transpose();
    out.y_C_clean.row(i) = r.y_C_clean.transpose();
    out.euler_noisy.row(i) = r.euler_noisy.transpose();
    out.x_T.row(i) = r.x_T().transpose();
    out.y_T.row(i) = r.y_T.transpose();
    out.dt(i) = r.dt;
  }
  return out;
}

}  // namespace piattnp::data
