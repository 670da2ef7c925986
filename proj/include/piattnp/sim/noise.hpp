#pragma once

#include <Eigen/Dense>
#include <random>
#include <vector>

#include "piattnp/config.hpp"
#include "piattnp/errors.hpp"
#include "piattnp/sim/quadrotor.hpp"

namespace piattnp::sim {

struct NoisePeak {
  double weight = 0.0;
  double mean = 0.0;    // magnitude; each sampled component flips its sign at random
  double stddev = 0.0;
};

struct NoiseMixture {
  std::vector<NoisePeak> peaks;  // weights nonnegative, sum to 1
};

struct NoiseGenConfig {
  int n_peaks_max = 5;     // peak count drawn uniformly from {2..n_peaks_max}
  int pool_size = 100;     // rows in the precomputed noise pool
  double s_motion = 1e-4;  // motion-dependent amplification gain

  double accel_mean_lo = 0.075, accel_mean_hi = 0.75;   // [m/s^2]
  double accel_std_lo = 0.015, accel_std_hi = 0.9;
  double rate_mean_lo = 0.01, rate_mean_hi = 0.5;       // [rad/s]
  double rate_std_lo = 0.05, rate_std_hi = 1.0;

  static NoiseGenConfig from_config(const Config& cfg) {
    NoiseGenConfig n;
    n.n_peaks_max = cfg.get_int("noise_peaks_max", n.n_peaks_max);
    n.pool_size = cfg.get_int("noise_pool_size", n.pool_size);
    n.s_motion = cfg.get_double("noise_s_motion", n.s_motion);
    n.accel_mean_lo = cfg.get_double("noise_accel_mean_lo", n.accel_mean_lo);
    n.accel_mean_hi = cfg.get_double("noise_accel_mean_hi", n.accel_mean_hi);
    n.accel_std_lo = cfg.get_double("noise_accel_std_lo", n.accel_std_lo);
    n.accel_std_hi = cfg.get_double("noise_accel_std_hi", n.accel_std_hi);
    n.rate_mean_lo = cfg.get_double("noise_rate_mean_lo", n.rate_mean_lo);
    n.rate_mean_hi = cfg.get_double("noise_rate_mean_hi", n.rate_mean_hi);
    n.rate_std_lo = cfg.get_double("noise_rate_std_lo", n.rate_std_lo);
    n.rate_std_hi = cfg.get_double("noise_rate_std_hi", n.rate_std_hi);
    if (n.n_peaks_max < 2) throw ConfigError("noise_peaks_max must be >= 2");
    if (n.pool_size < 1) throw ConfigError("noise_pool_size must be >= 1");
    if (n.s_motion < 0) throw ConfigError("noise_s_motion must be >= 0");
    return n;
  }
};

inline NoiseMixture sample_mixture(std::mt19937_64& rng, int n_peaks_max, double mean_lo,
                                   double mean_hi, double std_lo, double std_hi) {
  std::uniform_int_distribution<int> peak_count(2, n_peaks_max);
  const int n = peak_count(rng);

  NoiseMixture mix;
  mix.peaks.resize(static_cast<size_t>(n));
  std::uniform_real_distribution<double> raw_weight(0.0, 1.0);
  double total = 0.0;
  for (auto& pk : mix.peaks) {
    pk.weight = raw_weight(rng);
    total += pk.weight;
  }
  for (auto& pk : mix.peaks) pk.weight /= total;  // L1 normalization

  std::uniform_real_distribution<double> mean_dist(mean_lo, mean_hi);
  std::uniform_real_distribution<double> std_dist(std_lo, std_hi);
  for (auto& pk : mix.peaks) {
    pk.mean = mean_dist(rng);
    pk.stddev = std_dist(rng);
  }
  return mix;
}

/// Largest-remainder apportionment of `total` rows across the mixture
/// weights: floor first, then hand out the shortfall by descending
/// fractional part (ties resolved by lower peak index).
inline std::vector<int> allocate_pool_counts(const NoiseMixture& mix, int total) {
  const int n = static_cast<int>(mix.peaks.size());
  std::vector<int> counts(n);
  std::vector<std::pair<double, int>> remainders(n);
  int assigned = 0;
  for (int i = 0; i < n; ++i) {
    const double exact = mix.peaks[static_cast<size_t>(i)].weight * total;
    counts[static_cast<size_t>(i)] = static_cast<int>(std::floor(exact));
    assigned += counts[static_cast<size_t>(i)];
    remainders[static_cast<size_t>(i)] = {exact - std::floor(exact), i};
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int k = 0; k < total - assigned; ++k)
    counts[static_cast<size_t>(remainders[static_cast<size_t>(k)].second)] += 1;
  return counts;
}

/// Precomputed multimodal sensor noise. Each row of `pool` is one 6-dim
/// draw: columns 0-2 perturb acceleration, columns 3-5 the body rates.
class NoiseModel {
 public:
  NoiseMixture accel_mixture;
  NoiseMixture rate_mixture;
  Eigen::MatrixXd pool;  // pool_size x 6
  double s_motion = 1e-4;

  static NoiseModel build(std::mt19937_64& rng, const NoiseGenConfig& cfg) {
    NoiseModel m;
    m.s_motion = cfg.s_motion;
    m.accel_mixture = sample_mixture(rng, cfg.n_peaks_max, cfg.accel_mean_lo, cfg.accel_mean_hi,
                                     cfg.accel_std_lo, cfg.accel_std_hi);
    m.rate_mixture = sample_mixture(rng, cfg.n_peaks_max, cfg.rate_mean_lo, cfg.rate_mean_hi,
                                    cfg.rate_std_lo, cfg.rate_std_hi);
    m.pool.resize(cfg.pool_size, 6);
    fill_block(rng, m.pool, 0, m.accel_mixture, cfg.pool_size);
    fill_block(rng, m.pool, 3, m.rate_mixture, cfg.pool_size);
    return m;
  }

  /// One pool row chosen uniformly.
  Eigen::Matrix<double, 6, 1> sample_row(std::mt19937_64& rng) const {
    std::uniform_int_distribution<int> idx(0, static_cast<int>(pool.rows()) - 1);
    return pool.row(idx(rng)).transpose();
  }

  /// Additive noise on the observed dims followed by motion-dependent
  /// amplification of the perturbed signal.
  Vector12 inject(const Vector12& y_clean, const Eigen::Matrix<double, 6, 1>& xi) const {
    Vector12 y = y_clean;
    for (int j = 0; j < kObsDim; ++j) {
      const double perturbed = y(kObsStart + j) + xi(j);
      y(kObsStart + j) = perturbed * (1.0 + s_motion * perturbed);
    }
    return y;
  }

 private:
  static void fill_block(std::mt19937_64& rng, Eigen::MatrixXd& pool, int col0,
                         const NoiseMixture& mix, int pool_size) {
    const std::vector<int> counts = allocate_pool_counts(mix, pool_size);
    std::uniform_int_distribution<int> sign_bit(0, 1);
    int row = 0;
    for (size_t k = 0; k < mix.peaks.size(); ++k) {
      const NoisePeak& pk = mix.peaks[k];
      for (int c = 0; c < counts[k]; ++c, ++row) {
        for (int j = 0; j < 3; ++j) {
          const double sign = sign_bit(rng) == 0 ? -1.0 : 1.0;
          std::normal_distribution<double> comp(sign * pk.mean, pk.stddev);
          pool(row, col0 + j) = comp(rng);
        }
      }
    }
  }
};

}  // namespace piattnp::sim
