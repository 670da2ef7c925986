#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "piattnp/eval/metrics.hpp"
#include "piattnp/model/pi_attnp.hpp"

namespace piattnp::model {

struct PriorTable {
  Matrix y_prior;  // N x 12, one row per dataset record
  int gimbal_fallbacks = 0;
};

/// One physics-prior step per record, from the noisy context state under
/// the commanded rotor speeds. With use_prior = false the table is zero
/// and the model degrades to the plain AttNP.
inline PriorTable compute_priors(const data::MetaDataset& meta, const sim::QuadrotorParams& qp,
                                 bool use_prior) {
  PriorTable out;
  out.y_prior = Matrix::Zero(meta.size(), kYDim);
  if (!use_prior) return out;
  for (int i = 0; i < meta.size(); ++i) {
    const data::TaskSet& r = meta.records[static_cast<size_t>(i)];
    sim::ControlInput u;
    u.rotor_speeds = r.rotor_cmd;
    const sim::PriorResult pr = sim::physics_prior_g(r.y_C_noisy, r.euler_noisy, u, r.dt, qp);
    out.y_prior.row(i) = pr.y_next.transpose();
    if (pr.gimbal_fallback) ++out.gimbal_fallbacks;
  }
  return out;
}

struct TrainConfig {
  int batch_size = 1000;
  int max_epochs = 50;
  double eps_done = -1e18;  // test-loss early-stop threshold; default never fires
  nn::AdamConfig adam;
  uint64_t seed = 0;

  static TrainConfig from_config(const Config& cfg) {
    TrainConfig t;
    t.batch_size = cfg.get_int("batch_size", t.batch_size);
    t.max_epochs = cfg.get_int("max_epochs", t.max_epochs);
    t.eps_done = cfg.get_double("eps_done", t.eps_done);
    t.adam.lr = cfg.get_double("lr", t.adam.lr);
    t.adam.weight_decay = cfg.get_double("weight_decay", t.adam.weight_decay);
    t.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
    if (t.batch_size < 1 || t.max_epochs < 1) throw ConfigError("batch_size and max_epochs must be >= 1");
    if (t.adam.lr <= 0) throw ConfigError("lr must be positive");
    if (t.adam.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    return t;
  }
};

struct EpochStats {
  int epoch = 0;
  double train_elbo = 0.0;
  double test_elbo = 0.0;
  double test_rmse = 0.0;
  double test_nll = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curves;
  int best_epoch = 0;
  double best_test_elbo = std::numeric_limits<double>::infinity();
};

namespace detail {

inline Matrix gather_rows(const Matrix& table, const std::vector<int>& idx) {
  Matrix out(static_cast<long>(idx.size()), table.cols());
  for (size_t i = 0; i < idx.size(); ++i)
    out.row(static_cast<long>(i)) = table.row(idx[i]);
  return out;
}

inline Matrix draw_normal(std::mt19937_64& rng, long rows, long cols) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = n01(rng);
  return m;
}

struct TestPass {
  double elbo = 0.0;
  double rmse = 0.0;
  double nll = 0.0;
};

/// Test objective per the offline procedure: same loss expression with z
/// drawn from the context latent. Also yields RMSE/NLL of the decoder
/// outputs from the same forward passes.
inline TestPass evaluate_test(PiAttNP& model, const data::MetaDataset& meta,
                              const std::vector<int>& test_idx, const Matrix& priors,
                              int batch_size, std::mt19937_64& rng) {
  const int n = static_cast<int>(test_idx.size());
  Matrix mu_all(n, kYDim), s2_all(n, kYDim), y_all(n, kYDim);
  double elbo_weighted = 0.0;
  for (int at = 0; at < n; at += batch_size) {
    const int b = std::min(batch_size, n - at);
    std::vector<int> idx(test_idx.begin() + at, test_idx.begin() + at + b);
    data::Batch batch = data::make_batch(meta, idx);
    const Matrix prior_rows = gather_rows(priors, idx);
    const Matrix eps = draw_normal(rng, b, model.hyper.latent);
    Tape t;
    ElboVars ev = model.elbo(t, batch, prior_rows, eps, false);
    elbo_weighted += ev.loss.value()(0, 0) * b;
    mu_all.middleRows(at, b) = ev.mu.value();
    s2_all.middleRows(at, b) = ev.sigma2.value();
    y_all.middleRows(at, b) = batch.y_T;
  }
  TestPass out;
  out.elbo = elbo_weighted / n;
  out.rmse = eval::rmse(y_all, mu_all);
  out.nll = eval::nll(y_all, mu_all, s2_all);
  return out;
}

}  // namespace detail

/// Mini-batch training with posterior-sampled z, per-epoch test evaluation
/// with prior-sampled z, best-by-test-loss checkpointing, and rollback to
/// the best snapshot on completion or on a non-finite objective.
inline TrainResult train_model(PiAttNP& model, const data::MetaDataset& meta,
                               const data::SplitIndices& split, const Matrix& priors,
                               const TrainConfig& tc) {
  std::vector<int> proper = data::proper_train_indices(split);
  if (proper.empty()) throw ConfigError("training set is empty after removing calibration rows");

  std::vector<nn::Param*> params = model.params();
  nn::Adam opt(params, tc.adam);
  std::mt19937_64 rng_train = make_rng(derive_seed(tc.seed, 0x7BA1));

  auto snapshot = [&params]() {
    std::vector<Matrix> vals;
    vals.reserve(params.size());
    for (const nn::Param* p : params) vals.push_back(p->value);
    return vals;
  };
  auto restore = [&params](const std::vector<Matrix>& vals) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = vals[i];
  };

  TrainResult res;
  std::vector<Matrix> best = snapshot();

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    std::shuffle(proper.begin(), proper.end(), rng_train);
    double train_weighted = 0.0;
    const int n = static_cast<int>(proper.size());
    for (int at = 0; at < n; at += tc.batch_size) {
      const int b = std::min(tc.batch_size, n - at);
      std::vector<int> idx(proper.begin() + at, proper.begin() + at + b);
      data::Batch batch = data::make_batch(meta, idx);
      const Matrix prior_rows = detail::gather_rows(priors, idx);
      const Matrix eps = detail::draw_normal(rng_train, b, model.hyper.latent);

      Tape t;
      try {
        ElboVars ev = model.elbo(t, batch, prior_rows, eps, true);
        train_weighted += ev.loss.value()(0, 0) * b;
        opt.zero_grad();
        t.backward(ev.loss);
        opt.step();
      } catch (const NonFiniteLoss&) {
        restore(best);
        throw NonFiniteLoss("non-finite objective at epoch " + std::to_string(epoch) +
                            ", batch offset " + std::to_string(at) + "; best checkpoint restored");
      }
    }

    std::mt19937_64 rng_eval = make_rng(derive_seed(tc.seed, 0xE000 + static_cast<uint64_t>(epoch)));
    detail::TestPass tp =
        detail::evaluate_test(model, meta, split.test, priors, tc.batch_size, rng_eval);

    EpochStats row;
    row.epoch = epoch;
    row.train_elbo = train_weighted / n;
    row.test_elbo = tp.elbo;
    row.test_rmse = tp.rmse;
    row.test_nll = tp.nll;
    res.curves.push_back(row);

    if (tp.elbo < res.best_test_elbo) {
      res.best_test_elbo = tp.elbo;
      res.best_epoch = epoch;
      best = snapshot();
    }
    if (tp.elbo < tc.eps_done) break;
  }

  restore(best);
  return res;
}

/// Chunked deployment-mode predictions for a list of record indices.
inline Prediction predict_records(PiAttNP& model, const data::MetaDataset& meta,
                                  const std::vector<int>& indices, const Matrix& priors,
                                  int chunk, std::mt19937_64& rng) {
  const int n = static_cast<int>(indices.size());
  Prediction out;
  out.mu.resize(n, kYDim);
  out.sigma2.resize(n, kYDim);
  for (int at = 0; at < n; at += chunk) {
    const int b = std::min(chunk, n - at);
    std::vector<int> idx(indices.begin() + at, indices.begin() + at + b);
    data::Batch batch = data::make_batch(meta, idx);
    const Matrix prior_rows = detail::gather_rows(priors, idx);
    Prediction p = model.predict(batch.x_C, batch.y_C_noisy, batch.x_T, prior_rows, rng);
    out.mu.middleRows(at, b) = p.mu;
    out.sigma2.middleRows(at, b) = p.sigma2;
  }
  return out;
}

}  // namespace piattnp::model
