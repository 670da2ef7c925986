#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "piattnp/config.hpp"
#include "piattnp/data/dataset.hpp"
#include "piattnp/errors.hpp"
#include "piattnp/nn/adam.hpp"
#include "piattnp/nn/checkpoint.hpp"
#include "piattnp/nn/layers.hpp"
#include "piattnp/nn/tensor.hpp"
#include "piattnp/rng.hpp"

namespace piattnp::model {

using nn::Matrix;
using nn::Tape;
using nn::Var;
namespace ops = nn::ops;

struct EmptyContext : NumericalError {
  EmptyContext() : NumericalError("context set must contain at least one pair") {}
};

struct NonFiniteLoss : NumericalError {
  explicit NonFiniteLoss(const std::string& what) : NumericalError(what) {}
};

struct NonFinitePrediction : NumericalError {
  NonFinitePrediction() : NumericalError("model emitted a non-finite prediction") {}
};

struct ModelHyper {
  int hidden = 128;
  int latent = 64;
  int heads = 8;
  double sigma_floor = 1e-6;
  bool use_prior = true;

  static ModelHyper from_config(const Config& cfg) {
    ModelHyper h;
    h.hidden = cfg.get_int("hidden_width", h.hidden);
    h.latent = cfg.get_int("latent_dim", h.latent);
    h.heads = cfg.get_int("n_heads", h.heads);
    h.sigma_floor = cfg.get_double("sigma_floor", h.sigma_floor);
    h.use_prior = cfg.get_bool("use_prior", h.use_prior);
    if (h.hidden < 1 || h.latent < 1 || h.heads < 1) throw ConfigError("model widths must be >= 1");
    if (h.hidden % h.heads != 0) throw ConfigError("hidden_width must divide by n_heads");
    if (h.sigma_floor <= 0) throw ConfigError("sigma_floor must be positive");
    return h;
  }
};

constexpr int kXDim = 5;
constexpr int kYDim = 12;

struct LatentGaussian {
  Var mu;
  Var sigma2;
};

struct ElboVars {
  Var loss;
  Var recon_nll;
  Var kl;
  Var mu;
  Var sigma2;
};

struct Prediction {
  Matrix mu;      // B x 12
  Matrix sigma2;  // B x 12
};

/// Attentive neural process with a physics-prior-conditioned decoder.
/// Context pairs (x_C, y_C) feed a shared embedding; the latent path
/// averages embeddings into a Gaussian over z, the deterministic path
/// self-attends over context then cross-attends against target inputs,
/// and the decoder turns (x_T, R, z, y_prior) into a Gaussian over y_T,
/// parameterized as prior plus residual.
class PiAttNP {
 public:
  ModelHyper hyper;
  nn::MLP embed_pair;   // (x, y) pair -> hidden
  nn::MLP embed_x;      // bare input -> hidden, for cross-attention queries/keys
  nn::MLP phi;          // hidden -> 2 * latent (latent Gaussian head)
  nn::MultiHeadAttention self_attn;
  nn::MultiHeadAttention cross_attn;
  nn::MLP decoder;      // (x_T, R, z, y_prior) -> 2 * 12

  PiAttNP() = default;

  PiAttNP(const ModelHyper& h, uint64_t seed) : hyper(h) {
    std::mt19937_64 rng = make_rng(derive_seed(seed, 0xA0));
    const int hd = h.hidden;
    embed_pair = nn::MLP("embed_pair", {kXDim + kYDim, hd, hd}, rng);
    embed_x = nn::MLP("embed_x", {kXDim, hd, hd}, rng);
    phi = nn::MLP("phi", {hd, hd, 2 * h.latent}, rng);
    self_attn = nn::MultiHeadAttention("self_attn", hd, h.heads, rng);
    cross_attn = nn::MultiHeadAttention("cross_attn", hd, h.heads, rng);
    // Zero-initialized final layer: the decoder starts as the identity on
    // the prior, so untrained predictions equal the physics prior.
    decoder = nn::MLP("decoder", {kXDim + hd + h.latent + kYDim, hd, hd, 2 * kYDim}, rng,
                      nn::Init::Zero);
  }

  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out;
    embed_pair.collect(out);
    embed_x.collect(out);
    phi.collect(out);
    self_attn.collect(out);
    cross_attn.collect(out);
    decoder.collect(out);
    return out;
  }

  long param_count() {
    long n = 0;
    for (const nn::Param* p : params()) n += p->size();
    return n;
  }

  /// Shared pair embedding; rows are context (or target) pairs.
  Var encode_context(Tape& t, const Matrix& x, const Matrix& y) {
    if (x.rows() == 0) throw EmptyContext();
    if (x.cols() != kXDim || y.cols() != kYDim || x.rows() != y.rows())
      throw ShapeMismatch("encode_context: expected N x 5 inputs and N x 12 outputs");
    Var pairs = ops_concat(t, x, y);
    return embed_pair.forward(t, pairs);
  }

  /// Latent Gaussian for a batch where every row is its own task with a
  /// single context pair (the average over a singleton set is the row).
  LatentGaussian latent_batched(Tape& t, const Var& pair_emb) {
    auto [mu, sigma2] = nn::gaussian_head(phi.forward(t, pair_emb), hyper.latent, hyper.sigma_floor);
    return {mu, sigma2};
  }

  /// Latent Gaussian for one task with N rows of context: order-invariant
  /// average first, then the phi encoder.
  LatentGaussian latent_task(Tape& t, const Var& pair_emb) {
    if (pair_emb.rows() == 0) throw EmptyContext();
    auto [mu, sigma2] =
        nn::gaussian_head(phi.forward(t, ops::mean_rows(pair_emb)), hyper.latent, hyper.sigma_floor);
    return {mu, sigma2};
  }

  /// Deterministic path for the batched single-pair layout. With one
  /// context pair both attention stages collapse to value projections.
  Var deterministic_batched(Tape& t, const Var& pair_emb) {
    Var attended = self_attn.forward_single_pair(t, pair_emb);
    return cross_attn.forward_single_pair(t, attended);
  }

  /// Deterministic path for one task with arbitrary context size: full
  /// self-attention over context pairs, then cross-attention with embedded
  /// target inputs as queries and embedded context inputs as keys.
  Var deterministic_task(Tape& t, const Matrix& x_C, const Matrix& y_C, const Matrix& x_T) {
    if (x_C.rows() == 0 || x_T.rows() == 0) throw EmptyContext();
    Var pair_emb = encode_context(t, x_C, y_C);
    Var attended = self_attn.forward(t, pair_emb, pair_emb, pair_emb);
    Var queries = embed_x.forward(t, t.constant(x_T));
    Var keys = embed_x.forward(t, t.constant(x_C));
    return cross_attn.forward(t, queries, keys, attended);
  }

  /// Decoder head. mu = y_prior + residual; sigma2 through softplus with a
  /// positive floor. Feeding a zero y_prior yields the plain AttNP.
  std::pair<Var, Var> decode(Tape& t, const Var& x_T, const Var& r_lambda, const Var& z,
                             const Var& y_prior) {
    Var features = ops::concat_cols({x_T, r_lambda, z, y_prior});
    auto [res, sigma2] = nn::gaussian_head(decoder.forward(t, features), kYDim, hyper.sigma_floor);
    return {ops::add(y_prior, res), sigma2};
  }

  /// Full training/evaluation graph over a batch of single-pair tasks.
  /// posterior_z = true samples z from q(z | target pairs) (training);
  /// false samples from q(z | context pairs) (test / deployment).
  ElboVars elbo(Tape& t, const data::Batch& b, const Matrix& y_prior, const Matrix& eps,
                bool posterior_z) {
    const long B = b.x_C.rows();
    if (y_prior.rows() != B || eps.rows() != B || eps.cols() != hyper.latent)
      throw ShapeMismatch("elbo: prior or eps batch shape mismatch");

    Var emb_C = encode_context(t, b.x_C, b.y_C_noisy);
    Var emb_T = encode_context(t, b.x_T, b.y_T);
    LatentGaussian lat_C = latent_batched(t, emb_C);
    LatentGaussian lat_T = latent_batched(t, emb_T);

    const LatentGaussian& lat_z = posterior_z ? lat_T : lat_C;
    Var z = ops::add(lat_z.mu, ops::mul(ops::sqrt(lat_z.sigma2), t.constant(eps)));

    Var r_lambda = deterministic_batched(t, emb_C);
    auto [mu, sigma2] = decode(t, t.constant(b.x_T), r_lambda, z, t.constant(y_prior));

    Var resid = ops::sub(t.constant(b.y_T), mu);
    Var nll_terms = ops::add(ops::log(ops::scalar_mul(sigma2, 2.0 * M_PI)),
                             ops::div(ops::mul(resid, resid), sigma2));
    Var recon = ops::scalar_mul(ops::sum_all(nll_terms), 0.5 / static_cast<double>(B));

    // KL(q_T || q_C) for diagonal Gaussians, closed form.
    Var dmu = ops::sub(lat_T.mu, lat_C.mu);
    Var kl_terms =
        ops::scalar_add(ops::add(ops::log(ops::div(lat_C.sigma2, lat_T.sigma2)),
                                 ops::div(ops::add(lat_T.sigma2, ops::mul(dmu, dmu)), lat_C.sigma2)),
                        -1.0);
    Var kl = ops::scalar_mul(ops::sum_all(kl_terms), 0.5 / static_cast<double>(B));

    ElboVars out{ops::add(recon, kl), recon, kl, mu, sigma2};
    if (!std::isfinite(out.loss.value()(0, 0)))
      throw NonFiniteLoss("non-finite training objective");
    return out;
  }

  /// Deployment forward pass: latent from the context (prior), one
  /// reparameterized z draw from `rng`, deterministic path, decode.
  Prediction predict(const Matrix& x_C, const Matrix& y_C_noisy, const Matrix& x_T,
                     const Matrix& y_prior, std::mt19937_64& rng) {
    const long B = x_C.rows();
    Matrix eps(B, hyper.latent);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (long r = 0; r < B; ++r)
      for (long c = 0; c < hyper.latent; ++c) eps(r, c) = n01(rng);

    Tape t;
    Var emb_C = encode_context(t, x_C, y_C_noisy);
    LatentGaussian lat = latent_batched(t, emb_C);
    Var z = ops::add(lat.mu, ops::mul(ops::sqrt(lat.sigma2), t.constant(eps)));
    Var r_lambda = deterministic_batched(t, emb_C);
    auto [mu, sigma2] = decode(t, t.constant(x_T), r_lambda, z, t.constant(y_prior));

    Prediction out{mu.value(), sigma2.value()};
    if (!nn::all_finite(out.mu) || !nn::all_finite(out.sigma2)) throw NonFinitePrediction();
    return out;
  }

  nn::CheckpointData to_checkpoint() {
    nn::CheckpointData data;
    data.meta["hidden"] = std::to_string(hyper.hidden);
    data.meta["latent"] = std::to_string(hyper.latent);
    data.meta["heads"] = std::to_string(hyper.heads);
    data.meta["sigma_floor"] = format_double(hyper.sigma_floor);
    data.meta["use_prior"] = hyper.use_prior ? "1" : "0";
    for (nn::Param* p : params()) data.params.emplace_back(p->name, p->value);
    return data;
  }

  static PiAttNP from_checkpoint(const nn::CheckpointData& data) {
    ModelHyper h;
    try {
      h.hidden = std::stoi(data.meta.at("hidden"));
      h.latent = std::stoi(data.meta.at("latent"));
      h.heads = std::stoi(data.meta.at("heads"));
      h.sigma_floor = std::stod(data.meta.at("sigma_floor"));
      h.use_prior = data.meta.at("use_prior") == "1";
    } catch (const std::exception&) {
      throw nn::CheckpointError("checkpoint metadata incomplete or malformed");
    }
    PiAttNP m(h, 0);
    nn::restore_params(data, m.params());
    return m;
  }

 private:
  Var ops_concat(Tape& t, const Matrix& x, const Matrix& y) {
    Matrix pairs(x.rows(), x.cols() + y.cols());
    pairs << x, y;
    return t.constant(std::move(pairs));
  }
};

}  // namespace piattnp::model
