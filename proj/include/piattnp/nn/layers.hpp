#pragma once

#include <random>
#include <utility>
#include <vector>

#include "piattnp/nn/tensor.hpp"

namespace piattnp::nn {

inline void kaiming_uniform_fill(Matrix& w, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(w.rows()));
  std::uniform_real_distribution<double> d(-bound, bound);
  for (long r = 0; r < w.rows(); ++r)
    for (long c = 0; c < w.cols(); ++c) w(r, c) = d(rng);
}

inline void xavier_uniform_fill(Matrix& w, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  std::uniform_real_distribution<double> d(-bound, bound);
  for (long r = 0; r < w.rows(); ++r)
    for (long c = 0; c < w.cols(); ++c) w(r, c) = d(rng);
}

enum class Activation { Identity, Relu };
enum class Init { Kaiming, Xavier, Zero };

/// Affine map with optional ReLU; weights stored input-major (in x out) so
/// the forward pass is x * W + b over batch rows.
struct DenseLayer {
  Param W;
  Param b;
  Activation act = Activation::Identity;

  DenseLayer() = default;
  DenseLayer(const std::string& name, int in, int out, Activation a, Init init,
             std::mt19937_64& rng)
      : W(name + ".W", Matrix::Zero(in, out)), b(name + ".b", Matrix::Zero(1, out)), act(a) {
    if (init == Init::Kaiming) kaiming_uniform_fill(W.value, rng);
    if (init == Init::Xavier) xavier_uniform_fill(W.value, rng);
  }

  Var forward(Tape& t, const Var& x) {
    if (x.cols() != W.value.rows()) throw ShapeMismatch("dense: input width mismatch");
    Var y = ops::add_row_broadcast(ops::matmul(x, t.leaf(W)), t.leaf(b));
    return act == Activation::Relu ? ops::relu(y) : y;
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

struct MLP {
  std::vector<DenseLayer> layers;

  MLP() = default;

  /// widths = {in, h1, ..., out}; hidden layers ReLU, final layer identity.
  MLP(const std::string& name, const std::vector<int>& widths, std::mt19937_64& rng,
      Init final_init = Init::Kaiming) {
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
      const bool last = i + 2 == widths.size();
      layers.emplace_back(name + ".l" + std::to_string(i), widths[i], widths[i + 1],
                          last ? Activation::Identity : Activation::Relu,
                          last ? final_init : Init::Kaiming, rng);
    }
  }

  Var forward(Tape& t, const Var& x) {
    Var h = x;
    for (DenseLayer& l : layers) h = l.forward(t, h);
    return h;
  }

  void collect(std::vector<Param*>& out) {
    for (DenseLayer& l : layers) l.collect(out);
  }
};

/// Scaled dot-product attention with n_heads parallel heads over a single
/// task: queries Nq x d_model, keys/values Nk x d_model.
struct MultiHeadAttention {
  int d_model = 0;
  int n_heads = 0;
  Param Wq, Wk, Wv, Wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int d, int heads, std::mt19937_64& rng)
      : d_model(d), n_heads(heads) {
    if (d % heads != 0) throw ShapeMismatch("attention: d_model must divide by n_heads");
    auto make = [&](const char* suffix) {
      Matrix w(d, d);
      xavier_uniform_fill(w, rng);
      return Param(name + "." + suffix, std::move(w));
    };
    Wq = make("Wq");
    Wk = make("Wk");
    Wv = make("Wv");
    Wo = make("Wo");
  }

  Var forward(Tape& t, const Var& queries, const Var& keys, const Var& values) {
    if (queries.cols() != d_model || keys.cols() != d_model || values.cols() != d_model)
      throw ShapeMismatch("attention: operand width must equal d_model");
    if (keys.rows() != values.rows()) throw ShapeMismatch("attention: keys/values row mismatch");

    const int dh = d_model / n_heads;
    Var q = ops::matmul(queries, t.leaf(Wq));
    Var k = ops::matmul(keys, t.leaf(Wk));
    Var v = ops::matmul(values, t.leaf(Wv));

    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      Var qh = ops::slice_cols(q, h * dh, dh);
      Var kh = ops::slice_cols(k, h * dh, dh);
      Var vh = ops::slice_cols(v, h * dh, dh);
      Var scores = ops::scalar_mul(ops::matmul(qh, ops::transpose(kh)),
                                   1.0 / std::sqrt(static_cast<double>(dh)));
      heads.push_back(ops::matmul(ops::softmax_rows(scores), vh));
    }
    return ops::matmul(ops::concat_cols(heads), t.leaf(Wo));
  }

  /// One context pair per task, batched over rows: with a single key the
  /// softmax weight is 1 for any query, so the output collapses to
  /// values * Wv * Wo exactly. Query/key projections get no gradient here.
  Var forward_single_pair(Tape& t, const Var& values) {
    if (values.cols() != d_model)
      throw ShapeMismatch("attention: operand width must equal d_model");
    return ops::matmul(ops::matmul(values, t.leaf(Wv)), t.leaf(Wo));
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&Wq);
    out.push_back(&Wk);
    out.push_back(&Wv);
    out.push_back(&Wo);
  }
};

/// Splits a 2k-wide feature block into a mean vector and a positive
/// variance via softplus plus a small floor.
inline std::pair<Var, Var> gaussian_head(const Var& features, long k, double sigma_floor) {
  if (features.cols() != 2 * k) throw ShapeMismatch("gaussian_head: feature width must be 2k");
  Var mu = ops::slice_cols(features, 0, k);
  Var sigma2 = ops::scalar_add(ops::softplus(ops::slice_cols(features, k, k)), sigma_floor);
  return {mu, sigma2};
}

}  // namespace piattnp::nn
