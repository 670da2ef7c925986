#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "piattnp/nn/adam.hpp"
#include "piattnp/nn/checkpoint.hpp"
#include "piattnp/nn/gradcheck.hpp"
#include "piattnp/nn/layers.hpp"

using namespace piattnp;
using namespace piattnp::nn;
using Catch::Approx;

namespace {

Matrix random_matrix(std::mt19937_64& rng, long r, long c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("dense layer computes x W + b with optional relu", "[layers]") {
  std::mt19937_64 rng(31);
  DenseLayer lin("lin", 2, 2, Activation::Relu, Init::Zero, rng);
  lin.W.value << 1.0, -1.0, 0.5, 2.0;
  lin.b.value << 0.5, -6.0;

  Matrix x(1, 2);
  x << 1.0, 2.0;
  Tape t;
  const Matrix y = lin.forward(t, t.constant(x)).value();
  CHECK(y(0, 0) == 2.5);   // 1*1 + 2*0.5 + 0.5
  CHECK(y(0, 1) == 0.0);   // relu(-1 + 4 - 6)

  Matrix wrong(1, 3);
  CHECK_THROWS_AS(lin.forward(t, t.constant(wrong)), ShapeMismatch);
}

TEST_CASE("two-layer perceptron matches a hand computation", "[layers]") {
  std::mt19937_64 rng(32);
  MLP mlp("mlp", {2, 2, 1}, rng);
  REQUIRE(mlp.layers.size() == 2);
  CHECK(mlp.layers[0].act == Activation::Relu);
  CHECK(mlp.layers[1].act == Activation::Identity);

  mlp.layers[0].W.value << 1.0, -1.0, 0.5, 2.0;
  mlp.layers[0].b.value << 0.5, -1.0;
  mlp.layers[1].W.value << 1.0, -2.0;
  mlp.layers[1].b.value << 0.25;

  Matrix x(1, 2);
  x << 1.0, 2.0;
  Tape t;
  const Matrix y = mlp.forward(t, t.constant(x)).value();
  // hidden = relu([2.5, 2.0]); out = 2.5 - 4.0 + 0.25
  REQUIRE(y.rows() == 1);
  REQUIRE(y.cols() == 1);
  CHECK(y(0, 0) == Approx(-1.25).margin(1e-15));

  std::vector<Param*> params;
  mlp.collect(params);
  CHECK(params.size() == 4);
}

TEST_CASE("initializers respect their bounds", "[layers]") {
  std::mt19937_64 rng(33);
  Matrix w = Matrix::Zero(100, 50);
  kaiming_uniform_fill(w, rng);
  CHECK(w.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 100.0));
  CHECK(w.cwiseAbs().maxCoeff() > 0.0);

  Matrix v = Matrix::Zero(100, 50);
  xavier_uniform_fill(v, rng);
  CHECK(v.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 150.0));

  MLP zero_out("z", {3, 4, 2}, rng, Init::Zero);
  CHECK(zero_out.layers[1].W.value.norm() == 0.0);
  CHECK(zero_out.layers[0].W.value.norm() > 0.0);
}

TEST_CASE("attention with a single key ignores the query", "[layers]") {
  std::mt19937_64 rng(34);
  MultiHeadAttention attn("attn", 8, 2, rng);
  const Matrix queries = random_matrix(rng, 3, 8);
  const Matrix value_row = random_matrix(rng, 1, 8);

  Tape t;
  const Matrix out =
      attn.forward(t, t.constant(queries), t.constant(value_row), t.constant(value_row)).value();
  const Matrix collapsed = attn.forward_single_pair(t, t.constant(value_row)).value();
  REQUIRE(out.rows() == 3);
  for (int i = 0; i < 3; ++i) CHECK((out.row(i) - collapsed.row(0)).norm() < 1e-12);
}

TEST_CASE("identical keys average the values", "[layers]") {
  std::mt19937_64 rng(35);
  MultiHeadAttention attn("attn", 8, 4, rng);
  const Matrix q = random_matrix(rng, 2, 8);
  const Matrix key = random_matrix(rng, 1, 8);
  Matrix keys(2, 8);
  keys << key, key;
  const Matrix values = random_matrix(rng, 2, 8);

  Tape t;
  const Matrix out = attn.forward(t, t.constant(q), t.constant(keys), t.constant(values)).value();
  const Matrix mean_value = 0.5 * (values.row(0) + values.row(1));
  const Matrix expected = attn.forward_single_pair(t, t.constant(mean_value)).value();
  for (int i = 0; i < 2; ++i) CHECK((out.row(i) - expected.row(0)).norm() < 1e-12);
}

TEST_CASE("attention is invariant to key-value pair order", "[layers]") {
  std::mt19937_64 rng(36);
  MultiHeadAttention attn("attn", 8, 2, rng);
  const Matrix q = random_matrix(rng, 2, 8);
  const Matrix keys = random_matrix(rng, 3, 8);
  const Matrix values = random_matrix(rng, 3, 8);
  Matrix keys_p(3, 8), values_p(3, 8);
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i) {
    keys_p.row(i) = keys.row(perm[i]);
    values_p.row(i) = values.row(perm[i]);
  }

  Tape t;
  const Matrix a = attn.forward(t, t.constant(q), t.constant(keys), t.constant(values)).value();
  const Matrix b =
      attn.forward(t, t.constant(q), t.constant(keys_p), t.constant(values_p)).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention projections pass a gradient check", "[layers]") {
  std::mt19937_64 rng(37);
  MultiHeadAttention attn("attn", 4, 2, rng);
  const Matrix q = random_matrix(rng, 2, 4);
  const Matrix k = random_matrix(rng, 3, 4);
  const Matrix v = random_matrix(rng, 3, 4);
  const Matrix w = random_matrix(rng, 2, 4);

  std::vector<Param*> params;
  attn.collect(params);
  auto loss = [&](bool with_grad) {
    Tape t;
    Var out = attn.forward(t, t.constant(q), t.constant(k), t.constant(v));
    Var l = ops::sum_all(ops::mul(out, t.constant(w)));
    if (with_grad) t.backward(l);
    return l.value()(0, 0);
  };
  CHECK(grad_check(params, loss).max_rel_err < 1e-6);
}

TEST_CASE("attention shape validation", "[layers]") {
  std::mt19937_64 rng(38);
  CHECK_THROWS_AS(MultiHeadAttention("bad", 6, 4, rng), ShapeMismatch);

  MultiHeadAttention attn("attn", 8, 2, rng);
  Tape t;
  Var ok = t.constant(random_matrix(rng, 2, 8));
  Var narrow = t.constant(random_matrix(rng, 2, 4));
  Var three = t.constant(random_matrix(rng, 3, 8));
  CHECK_THROWS_AS(attn.forward(t, narrow, ok, ok), ShapeMismatch);
  CHECK_THROWS_AS(attn.forward(t, ok, three, ok), ShapeMismatch);
  CHECK_THROWS_AS(attn.forward_single_pair(t, narrow), ShapeMismatch);
  CHECK_NOTHROW(attn.forward(t, ok, three, three));
}

TEST_CASE("gaussian head splits mean and floored variance", "[layers]") {
  Matrix f(2, 6);
  f << 1.0, -2.0, 3.0, 0.0, 10.0, -40.0,
       0.5, 0.25, -0.75, -1.0, 0.0, 2.0;
  Tape t;
  auto [mu, sigma2] = gaussian_head(t.constant(f), 3, 1e-6);
  CHECK((mu.value() - f.leftCols(3)).norm() == 0.0);
  CHECK(sigma2.value()(0, 0) == Approx(std::log(2.0) + 1e-6).margin(1e-15));
  CHECK(sigma2.value()(0, 1) == Approx(std::log1p(std::exp(10.0)) + 1e-6).margin(1e-12));
  CHECK(sigma2.value()(0, 2) >= 1e-6);  // softplus(-40) underflows onto the floor
  CHECK(sigma2.value().minCoeff() >= 1e-6);

  CHECK_THROWS_AS(gaussian_head(t.constant(Matrix::Zero(2, 5)), 3, 1e-6), ShapeMismatch);
}

TEST_CASE("adam first step matches the closed form", "[layers]") {
  SECTION("unit gradient") {
    Param theta("theta", Matrix::Constant(1, 1, 1.0));
    AdamConfig cfg;  // lr 1e-3, decay 1e-6
    Adam opt({&theta}, cfg);
    theta.grad = Matrix::Constant(1, 1, 1.0);
    opt.step();
    // bias-corrected moments are exactly 1 after one unit-gradient step
    const double expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 1e-6 * 1.0);
    CHECK(theta.value(0, 0) == Approx(expected).margin(1e-15));
    CHECK(opt.steps_taken() == 1);
  }
  SECTION("zero gradient leaves only decoupled decay") {
    Param theta("theta", Matrix::Constant(1, 1, 2.0));
    Adam opt({&theta}, AdamConfig{});
    theta.grad = Matrix::Zero(1, 1);
    opt.step();
    CHECK(theta.value(0, 0) == Approx(2.0 - 1e-3 * 1e-6 * 2.0).margin(1e-15));
  }
  SECTION("descends a quadratic") {
    Param theta("theta", Matrix::Constant(1, 1, 0.0));
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    Adam opt({&theta}, cfg);
    for (int i = 0; i < 500; ++i) {
      theta.grad = 2.0 * (theta.value.array() - 5.0).matrix();
      opt.step();
    }
    CHECK(std::abs(theta.value(0, 0) - 5.0) < 1e-3);
  }
}

TEST_CASE("checkpoints round-trip bit for bit", "[layers]") {
  std::mt19937_64 rng(39);
  CheckpointData data;
  data.meta["hidden"] = "16";
  data.meta["use_prior"] = "1";
  data.params.emplace_back("enc.W", random_matrix(rng, 7, 3));
  data.params.emplace_back("enc.b", random_matrix(rng, 1, 3));

  const auto path = (std::filesystem::temp_directory_path() / "piattnp_ckpt.bin").string();
  save_checkpoint(path, data);
  const CheckpointData back = load_checkpoint(path);
  CHECK(back.meta == data.meta);
  REQUIRE(back.params.size() == 2);
  CHECK(back.params[0].first == "enc.W");
  CHECK((back.params[0].second - data.params[0].second).norm() == 0.0);
  CHECK((back.params[1].second - data.params[1].second).norm() == 0.0);

  SECTION("restore matches by name regardless of order") {
    Param b("enc.b", Matrix::Zero(1, 3));
    Param w("enc.W", Matrix::Zero(7, 3));
    restore_params(back, {&b, &w});
    CHECK((w.value - data.params[0].second).norm() == 0.0);
    CHECK((b.value - data.params[1].second).norm() == 0.0);
  }
  SECTION("restore rejects unknown names and wrong shapes") {
    Param stranger("dec.W", Matrix::Zero(7, 3));
    CHECK_THROWS_AS(restore_params(back, {&stranger}), CheckpointError);
    Param wrong_shape("enc.W", Matrix::Zero(3, 7));
    CHECK_THROWS_AS(restore_params(back, {&wrong_shape}), CheckpointError);
  }
}

TEST_CASE("damaged checkpoints are rejected", "[layers]") {
  std::mt19937_64 rng(40);
  CheckpointData data;
  data.meta["k"] = "v";
  data.params.emplace_back("p", random_matrix(rng, 4, 4));
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "piattnp_ckpt_damaged.bin").string();
  save_checkpoint(path, data);

  SECTION("missing file") {
    CHECK_THROWS_AS(load_checkpoint((dir / "piattnp_no_such.bin").string()), MissingArtifact);
  }
  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XX", 2);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SECTION("unsupported version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const uint32_t v = 2;
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SECTION("truncated weights") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 24);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
}
