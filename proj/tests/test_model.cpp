#include <gtest/gtest.h>

#include <cmath>

#include "flowvae/gradcheck.hpp"
#include "flowvae/model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fv = flowvae;
namespace ops = flowvae::ops;
using fv::Graph;
using fv::Shape;
using fv::Tensor;

namespace {

fv::ModelConfig small_config(int hidden = 16) {
  fv::ModelConfig cfg;
  cfg.hidden = hidden;
  cfg.encoder_width = 8;
  cfg.latent_dim = 8;
  return cfg;
}

// Random but well-conditioned parameters around the initialization.
template <class T>
void perturb_model(fv::Model<T>& m, fv::Rng& rng, double sd) {
  testutil::perturb(m.params(), rng, sd);
  m.set_initialized(true);
}

}  // namespace

// ------------------------------------------------------------- quantization

TEST(Dequantize, Formula) {
  std::vector<std::uint8_t> y = {0, 255, 31, 7};
  Tensor<double> u(Shape{4});
  u[1] = std::nextafter(1.0, 0.0);
  u[2] = 0.25;
  u[3] = 0.5;
  Tensor<double> x = fv::dequantize<double>(y, Shape{4}, 8, u);
  EXPECT_EQ(x[0], 0.0);
  EXPECT_LT(x[1], 1.0);
  EXPECT_NEAR(x[1], 1.0, 1e-15);
  std::vector<std::uint8_t> y5 = {0, 31, 7};
  Tensor<double> u5(Shape{3});
  u5[2] = 0.5;
  Tensor<double> x5 = fv::dequantize<double>(y5, Shape{3}, 5, u5);
  EXPECT_EQ(x5[1], 31.0 / 32);
  EXPECT_EQ(x5[2], 7.5 / 32);
  EXPECT_THROW(fv::dequantize<double>(y, Shape{4}, 5, u), fv::ConfigError);  // 255 ≥ 32
  Tensor<float> xf = fv::dequantize<float>(y, Shape{4}, 8, u.cast<float>());
  EXPECT_LT(xf[1], 1.0f);
}

TEST(Quantize, InvertsDequantizeAndClamps) {
  fv::Rng rng(1);
  std::vector<std::uint8_t> y(50);
  for (auto& v : y) v = static_cast<std::uint8_t>(rng.below(256));
  Tensor<float> x = fv::dequantize<float>(y, Shape{50}, 8, rng);
  EXPECT_EQ(fv::quantize(x, 8), y);
  Tensor<float> out(Shape{3});
  out[0] = -0.3f;
  out[1] = 1.7f;
  out[2] = NAN;
  EXPECT_EQ(fv::quantize(out, 5), (std::vector<std::uint8_t>{0, 31, 0}));
}

TEST(BitsPerDim, Convention) {
  EXPECT_EQ(fv::bits_per_dim(0.0, 192, 8), 8.0);
  EXPECT_EQ(fv::bits_per_dim(0.0, 192, 5), 5.0);
  EXPECT_NEAR(fv::bits_per_dim(192 * std::log(2.0), 192, 8), 9.0, 1e-12);
}

// ---------------------------------------------------------------- zero init

TEST(Model, ZeroInitContract) {
  fv::Model<double> m(small_config(), 3);
  fv::Rng rng(4);
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(6));
  EXPECT_FALSE(m.initialized());
  m.initialize(x, rng);
  EXPECT_TRUE(m.initialized());

  Graph<double> g(false);
  auto terms = m.elbo(g, g.constant(x), rng);
  for (double v : terms.kl.value().values()) EXPECT_EQ(v, 0.0);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(terms.loss.value()[i], terms.recon.value()[i] + terms.kl.value()[i]);

  // Couplings are identities, so z has no effect on υ.
  fv::Var<double> xv = g.constant(x);
  auto a = m.decoder().forward(g, ops::add_scalar(xv, -0.5), g.constant(rng.normal_tensor<double>({6, 8})));
  auto b = m.decoder().forward(g, ops::add_scalar(xv, -0.5), g.constant(rng.normal_tensor<double>({6, 8})));
  EXPECT_EQ(a.y.value(), b.y.value());
  EXPECT_EQ(a.logdet.value(), b.logdet.value());
  auto r1 = m.reconstruction_nll(g, xv, g.constant(rng.normal_tensor<double>({6, 8})));
  auto oracle = ops::scale(ops::add(ops::std_normal_log_prob(a.y), a.logdet), -1.0);
  EXPECT_EQ(r1.value(), oracle.value());
}

TEST(Model, ActnormDataInitNormalizesFirstLayer) {
  fv::Model<double> m(small_config(), 5);
  fv::Rng rng(6);
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(32));
  m.initialize(x, rng);
  // The first actnorm sees the squeezed, centred input; after init its output
  // has zero mean and unit variance per channel.
  Graph<double> g(false);
  auto sq = ops::squeeze2(ops::add_scalar(g.constant(x), -0.5));
  auto y = m.decoder().actnorms().front()->apply(g, sq, fv::Direction::Forward).y.value();
  const int c = y.dim(-1);
  const std::size_t npos = y.size() / c;
  for (int k = 0; k < c; ++k) {
    double s = 0, s2 = 0;
    for (std::size_t p = 0; p < npos; ++p) s += y[p * c + k], s2 += y[p * c + k] * y[p * c + k];
    EXPECT_NEAR(s / npos, 0.0, 1e-10);
    EXPECT_NEAR(s2 / npos, 1.0, 1e-6);
  }
}

// ----------------------------------------------------------------- inverses

TEST(Model, LosslessDecouplingF32) {
  fv::Model<float> m(small_config(), 7);
  fv::Rng rng(8);
  perturb_model(m, rng, 0.05);
  Tensor<float> x = rng.uniform_tensor<float>(m.image_shape(100));
  auto pair = m.decouple(x);
  EXPECT_EQ(pair.z.shape(), (Shape{100, 8}));
  EXPECT_EQ(pair.upsilon.shape(), (Shape{100, 192}));
  EXPECT_LT(fv::max_abs_diff(m.generate(pair), x), 1e-4);
  EXPECT_EQ(m.generate(pair), m.generate(pair));
  EXPECT_EQ(m.decouple(x).z, pair.z);
}

TEST(Model, SampledCodesAlsoInvert) {
  fv::Model<double> m(small_config(), 9);
  fv::Rng rng(10);
  perturb_model(m, rng, 0.05);
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(4));
  auto pair = m.decouple(x, &rng);
  EXPECT_NE(pair.z, m.decouple(x).z);
  EXPECT_LT(fv::max_abs_diff(m.generate(pair), x), 1e-10);
}

// ---------------------------------------------------------------- gradients

TEST(Model, ElboGradientMatchesFiniteDifferences) {
  fv::ModelConfig cfg = small_config(8);
  cfg.encoder_width = 4;
  fv::Model<double> m(cfg, 11);
  fv::Rng rng(12);
  perturb_model(m, rng, 0.05);
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(2));
  Tensor<double> noise = rng.normal_tensor<double>({2, 8});
  fv::ScalarFn<double> f = [&](Graph<double>& g) {
    return ops::mean_all(m.elbo(g, g.constant(x), g.constant(noise)).loss);
  };
  auto res = fv::finite_diff_check<double>(f, m.params().trainable(), 1e-6, 50, 13);
  EXPECT_EQ(res.coords_checked, 50);
  EXPECT_LT(res.max_rel_error, 1e-4);
}

// ----------------------------------------------------------------- sampling

TEST(Model, ZeroTemperatureSamplesIdentical) {
  fv::Model<float> m(small_config(), 14);
  fv::Rng rng(15);
  perturb_model(m, rng, 0.05);
  Tensor<float> s = m.sample(3, 0.0f, rng);
  EXPECT_EQ(s.rows(0, 1), s.rows(1, 1));
  EXPECT_EQ(s.rows(0, 1), s.rows(2, 1));
  EXPECT_THROW(m.sample(1, -0.5f, rng), fv::ConfigError);
}

TEST(Model, UnitTemperatureSamplesFiniteInRange) {
  fv::Model<float> m(small_config(), 16);
  fv::Rng rng(17);
  perturb_model(m, rng, 0.02);
  Tensor<float> s = m.sample(100, 1.0f, rng);
  for (float v : s.values()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GE(v, 0.0f);
    ASSERT_LT(v, 1.0f);
  }
}

// ------------------------------------------------------ interpolate, switch

TEST(Model, InterpolationCornersAreReconstructions) {
  fv::Model<double> m(small_config(), 18);
  fv::Rng rng(19);
  perturb_model(m, rng, 0.05);
  Tensor<double> x1 = rng.uniform_tensor<double>(m.image_shape(1));
  Tensor<double> x2 = rng.uniform_tensor<double>(m.image_shape(1));
  Tensor<double> grid = m.interpolate2d(x1, x2, {0, 0.5, 1}, {0, 0.25, 0.5, 0.75, 1});
  ASSERT_EQ(grid.dim(0), 15);
  EXPECT_LT(fv::max_abs_diff(grid.rows(0, 1), m.reconstruct(x1)), 1e-12);
  EXPECT_LT(fv::max_abs_diff(grid.rows(14, 1), m.reconstruct(x2)), 1e-12);
  EXPECT_LT(fv::max_abs_diff(grid.rows(0, 1), x1), 1e-10);
  EXPECT_TRUE(grid.all_finite());
  auto [a, b] = m.swap_codes(x1, x2);
  EXPECT_LT(fv::max_abs_diff(a, grid.rows(10, 1)), 1e-12);  // α=1, β=0
  EXPECT_LT(fv::max_abs_diff(b, grid.rows(4, 1)), 1e-12);   // α=0, β=1
  EXPECT_THROW(m.interpolate2d(x1, x2, {1.5}, {0}), fv::ConfigError);
}

TEST(Model, SelfSwitchIsReconstruction) {
  fv::Model<float> m(small_config(), 20);
  fv::Rng rng(21);
  perturb_model(m, rng, 0.05);
  Tensor<float> x = rng.uniform_tensor<float>(m.image_shape(3));
  auto [a, b] = m.swap_codes(x, x);
  Tensor<float> r = m.reconstruct(x);
  EXPECT_EQ(a, r);
  EXPECT_EQ(b, r);
}

TEST(Model, DoubleSwitchRecoversOriginals) {
  fv::Model<double> m(small_config(), 22);
  fv::Rng rng(23);
  perturb_model(m, rng, 0.02);
  Tensor<double> x1 = rng.uniform_tensor<double>(m.image_shape(2));
  Tensor<double> x2 = rng.uniform_tensor<double>(m.image_shape(2));
  // Switching back is exact up to re-encoding error |enc(g(z2, υ1)) − z2|.
  // A constant encoder has none, so the round trip is the identity.
  for (auto& v : m.encoder().out_weight().value.values()) v = 0.0;
  for (int j = 0; j < 8; ++j) m.encoder().out_bias().value[j] = rng.normal();
  auto [a, b] = m.swap_codes(x1, x2);
  auto [c, d] = m.swap_codes(a, b);
  EXPECT_LT(fv::max_abs_diff(c, x1), 1e-3);
  EXPECT_LT(fv::max_abs_diff(d, x2), 1e-3);
}

// ------------------------------------------------------------ base ablation

TEST(Model, BaseConditioningAblation) {
  fv::ModelConfig cfg = small_config(8);
  cfg.cond_mode = "base";
  cfg.encoder_width = 4;
  EXPECT_NE(fv::Model<double>(small_config(8), 24).params().find("decoder.l0.m0.k0.coupling0.cond_fc.weight"), nullptr);
  fv::Model<double> m(cfg, 24);
  EXPECT_EQ(m.params().find("decoder.l0.m0.k0.coupling0.cond_fc.weight"), nullptr);
  fv::Rng rng(25);
  perturb_model(m, rng, 0.05);
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(3));
  EXPECT_LT(fv::max_abs_diff(m.generate(m.decouple(x)), x), 1e-10);
  Tensor<double> noise = rng.normal_tensor<double>({3, 8});
  fv::ScalarFn<double> f = [&](Graph<double>& g) {
    return ops::mean_all(m.elbo(g, g.constant(x), g.constant(noise)).loss);
  };
  EXPECT_LT(fv::finite_diff_check<double>(f, m.params().trainable(), 1e-6, 50, 26).max_rel_error, 1e-4);
  Tensor<double> s = m.sample(2, 0.0, rng);
  EXPECT_EQ(s.rows(0, 1), s.rows(1, 1));
}

// ---------------------------------------------------------------- toy bound

TEST(Model, ToyElboBoundsQuadratureLikelihood) {
  fv::ModelConfig cfg;
  cfg.toy = true;
  cfg.height = cfg.width = 2;
  cfg.channels = 1;
  cfg.levels = 1;
  cfg.latent_dim = 2;
  cfg.hidden = 8;
  cfg.prior_steps = 2;
  cfg.precision = "f64";
  fv::Model<double> m(cfg, 27);
  fv::Rng rng(28);
  testutil::perturb(m.params(), rng, 0.3);
  m.set_initialized(true);

  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(1));
  // −log p(x) by midpoint quadrature over the prior's base variable.
  const int grid = 64;
  const double lim = 6.0, step = 2 * lim / grid;
  Tensor<double> eps(Shape{grid * grid, 2});
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      eps[2 * (i * grid + j)] = -lim + (i + 0.5) * step;
      eps[2 * (i * grid + j) + 1] = -lim + (j + 0.5) * step;
    }
  Tensor<double> z = m.prior().sample(eps, 1.0);
  Tensor<double> xs(m.image_shape(grid * grid));
  for (int r = 0; r < grid * grid; ++r) std::copy_n(x.data(), 4, xs.data() + 4 * r);
  Graph<double> g(false);
  auto nll = m.reconstruction_nll(g, g.constant(xs), g.constant(z)).value();
  double best = -1e300;
  std::vector<double> terms(grid * grid);
  for (int r = 0; r < grid * grid; ++r) {
    terms[r] = -nll[r] + oracle::std_normal_logpdf({eps[2 * r], eps[2 * r + 1]}) + 2 * std::log(step);
    best = std::max(best, terms[r]);
  }
  double acc = 0;
  for (double t : terms) acc += std::exp(t - best);
  const double neg_log_px = -(best + std::log(acc));

  const int n = 10000;
  Tensor<double> xb(m.image_shape(n));
  for (int r = 0; r < n; ++r) std::copy_n(x.data(), 4, xb.data() + 4 * r);
  auto loss = m.elbo(g, g.constant(xb), rng).loss.value();
  double mean = 0, sq = 0;
  for (double v : loss.values()) mean += v;
  mean /= n;
  for (double v : loss.values()) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / (n - 1) / n);
  EXPECT_GE(mean - neg_log_px, -3 * se);
}
