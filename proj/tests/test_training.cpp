#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "flowvae/training.hpp"
#include "test_util.hpp"

namespace fv = flowvae;
namespace fs = std::filesystem;
using fv::Shape;
using fv::Tensor;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("flowvae_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fv::ModelConfig tiny_model() {
  fv::ModelConfig m;
  m.hidden = 8;
  m.encoder_width = 4;
  m.latent_dim = 4;
  m.prior_steps = 2;
  return m;
}

fv::TrainConfig tiny_train() {
  fv::TrainConfig t;
  t.batch_size = 8;
  t.dataset_size = 40;
  t.eval_size = 16;
  t.max_updates = 6;
  t.checkpoint_every = 3;
  t.warmup = 2;
  return t;
}

}  // namespace

// ----------------------------------------------------------------- schedule

TEST(Schedule, WarmupThenDecay) {
  fv::TrainConfig t;
  EXPECT_DOUBLE_EQ(fv::lr_at(0, t), 1e-3 / 50);
  EXPECT_DOUBLE_EQ(fv::lr_at(t.warmup - 1, t), t.lr);
  EXPECT_LE(fv::lr_at(t.warmup, t), fv::lr_at(t.warmup - 1, t));
  EXPECT_NEAR(fv::lr_at(t.warmup + 1000000, t), 1e-3 * std::pow(0.999997, 1e6), 1e-15);
  EXPECT_NEAR(fv::lr_at(t.warmup + 1000000, t), 4.98e-5, 1e-7);
  EXPECT_THROW(fv::lr_at(-1, t), fv::ConfigError);
}

// --------------------------------------------------------------------- adam

TEST(Adam, ZeroGradientOnlyDecays) {
  fv::ParamRegistry<double> reg;
  fv::Rng rng(1);
  auto* p = reg.add("w", rng.normal_tensor<double>({5}));
  const Tensor<double> before = p->value;
  fv::AdamState<double> st;
  st.reset(reg.trainable());
  fv::TrainConfig t;
  t.weight_decay = 0.1;
  ASSERT_TRUE(fv::adam_update(reg.trainable(), st, 0.01, 1, t));
  for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p->value[i], before[i] * (1 - 0.01 * 0.1));
  t.weight_decay = 0;
  const Tensor<double> fixed = p->value;
  ASSERT_TRUE(fv::adam_update(reg.trainable(), st, 0.01, 2, t));
  EXPECT_EQ(p->value, fixed);
}

TEST(Adam, ConstantGradientStepsByLearningRate) {
  fv::ParamRegistry<double> reg;
  auto* p = reg.add("w", Tensor<double>(Shape{2}));
  fv::AdamState<double> st;
  st.reset(reg.trainable());
  fv::TrainConfig t;
  t.weight_decay = 0;
  const double lr = 1e-2;
  for (int step = 1; step <= 200; ++step) {
    const Tensor<double> before = p->value;
    p->grad[0] = 3.0;
    p->grad[1] = -0.5;
    fv::adam_update(reg.trainable(), st, lr, step, t);
    // Bias-corrected m̂/√v̂ = g/|g| for a constant g.
    EXPECT_NEAR(before[0] - p->value[0], lr * 3.0 / (3.0 + 1e-8), 1e-12);
    EXPECT_NEAR(before[1] - p->value[1], -lr * 0.5 / (0.5 + 1e-8), 1e-12);
  }
}

TEST(Adam, NonFiniteGradientSkips) {
  fv::ParamRegistry<double> reg;
  auto* p = reg.add("w", Tensor<double>(Shape{2}, 1.0));
  fv::AdamState<double> st;
  st.reset(reg.trainable());
  p->grad[1] = NAN;
  EXPECT_FALSE(fv::adam_update(reg.trainable(), st, 0.1, 1, fv::TrainConfig{}));
  EXPECT_EQ(st.skipped, 1);
  EXPECT_EQ(p->value[0], 1.0);
  EXPECT_EQ(st.m[0][0], 0.0);
}

// ------------------------------------------------------------------ dataset

TEST(Synthetic, DeterministicAndLabelled) {
  auto a = fv::make_synthetic_globals(64, 8, 3, 4, 5);
  auto b = fv::make_synthetic_globals(64, 8, 3, 4, 5);
  auto c = fv::make_synthetic_globals(64, 8, 3, 4, 6);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
  EXPECT_EQ(a.size(), 64);
  EXPECT_EQ(a.num_classes(), 4);
  EXPECT_THROW(fv::make_synthetic_globals(4, 8, 3, 1, 5), fv::ConfigError);
  auto five = fv::make_synthetic_globals(16, 8, 3, 4, 5, 5);
  EXPECT_EQ(five.bits, 5);
  for (auto v : five.pixels) EXPECT_LT(v, 32);
}

TEST(Synthetic, NearestTemplateBeatsChance) {
  const int n = 800, k = 4;
  auto d = fv::make_synthetic_globals(n, 8, 3, k, 9);
  auto templates = fv::synthetic_templates(8, 3, k);
  int hit = 0;
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < k; ++c) {
      double dist = 0;
      for (std::size_t j = 0; j < d.image_size(); ++j) dist += std::pow(d.image(i)[j] - templates[c][j], 2);
      if (dist < best_d) best_d = dist, best = c;
    }
    hit += best == d.labels[i];
  }
  // Binomial chance level 1/k plus a wide margin.
  EXPECT_GT(static_cast<double>(hit) / n, 1.0 / k + 3 * std::sqrt(0.25 * 0.75 / n));
}

TEST(Synthetic, TextureIsLabelIndependent) {
  // χ² test of independence between label and the sign of the horizontal
  // high-frequency residual x[j] − x[j+1] at a pixel pair inside one quadrant,
  // where every template is flat.
  const int n = 4000, k = 4;
  auto d = fv::make_synthetic_globals(n, 8, 3, k, 11);
  double counts[4][2] = {};
  for (int i = 0; i < n; ++i) {
    const auto px = d.image(i);
    const int a = (1 * 8 + 1) * 3, b = (1 * 8 + 2) * 3;
    counts[d.labels[i]][px[a] > px[b]] += 1;
  }
  double row[4] = {}, col[2] = {};
  for (int c = 0; c < k; ++c)
    for (int s = 0; s < 2; ++s) row[c] += counts[c][s], col[s] += counts[c][s];
  double chi2 = 0;
  for (int c = 0; c < k; ++c)
    for (int s = 0; s < 2; ++s) {
      const double e = row[c] * col[s] / n;
      chi2 += (counts[c][s] - e) * (counts[c][s] - e) / e;
    }
  EXPECT_LT(chi2, 11.34);  // χ²(3) at p = 0.01
}

TEST(Augment, DisabledIsIdentityAndFlipInvolutes) {
  fv::Rng rng(2);
  std::vector<std::uint8_t> px(4 * 6 * 3);
  for (auto& v : px) v = static_cast<std::uint8_t>(rng.below(256));
  EXPECT_EQ(fv::augment(px, 4, 6, 3, false, false, rng), px);
  int flipped = 0;
  for (int t = 0; t < 20; ++t) {
    auto once = fv::augment(px, 4, 6, 3, true, false, rng);
    if (once != px) {
      ++flipped;
      // A flipped image flips back deterministically: mirror by hand.
      std::vector<std::uint8_t> back(once.size());
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x)
          for (int c = 0; c < 3; ++c) back[(y * 6 + x) * 3 + c] = once[(y * 6 + 5 - x) * 3 + c];
      EXPECT_EQ(back, px);
    }
  }
  EXPECT_GT(flipped, 0);
  EXPECT_LT(flipped, 20);
}

TEST(Augment, CropDrawsFromReflectPadding) {
  fv::Rng rng(3);
  const int h = 8, w = 8, c = 1;
  std::vector<std::uint8_t> px(h * w);
  for (int i = 0; i < h * w; ++i) px[i] = static_cast<std::uint8_t>(i);  // unique values
  for (int t = 0; t < 30; ++t) {
    auto out = fv::augment(px, h, w, c, false, true, rng);
    ASSERT_EQ(out.size(), px.size());
    // Find the shift from the top-left pixel, then check every pixel.
    bool matched = false;
    for (int dy = -4; dy <= 4 && !matched; ++dy)
      for (int dx = -4; dx <= 4 && !matched; ++dx) {
        auto refl = [](int p, int n) { return p < 0 ? -p : (p >= n ? 2 * (n - 1) - p : p); };
        bool ok = true;
        for (int y = 0; y < h && ok; ++y)
          for (int x = 0; x < w && ok; ++x) ok = out[y * w + x] == px[refl(y + dy, h) * w + refl(x + dx, w)];
        matched = ok;
      }
    EXPECT_TRUE(matched);
  }
}

TEST(Packed, RoundTripWithAndWithoutLabels) {
  auto dir = temp_dir("packed");
  auto d = fv::make_synthetic_globals(10, 8, 3, 3, 4);
  fv::save_packed((dir / "a.bin").string(), d);
  auto back = fv::load_packed((dir / "a.bin").string());
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.height, 8);
  d.labels.clear();
  fv::save_packed((dir / "b.bin").string(), d);
  EXPECT_FALSE(fv::load_packed((dir / "b.bin").string()).labeled());
  std::ofstream((dir / "bad.bin").string()) << "nope";
  EXPECT_THROW(fv::load_packed((dir / "bad.bin").string()), fv::IoError);
  EXPECT_THROW(fv::load_packed((dir / "missing.bin").string()), fv::IoError);
}

TEST(Directory, LoadsSortedPpmsWithLabels) {
  auto dir = temp_dir("dir");
  auto d = fv::make_synthetic_globals(3, 8, 3, 2, 4);
  for (int i = 0; i < 3; ++i)
    fv::write_ppm((dir / (std::to_string(d.labels[i]) + "_img" + std::to_string(i) + ".ppm")).string(), d.image_at(i));
  auto back = fv::load_directory(dir.string());
  EXPECT_EQ(back.size(), 3);
  EXPECT_TRUE(back.labeled());
}

TEST(Baseline, MatchesDirectGaussianFit) {
  auto train = fv::make_synthetic_globals(300, 8, 3, 4, 1);
  auto eval = fv::make_synthetic_globals(100, 8, 3, 4, 2);
  // Monte-Carlo oracle: fit and score on explicitly dequantized samples.
  fv::Rng rng(5);
  const int reps = 20;
  const std::size_t dims = train.image_size();
  std::vector<double> s(dims), s2(dims);
  for (int r = 0; r < reps; ++r)
    for (int i = 0; i < train.size(); ++i)
      for (std::size_t j = 0; j < dims; ++j) {
        const double x = (train.image(i)[j] + rng.uniform()) / 256;
        s[j] += x;
        s2[j] += x * x;
      }
  const double m = reps * train.size();
  double nats = 0;
  for (int r = 0; r < reps; ++r)
    for (int i = 0; i < eval.size(); ++i)
      for (std::size_t j = 0; j < dims; ++j) {
        const double mu = s[j] / m, var = s2[j] / m - mu * mu;
        const double x = (eval.image(i)[j] + rng.uniform()) / 256;
        nats += 0.5 * std::log(2 * M_PI * var) + (x - mu) * (x - mu) / (2 * var);
      }
  nats /= reps * eval.size();
  EXPECT_NEAR(fv::gaussian_baseline_bpd(train, eval), fv::bits_per_dim(nats, static_cast<int>(dims), 8), 2e-3);
}

// --------------------------------------------------------------- checkpoint

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto dir = temp_dir("ckpt");
  fv::Model<float> a(tiny_model(), 1);
  fv::Rng rng(2);
  testutil::perturb(a.params(), rng, 0.05);
  a.set_initialized(true);
  fv::AdamState<float> adam;
  adam.reset(a.params().trainable());
  for (auto& t : adam.m)
    for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  fv::TrainProgress prog{17, rng.state(), 0};
  fv::save_checkpoint((dir / "a.ckpt").string(), a, &adam, prog);

  fv::Model<float> b(tiny_model(), 99);
  fv::AdamState<float> adam_b;
  auto prog_b = fv::load_checkpoint((dir / "a.ckpt").string(), b, &adam_b);
  EXPECT_EQ(prog_b.update, 17);
  EXPECT_EQ(prog_b.rng_state, prog.rng_state);
  EXPECT_TRUE(b.initialized());
  fv::save_checkpoint((dir / "b.ckpt").string(), b, &adam_b, prog_b);
  EXPECT_TRUE(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  EXPECT_EQ(fv::checkpoint_config((dir / "a.ckpt").string()).digest(), tiny_model().digest());
}

TEST(Checkpoint, RejectsDigestMismatchAndGarbage) {
  auto dir = temp_dir("ckpt_bad");
  fv::Model<float> a(tiny_model(), 1);
  fv::save_checkpoint((dir / "a.ckpt").string(), a, nullptr, {});
  fv::ModelConfig other = tiny_model();
  other.hidden = 16;
  fv::Model<float> b(other, 1);
  EXPECT_THROW(fv::load_checkpoint((dir / "a.ckpt").string(), b), fv::ConfigError);
  std::ofstream((dir / "junk.ckpt").string()) << "not a checkpoint";
  EXPECT_THROW(fv::load_checkpoint((dir / "junk.ckpt").string(), a), fv::IoError);
  std::string bytes = slurp(dir / "a.ckpt");
  std::ofstream((dir / "short.ckpt").string(), std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW(fv::load_checkpoint((dir / "short.ckpt").string(), a), fv::IoError);
}

// ------------------------------------------------------------------ trainer

TEST(Trainer, ZeroUpdatesGivesInitializedZeroKlModel) {
  auto dir = temp_dir("train0");
  fv::TrainConfig t = tiny_train();
  t.max_updates = 0;
  auto splits = fv::load_splits(t, tiny_model());
  fv::Model<double> m(tiny_model(), 1);
  fv::Trainer<double> tr(m, t, splits.train);
  tr.run(dir.string());
  fv::Model<double> loaded(tiny_model(), 5);
  fv::load_checkpoint((dir / "final.ckpt").string(), loaded);
  ASSERT_TRUE(loaded.initialized());
  fv::Rng rng(1);
  fv::Graph<double> g(false);
  auto x = fv::make_batch<double>(splits.eval, std::vector<int>{0, 1, 2}, rng);
  for (double v : loaded.elbo(g, g.constant(x), rng).kl.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(slurp(dir / "metrics.csv"), std::string(fv::kMetricsHeader) + "\n");
}

TEST(Trainer, WritesMetricsAndCheckpoints) {
  auto dir = temp_dir("train");
  fv::TrainConfig t = tiny_train();
  auto splits = fv::load_splits(t, tiny_model());
  fv::Model<float> m(tiny_model(), 1);
  fv::Trainer<float> tr(m, t, splits.train);
  tr.run(dir.string());
  EXPECT_TRUE(fs::exists(dir / "ckpt_0000003.bin"));
  EXPECT_TRUE(fs::exists(dir / "ckpt_0000006.bin"));
  EXPECT_TRUE(fs::exists(dir / "final.ckpt"));
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "update,loss,recon,kl,bpd,lr");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 6);
}

TEST(Trainer, BitReproducibleAndResumable) {
  fv::TrainConfig t = tiny_train();
  auto splits = fv::load_splits(t, tiny_model());
  auto full_dir = temp_dir("full"), again_dir = temp_dir("again"), resumed_dir = temp_dir("resumed");

  fv::Model<float> a(tiny_model(), 1);
  fv::Trainer<float> ta(a, t, splits.train);
  ta.run(full_dir.string());

  fv::Model<float> b(tiny_model(), 1);
  fv::Trainer<float> tb(b, t, splits.train);
  tb.run(again_dir.string());
  EXPECT_TRUE(slurp(full_dir / "final.ckpt") == slurp(again_dir / "final.ckpt"));
  EXPECT_TRUE(slurp(full_dir / "metrics.csv") == slurp(again_dir / "metrics.csv"));

  // Resume from the mid-run checkpoint into a fresh model and directory.
  fs::copy_file(full_dir / "ckpt_0000003.bin", resumed_dir / "start.bin");
  fv::Model<float> c(tiny_model(), 42);
  fv::Trainer<float> tc(c, t, splits.train);
  tc.resume((resumed_dir / "start.bin").string());
  EXPECT_EQ(tc.update(), 3);
  tc.run(resumed_dir.string());
  EXPECT_TRUE(slurp(full_dir / "final.ckpt") == slurp(resumed_dir / "final.ckpt"));
}

TEST(Trainer, RejectsMismatchedData) {
  fv::TrainConfig t = tiny_train();
  fv::Model<float> m(tiny_model(), 1);
  auto wrong = fv::make_synthetic_globals(40, 16, 3, 4, 1);
  EXPECT_THROW(fv::Trainer<float>(m, t, wrong), fv::ConfigError);
  fv::Dataset empty;
  EXPECT_THROW(fv::Trainer<float>(m, t, empty), fv::ConfigError);
}

TEST(Trainer, AbortsOnPersistentNonFiniteLoss) {
  fv::TrainConfig t = tiny_train();
  t.max_updates = 20;
  auto splits = fv::load_splits(t, tiny_model());
  fv::Model<float> m(tiny_model(), 1);
  fv::Trainer<float> tr(m, t, splits.train);
  tr.step();
  // Poison one conditioner weight: every later forward pass is NaN.
  m.params().find("decoder.l0.m0.k0.coupling0.conv1.bias")->value[0] = NAN;
  int steps = 0;
  try {
    for (; steps < 20; ++steps) tr.step();
  } catch (const std::exception&) {
  }
  EXPECT_EQ(steps, fv::kMaxNonfiniteStreak);
}

TEST(Evaluate, UntrainedModelOnUniformNoiseIsNearEight) {
  fv::ModelConfig mc = tiny_model();
  fv::Dataset noise{8, 8, 3, 8, {}, {}};
  fv::Rng rng(4);
  noise.pixels.resize(256 * noise.image_size());
  for (auto& v : noise.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  fv::Model<double> m(mc, 1);
  m.initialize(fv::make_batch<double>(noise, std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}, rng), rng);
  const double bpd = fv::evaluate_bpd(m, noise, 3);
  EXPECT_TRUE(std::isfinite(bpd));
  EXPECT_NEAR(bpd, 8.0, 0.5);
  EXPECT_EQ(bpd, fv::evaluate_bpd(m, noise, 3));
}
