#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli_app.hpp"

namespace fv = flowvae;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "flowvae_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

std::string path(const std::string& name) { return (root() / name).string(); }

void write_file(const std::string& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* kConfig = R"(# small model for CLI tests
latent_dim = 8
hidden = 8
subblocks = 2
encoder_width = 4
encoder_max_width = 8
prior_steps = 2
batch_size = 16
max_updates = 4
checkpoint_every = 2
dataset_size = 64
eval_size = 32
seed = 3
)";

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "flowvae");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = fv::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Tile (r, c) of a grid written with kGridGap borders.
fv::Image tile(const fv::Image& g, int r, int c, int h, int w) {
  fv::Image t{h, w, g.channels, g.bits, {}};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < g.channels; ++k) {
        const int gy = fv::kGridGap + r * (h + fv::kGridGap) + y, gx = fv::kGridGap + c * (w + fv::kGridGap) + x;
        t.pixels.push_back(g.pixels[(gy * g.width + gx) * g.channels + k]);
      }
  return t;
}

int max_level_diff(const fv::Image& a, const fv::Image& b) {
  int m = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    write_file(path("run.cfg"), kConfig);
    auto r = cli({"train", "--config", path("run.cfg"), "--out", path("run")});
    ASSERT_EQ(r.code, 0) << r.err;
    // Two dataset images saved as PPM inputs.
    auto d = fv::make_synthetic_globals(2, 8, 3, 4, 11);
    for (int i = 0; i < 2; ++i) {
      fv::Image img{8, 8, 3, 8, std::vector<std::uint8_t>(d.image(i).begin(), d.image(i).end())};
      fv::write_ppm(path("in" + std::to_string(i) + ".ppm"), img);
    }
  }
  static std::string ckpt() { return path("run/final.ckpt"); }
};

}  // namespace

TEST_F(Cli, TrainWritesArtifacts) {
  EXPECT_TRUE(fs::exists(ckpt()));
  EXPECT_TRUE(fs::exists(path("run/ckpt_0000002.bin")));
  std::ifstream m(path("run/metrics.csv"));
  std::string line;
  std::getline(m, line);
  EXPECT_EQ(line, fv::kMetricsHeader);
  int rows = 0;
  while (std::getline(m, line)) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST_F(Cli, ZeroTemperatureSamplesAreIdentical) {
  auto r = cli({"sample", "--ckpt", ckpt(), "--temperature", "0", "--n", "3", "--cols", "3", "--out", path("t0.ppm")});
  ASSERT_EQ(r.code, 0) << r.err;
  fv::Image g = fv::read_ppm(path("t0.ppm"));
  EXPECT_EQ(g.width, 3 * 8 + 4 * fv::kGridGap);
  EXPECT_EQ(g.height, 8 + 2 * fv::kGridGap);
  EXPECT_EQ(tile(g, 0, 0, 8, 8), tile(g, 0, 1, 8, 8));
  EXPECT_EQ(tile(g, 0, 0, 8, 8), tile(g, 0, 2, 8, 8));
}

TEST_F(Cli, SamplingIsReproducible) {
  ASSERT_EQ(cli({"sample", "--ckpt", ckpt(), "--seed", "5", "--out", path("s1.ppm")}).code, 0);
  ASSERT_EQ(cli({"sample", "--ckpt", ckpt(), "--seed", "5", "--out", path("s2.ppm")}).code, 0);
  EXPECT_TRUE(slurp(path("s1.ppm")) == slurp(path("s2.ppm")));
}

TEST_F(Cli, InterpolationCornersReconstructInputs) {
  auto r = cli({"interpolate", "--ckpt", ckpt(), "--images", path("in0.ppm"), path("in1.ppm"), "--alphas", "0,1",
                "--betas", "0,1", "--out", path("interp.ppm")});
  ASSERT_EQ(r.code, 0) << r.err;
  fv::Image g = fv::read_ppm(path("interp.ppm"));
  EXPECT_EQ(g.width, 2 * 8 + 3 * fv::kGridGap);
  EXPECT_EQ(g.height, 2 * 8 + 3 * fv::kGridGap);
  // Reconstruction error is far below one intensity level.
  EXPECT_LE(max_level_diff(tile(g, 0, 0, 8, 8), fv::read_ppm(path("in0.ppm"))), 1);
  EXPECT_LE(max_level_diff(tile(g, 1, 1, 8, 8), fv::read_ppm(path("in1.ppm"))), 1);
}

TEST_F(Cli, SwitchGridLayout) {
  auto r = cli({"switch", "--ckpt", ckpt(), "--images", path("in0.ppm"), path("in1.ppm"), "--out", path("sw.ppm")});
  ASSERT_EQ(r.code, 0) << r.err;
  fv::Image g = fv::read_ppm(path("sw.ppm"));
  EXPECT_EQ(tile(g, 0, 0, 8, 8), fv::read_ppm(path("in0.ppm")));
  EXPECT_EQ(tile(g, 0, 1, 8, 8), fv::read_ppm(path("in1.ppm")));
}

TEST_F(Cli, EvalReportsBitsPerDim) {
  auto r = cli({"eval", "--ckpt", ckpt(), "--config", path("run.cfg"), "--out", path("eval.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = slurp(path("eval.csv"));
  ASSERT_EQ(text.rfind("bpd,", 0), 0u);
  const double bpd = std::stod(text.substr(4));
  EXPECT_TRUE(std::isfinite(bpd));
  EXPECT_GT(bpd, 0.0);
  EXPECT_NE(text.find("images,32"), std::string::npos);
}

TEST_F(Cli, EvalOnPackedNoise) {
  fv::Rng rng(8);
  fv::Dataset d{8, 8, 3, 8, std::vector<std::uint8_t>(16 * 192), {}};
  for (auto& v : d.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  fv::save_packed(path("noise.fvds"), d);
  auto r = cli({"eval", "--ckpt", ckpt(), "--data", path("noise.fvds"), "--out", path("noise.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(path("noise.csv")).find("images,16"), std::string::npos);
}

TEST_F(Cli, ReconstructAndProbe) {
  auto r = cli({"reconstruct", "--ckpt", ckpt(), "--config", path("run.cfg"), "--n", "3", "--out", path("rec.ppm")});
  ASSERT_EQ(r.code, 0) << r.err;
  fv::Image g = fv::read_ppm(path("rec.ppm"));
  EXPECT_EQ(g.height, 3 * 8 + 4 * fv::kGridGap);
  for (int i = 0; i < 3; ++i) EXPECT_LE(max_level_diff(tile(g, i, 0, 8, 8), tile(g, i, 1, 8, 8)), 1);
  r = cli({"probe", "--ckpt", ckpt(), "--config", path("run.cfg"), "--rep", "raw", "--epochs", "20", "--out",
           path("probe")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("linear probe on raw"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("probe.csv")));
  EXPECT_TRUE(fs::exists(path("probe.txt")));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli({}).code, fv::cli::kConfig);
  EXPECT_EQ(cli({"bogus"}).code, fv::cli::kConfig);
  EXPECT_EQ(cli({"sample"}).code, fv::cli::kConfig);
  EXPECT_EQ(cli({"sample", "--ckpt", path("missing.ckpt")}).code, fv::cli::kIo);
  EXPECT_EQ(cli({"probe", "--ckpt", ckpt(), "--rep", "pixels"}).code, fv::cli::kConfig);
  EXPECT_EQ(cli({"sample", "--ckpt", ckpt(), "--temperature", "-1"}).code, fv::cli::kConfig);
  EXPECT_EQ(cli({"interpolate", "--ckpt", ckpt(), "--images", path("in0.ppm"), path("in1.ppm"), "--alphas", "2"}).code,
            fv::cli::kConfig);
  write_file(path("other.cfg"), std::string(kConfig) + "hidden = 16\n");
  auto r = cli({"eval", "--ckpt", ckpt(), "--config", path("other.cfg")});
  EXPECT_EQ(r.code, fv::cli::kConfig);
  EXPECT_NE(r.err.find("digest mismatch"), std::string::npos);
  EXPECT_EQ(cli({"--help"}).code, fv::cli::kOk);
}

TEST(CliEval, UntrainedModelOnUniformNoise) {
  // Zero-init couplings, identity actnorm and orthogonal 1x1 convs make the
  // decoder volume preserving, so −log p(x) per dim is ½ln2π + E(x−½)²/2
  // with E(x−½)² = 1/12 and the KL term is zero.
  fv::ModelConfig cfg;
  cfg.hidden = 8;
  cfg.encoder_width = 4;
  fv::Model<float> model(cfg, 2);
  model.set_initialized(true);
  fv::save_checkpoint(path("untrained.ckpt"), model, nullptr, fv::TrainProgress{});
  fv::Rng rng(9);
  fv::Dataset d{8, 8, 3, 8, std::vector<std::uint8_t>(512 * 192), {}};
  for (auto& v : d.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  fv::save_packed(path("noise512.fvds"), d);
  auto r = cli({"eval", "--ckpt", path("untrained.ckpt"), "--data", path("noise512.fvds"), "--out", path("u.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const double bpd = std::stod(slurp(path("u.csv")).substr(4));
  const double expected = 8 + (0.5 * std::log(2 * std::numbers::pi) + 1.0 / 24) / std::numbers::ln2;
  EXPECT_NEAR(bpd, expected, 0.01);
}
