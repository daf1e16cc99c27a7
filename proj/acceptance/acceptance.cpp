// Acceptance suite: one PASS/FAIL line per criterion, reference lines for
// the numbers that are out of reach at desk scale. Exit status is nonzero
// when any gated criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli_app.hpp"
#include "flowvae/gradcheck.hpp"
#include "flowvae/probe.hpp"
#include "flowvae/training.hpp"
#include "oracles.hpp"

namespace fv = flowvae;
namespace ops = flowvae::ops;
namespace fs = std::filesystem;
using fv::Direction;
using fv::Graph;
using fv::Shape;
using fv::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <class T>
void perturb(fv::ParamRegistry<T>& reg, fv::Rng& rng, double sd) {
  for (auto* p : reg.trainable())
    for (auto& v : p->value.values()) v += static_cast<T>(rng.normal() * sd);
}

// Adds noise scaled to each weight tensor's fan-in (σ/√fan_in), or a fixed
// sd for vectors, so random deep stacks stay well conditioned.
template <class T>
void perturb_fan_in(fv::ParamRegistry<T>& reg, fv::Rng& rng, double sigma, double vector_sd) {
  for (auto* p : reg.trainable()) {
    const Shape& s = p->value.shape();
    const double sd = s.size() >= 2 ? sigma / std::sqrt(static_cast<double>(p->value.size() / s.back())) : vector_sd;
    for (auto& v : p->value.values()) v += static_cast<T>(rng.normal() * sd);
  }
}

template <class T>
void randomize(fv::ParamRegistry<T>& reg, fv::Rng& rng, double sd) {
  for (auto* p : reg.trainable())
    for (auto& v : p->value.values()) v = static_cast<T>(rng.normal() * sd);
}

template <class T>
void mark_initialized(fv::MultiScaleFlow<T>& flow) {
  for (auto* a : flow.actnorms()) a->set_initialized(true);
}

// ------------------------------------------------------------ criterion 1

struct FlowSize {
  int side, channels, levels;
};

template <class T>
double max_roundtrip_error(const FlowSize& s, int cases, std::uint64_t seed) {
  fv::ModelConfig defaults;
  double worst = 0;
  for (int i = 0; i < cases; ++i) {
    fv::Rng rng(seed + i);
    fv::ParamRegistry<T> reg;
    fv::CouplingOptions<T> opt;
    opt.hidden = defaults.hidden;
    opt.cond_dim = defaults.latent_dim;
    fv::MultiScaleFlow<T> flow(reg, "d", {s.levels, defaults.steps, defaults.subblocks}, s.side, s.side, s.channels,
                               opt, rng);
    perturb_fan_in(reg, rng, 0.3, 0.05);
    mark_initialized(flow);
    Graph<T> g(false);
    auto x = g.constant(rng.uniform_tensor<T>({1, s.side, s.side, s.channels}, T(-0.5), T(0.5)));
    auto z = g.constant(rng.normal_tensor<T>({1, defaults.latent_dim}));
    auto back = flow.inverse(g, flow.forward(g, x, z).y, z).y;
    worst = std::max(worst, static_cast<double>(fv::max_abs_diff(back.value(), x.value())));
  }
  return worst;
}

Outcome invertibility() {
  const auto t0 = Clock::now();
  const std::vector<FlowSize> sizes = {{8, 2, 1}, {8, 4, 2}, {16, 3, 2}};
  double e64 = 0, e32 = 0;
  std::ostringstream os;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    const double a = max_roundtrip_error<double>(sizes[k], 100, 1000 * (k + 1));
    const double b = max_roundtrip_error<float>(sizes[k], 100, 1000 * (k + 1));
    e64 = std::max(e64, a);
    e32 = std::max(e32, b);
    os << sizes[k].side << "x" << sizes[k].side << "x" << sizes[k].channels << " L=" << sizes[k].levels << ": f64 "
       << fmt(a) << " f32 " << fmt(b) << "; ";
  }
  const double sec = seconds_since(t0);
  os << "max f64 " << fmt(e64) << " (< 1e-6), f32 " << fmt(e32) << " (< 1e-4), " << fmt(sec) << " s (< 60)";
  return {e64 < 1e-6 && e32 < 1e-4 && sec < 60, os.str()};
}

// ------------------------------------------------------------ criterion 2

using MapFn = std::function<fv::FlowResult<double>(Graph<double>&, fv::Var<double>)>;

double logdet_rel_error(const MapFn& f, const Tensor<double>& x) {
  Graph<double> g(false);
  const double analytic = f(g, g.constant(x)).logdet.value()[0];
  auto values = [&](const Tensor<double>& in) {
    Graph<double> h(false);
    return f(h, h.constant(in)).y.value();
  };
  return oracle::rel_err(analytic, oracle::fd_jacobian_logdet(values, x));
}

Outcome logdet_oracle() {
  const auto t0 = Clock::now();
  fv::Rng rng(2);
  std::vector<std::pair<std::string, double>> errs;
  const Shape img{1, 2, 2, 4};  // 16 dims

  {
    fv::ParamRegistry<double> reg;
    fv::Actnorm<double> an(reg, "an", 4);
    randomize(reg, rng, 0.5);
    an.set_initialized(true);
    errs.emplace_back("actnorm", logdet_rel_error([&](auto& g, auto x) { return an.apply(g, x, Direction::Forward); },
                                                  rng.uniform_tensor<double>(img, -2, 2)));
  }
  {
    fv::ParamRegistry<double> reg;
    fv::InvConv<double> ic(reg, "ic", 4, fv::InvConv<double>::Init::RandomOrthogonal, rng);
    perturb(reg, rng, 0.3);
    errs.emplace_back("invconv", logdet_rel_error([&](auto& g, auto x) { return ic.apply(g, x, Direction::Forward); },
                                                  rng.uniform_tensor<double>(img, -2, 2)));
  }
  for (auto p : fv::kStepPatterns) {
    fv::ParamRegistry<double> reg;
    fv::CouplingOptions<double> opt;
    opt.channels = 4;
    opt.hidden = 8;
    opt.cond_dim = 2;
    fv::Coupling<double> c(reg, "c", opt, p, rng);
    randomize(reg, rng, 0.5);
    Tensor<double> z = rng.normal_tensor<double>({1, 2});
    errs.emplace_back(std::string("coupling/") + fv::to_string(p),
                      logdet_rel_error([&](auto& g, auto x) { return c.apply(g, x, g.constant(z), Direction::Forward); },
                                       rng.uniform_tensor<double>(img, -2, 2)));
  }
  {
    fv::ParamRegistry<double> reg;
    fv::VectorCoupling<double> vc(reg, "vc", 8, 16, 1.0, rng);
    randomize(reg, rng, 0.5);
    errs.emplace_back("prior coupling",
                      logdet_rel_error([&](auto& g, auto x) { return vc.apply(g, x, Direction::Forward); },
                                       rng.normal_tensor<double>({1, 8})));
  }
  {
    fv::ParamRegistry<double> reg;
    fv::PriorFlow<double> prior(reg, "p", 8, 3, 16, 1.0, rng);
    randomize(reg, rng, 0.3);
    errs.emplace_back("prior flow", logdet_rel_error([&](auto& g, auto x) { return prior.to_base(g, x); },
                                                     rng.normal_tensor<double>({1, 8})));
  }
  {
    fv::ParamRegistry<double> reg;
    fv::CouplingOptions<double> opt;
    opt.hidden = 8;
    opt.cond_dim = 2;
    fv::MultiScaleFlow<double> flow(reg, "d", {2, 1, 4}, 4, 4, 2, opt, rng);  // 32 dims
    randomize(reg, rng, 0.2);
    mark_initialized(flow);
    Tensor<double> z = rng.normal_tensor<double>({1, 2});
    errs.emplace_back("2-level stack",
                      logdet_rel_error([&](auto& g, auto x) { return flow.forward(g, x, g.constant(z)); },
                                       rng.uniform_tensor<double>({1, 4, 4, 2}, -2, 2)));
  }
  double worst = 0;
  std::ostringstream os;
  for (auto& [name, e] : errs) {
    worst = std::max(worst, e);
    os << name << " " << fmt(e, 2) << "; ";
  }
  const double sec = seconds_since(t0);
  os << "max rel err " << fmt(worst) << " (< 1e-3), " << fmt(sec) << " s (< 120)";
  return {worst < 1e-3 && sec < 120, os.str()};
}

// ------------------------------------------------------------ criterion 3

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  fv::ModelConfig cfg;
  cfg.hidden = 8;
  cfg.encoder_width = 4;
  cfg.latent_dim = 8;
  cfg.precision = "f64";
  fv::Model<double> m(cfg, 3);
  fv::Rng rng(4);
  perturb(m.params(), rng, 0.05);
  m.set_initialized(true);
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(2));
  Tensor<double> noise = rng.normal_tensor<double>({2, cfg.latent_dim});
  fv::ScalarFn<double> f = [&](Graph<double>& g) {
    return ops::mean_all(m.elbo(g, g.constant(x), g.constant(noise)).loss);
  };
  auto res = fv::finite_diff_check<double>(f, m.params().trainable(), 1e-6, 100, 5);
  const double sec = seconds_since(t0);
  return {res.coords_checked >= 50 && res.max_rel_error < 1e-4 && sec < 120,
          std::to_string(res.coords_checked) + " coordinates, max rel err " + fmt(res.max_rel_error) + " (< 1e-4), " +
              fmt(sec) + " s (< 120)"};
}

// ------------------------------------------------------------ criterion 4

Outcome zero_init() {
  fv::ModelConfig cfg;
  cfg.precision = "f64";
  fv::Model<double> m(cfg, 5);
  fv::Rng rng(6);
  const int n = 1000;
  Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(n));
  Graph<double> g(false);
  auto post = m.posterior(g, g.constant(x));
  const bool zero_posterior = post.mu.value().max_abs() == 0.0 && post.log_var.value().max_abs() == 0.0;

  auto z = fv::sample_posterior(post.mu, post.log_var, g.constant(rng.normal_tensor<double>({n, cfg.latent_dim})));
  auto kl = ops::sub(fv::log_q(post.mu, post.log_var, z), m.prior().log_prob(g, z)).value();
  double mean_kl = 0;
  for (double v : kl.values()) mean_kl += v;
  mean_kl /= n;

  // Prior: the whole flow, couplings included, maps z to itself.
  auto base = m.prior().to_base(g, z);
  bool identity = base.y.value() == z.value() && base.logdet.value().max_abs() == 0.0;
  int couplings = 0;
  for (auto* step : m.decoder().steps())
    for (int i = 0; i < m.config().subblocks; ++i) {
      auto& c = step->coupling(i);
      const int ch = c.options().channels;
      auto in = g.constant(rng.normal_tensor<double>({2, 4, 4, ch}));
      auto zc = g.constant(rng.normal_tensor<double>({2, cfg.latent_dim}));
      auto r = c.apply(g, in, zc, Direction::Forward);
      identity = identity && r.y.value() == in.value() && r.logdet.value().max_abs() == 0.0;
      ++couplings;
    }
  std::ostringstream os;
  os << "posterior mu=0, log_var=0: " << (zero_posterior ? "yes" : "no") << "; mean KL over " << n << " draws "
     << fmt(mean_kl) << " (|.| < 1e-6); " << couplings << " decoder couplings and the prior exactly identity: "
     << (identity ? "yes" : "no");
  return {zero_posterior && std::abs(mean_kl) < 1e-6 && identity, os.str()};
}

// ------------------------------------------------------------ criterion 5

Outcome elbo_vs_truth() {
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
  perturb(m.params(), rng, 0.3);
  m.set_initialized(true);

  // −log p(x) by midpoint quadrature over the prior's base variable.
  const int grid = 64;
  const double lim = 6.0, step = 2 * lim / grid;
  Tensor<double> eps(Shape{grid * grid, 2});
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      eps[2 * (i * grid + j)] = -lim + (i + 0.5) * step;
      eps[2 * (i * grid + j) + 1] = -lim + (j + 0.5) * step;
    }
  const Tensor<double> zq = m.prior().sample(eps, 1.0);

  int nonnegative = 0, within = 0;
  double min_gap = 1e300;
  const int cases = 20, draws = 10000;
  for (int c = 0; c < cases; ++c) {
    Tensor<double> x = rng.uniform_tensor<double>(m.image_shape(1));
    Tensor<double> xs(m.image_shape(grid * grid));
    for (int r = 0; r < grid * grid; ++r) std::copy_n(x.data(), 4, xs.data() + 4 * r);
    Graph<double> g(false);
    auto nll = m.reconstruction_nll(g, g.constant(xs), g.constant(zq)).value();
    std::vector<double> terms(grid * grid);
    double best = -1e300;
    for (int r = 0; r < grid * grid; ++r) {
      terms[r] = -nll[r] + oracle::std_normal_logpdf({eps[2 * r], eps[2 * r + 1]}) + 2 * std::log(step);
      best = std::max(best, terms[r]);
    }
    double acc = 0;
    for (double t : terms) acc += std::exp(t - best);
    const double neg_log_px = -(best + std::log(acc));

    Tensor<double> xb(m.image_shape(draws));
    for (int r = 0; r < draws; ++r) std::copy_n(x.data(), 4, xb.data() + 4 * r);
    auto loss = m.elbo(g, g.constant(xb), rng).loss.value();
    double mean = 0, sq = 0;
    for (double v : loss.values()) mean += v;
    mean /= draws;
    for (double v : loss.values()) sq += (v - mean) * (v - mean);
    const double se = std::sqrt(sq / (draws - 1) / draws);
    // The bound is −ELBO ≥ −log p(x).
    const double gap = mean - neg_log_px;
    nonnegative += gap >= 0;
    within += gap >= -3 * se;
    min_gap = std::min(min_gap, gap / se);
  }
  std::ostringstream os;
  os << "gap >= 0 in " << nonnegative << "/" << cases << " (need >= 19); within 3 MC s.e. in " << within << "/" << cases
     << "; min gap " << fmt(min_gap) << " s.e.";
  return {nonnegative >= 19 && within == cases, os.str()};
}

// ------------------------------------------------------- criteria 6 and 7

struct DeskRun {
  std::uint64_t seed = 0;
  double train_seconds = 0;
  double eval_bpd = 0;
  double baseline_bpd = 0;
  std::vector<double> block_means;
  int violations = 0;
  double acc_z = 0, acc_upsilon = 0;
  std::string ckpt;
};

DeskRun desk_run(std::uint64_t seed, const fs::path& dir, std::ostream& log) {
  fv::ModelConfig mc;
  fv::TrainConfig tc;
  tc.seed = seed;
  DeskRun r;
  r.seed = seed;
  fv::DataSplits splits = fv::load_splits(tc, mc);
  fv::Model<float> model(mc, seed);
  fv::Trainer<float> trainer(model, tc, splits.train);
  std::vector<double> bpd;
  const auto t0 = Clock::now();
  trainer.run(dir.string(), [&](const fv::StepMetrics& m) { bpd.push_back(m.bpd); });
  r.train_seconds = seconds_since(t0);
  r.ckpt = (dir / "final.ckpt").string();
  r.eval_bpd = fv::evaluate_bpd(model, splits.eval, 0);
  r.baseline_bpd = fv::gaussian_baseline_bpd(splits.train, splits.eval);
  // Smoothing: means over consecutive non-overlapping windows of 100 updates.
  constexpr std::size_t kWindow = 100;
  for (std::size_t b = 0; b + kWindow <= bpd.size(); b += kWindow) {
    double s = 0;
    for (std::size_t i = b; i < b + kWindow; ++i) s += bpd[i];
    r.block_means.push_back(s / kWindow);
  }
  for (std::size_t i = 1; i < r.block_means.size(); ++i) r.violations += r.block_means[i] > r.block_means[i - 1];

  auto probe = [&](fv::Representation rep) {
    return fv::run_probe(fv::to_string(rep), fv::extract_features(model, splits.train, rep),
                         fv::extract_features(model, splits.eval, rep))
        .test_accuracy;
  };
  r.acc_z = probe(fv::Representation::Z);
  r.acc_upsilon = probe(fv::Representation::Upsilon);
  log << "  seed " << seed << ": " << fmt(r.train_seconds, 4) << " s, eval bpd " << fmt(r.eval_bpd, 5) << " vs baseline "
      << fmt(r.baseline_bpd, 5) << ", window violations " << r.violations << "/" << r.block_means.size() - 1
      << ", probe z " << fmt(100 * r.acc_z, 4) << "% upsilon " << fmt(100 * r.acc_upsilon, 4) << "%" << std::endl;
  return r;
}

Outcome desk_training(const DeskRun& r, const std::vector<DeskRun>& others) {
  const int comparisons = static_cast<int>(r.block_means.size()) - 1;
  const double margin = r.baseline_bpd - r.eval_bpd;
  std::ostringstream os;
  os << "seed " << r.seed << ": " << fmt(r.train_seconds / 60, 3) << " min (< 30); eval bpd " << fmt(r.eval_bpd, 5)
     << ", baseline " << fmt(r.baseline_bpd, 5) << ", margin " << fmt(margin) << " (>= 0.3); " << r.violations << "/"
     << comparisons << " increases of the 100-update mean training bpd (<= 1%)";
  if (!others.empty()) {
    os << "; margins of the other seeds (not gated):";
    for (const auto& o : others) os << " " << fmt(o.baseline_bpd - o.eval_bpd);
  }
  return {r.train_seconds < 30 * 60 && margin >= 0.3 && r.violations <= 0.01 * comparisons, os.str()};
}

Outcome decoupling(const std::vector<DeskRun>& runs) {
  int ok = 0;
  std::ostringstream os;
  os << "acc(z) - acc(upsilon) by seed:";
  for (const auto& r : runs) {
    const double gap = 100 * (r.acc_z - r.acc_upsilon);
    ok += gap >= 10;
    os << " " << fmt(gap, 3);
  }
  os << " points (>= 10 in " << ok << "/" << runs.size() << ", need 5/5)";
  return {ok == 5 && runs.size() == 5, os.str()};
}

// ------------------------------------------------------------ criterion 8

Outcome interpolation_corners(const std::string& ckpt) {
  fv::ModelConfig cfg = fv::checkpoint_config(ckpt);
  fv::Model<float> m(cfg);
  fv::load_checkpoint(ckpt, m);
  fv::TrainConfig tc;
  fv::Dataset eval = fv::load_splits(tc, cfg).eval;
  fv::Rng rng(8);
  const std::vector<double> alphas = {0, 0.5, 1}, betas = {0, 0.5, 1};
  double worst = 0;
  bool exact = true;
  const int pairs = 10;
  for (int i = 0; i < pairs; ++i) {
    std::vector<int> idx = {2 * i, 2 * i + 1};
    Tensor<float> both = fv::make_batch<float>(eval, idx, rng);
    Tensor<float> x1 = both.rows(0, 1), x2 = both.rows(1, 1);
    Tensor<float> grid = m.interpolate2d(x1, x2, alphas, betas);
    const int last = static_cast<int>(alphas.size() * betas.size()) - 1;
    worst = std::max(worst, static_cast<double>(fv::max_abs_diff(grid.rows(0, 1), m.reconstruct(x1))));
    worst = std::max(worst, static_cast<double>(fv::max_abs_diff(grid.rows(last, 1), m.reconstruct(x2))));
    auto [a, b] = m.swap_codes(both, both);
    const Tensor<float> rec = m.reconstruct(both);
    exact = exact && a == rec && b == rec;
  }
  std::ostringstream os;
  os << pairs << " image pairs from the trained seed-1 model: corner error " << fmt(worst) << " (< 1e-3); "
     << "switch(x, x) == (reconstruct(x), reconstruct(x)) bitwise: " << (exact ? "yes" : "no");
  return {worst < 1e-3 && exact, os.str()};
}

// ------------------------------------------------------------ criterion 9

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "flowvae");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = fv::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_from(const fs::path& p, std::size_t skip) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  for (std::size_t i = 0; std::getline(in, line); ++i)
    if (i >= skip) out.push_back(line);
  return out;
}

Outcome determinism(const std::string& ckpt, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream os;
  // Zero-temperature samples from the trained model.
  const auto s1 = (dir / "t0_a.ppm").string(), s2 = (dir / "t0_b.ppm").string();
  bool samples_ok = run_cli({"sample", "--ckpt", ckpt, "--temperature", "0", "--n", "3", "--cols", "3", "--out", s1}) == 0 &&
                    run_cli({"sample", "--ckpt", ckpt, "--temperature", "0", "--n", "3", "--cols", "3", "--out", s2}) == 0;
  if (samples_ok) {
    fv::Image g = fv::read_ppm(s1);
    const int h = fv::checkpoint_config(ckpt).height, c = g.channels, gap = fv::kGridGap;
    for (int y = 0; y < h; ++y)
      for (int t = 1; t < 3; ++t) {
        const auto* row = g.pixels.data() + ((gap + y) * g.width) * c;
        samples_ok = samples_ok && std::equal(row + gap * c, row + (gap + h) * c, row + (gap + t * (h + gap)) * c);
      }
    samples_ok = samples_ok && slurp(s1) == slurp(s2);
  }
  os << "T=0 samples identical and byte-stable: " << (samples_ok ? "yes" : "no");

  // Two full runs of the desk model from the same config and seed, and a
  // third resumed from the first run's update-100 checkpoint.
  const auto cfg = (dir / "run.cfg").string();
  {
    std::ofstream f(cfg);
    f << "max_updates = 300\ncheckpoint_every = 100\nseed = 11\n";
  }
  const fs::path a = dir / "run_a", b = dir / "run_b", c = dir / "run_c";
  for (const auto& p : {a, b, c}) fs::remove_all(p);
  bool trained = run_cli({"train", "--config", cfg, "--out", a.string()}) == 0 &&
                 run_cli({"train", "--config", cfg, "--out", b.string()}) == 0 &&
                 run_cli({"train", "--config", cfg, "--ckpt", (a / "ckpt_0000100.bin").string(), "--out", c.string()}) == 0;
  const bool reproducible = trained && slurp(a / "final.ckpt") == slurp(b / "final.ckpt") &&
                            slurp(a / "metrics.csv") == slurp(b / "metrics.csv") &&
                            slurp(a / "ckpt_0000200.bin") == slurp(b / "ckpt_0000200.bin");
  // run_c's metrics hold updates 100..299 after its header line.
  const bool resumed = trained && slurp(a / "final.ckpt") == slurp(c / "final.ckpt") &&
                       lines_from(a / "metrics.csv", 101) == lines_from(c / "metrics.csv", 1);
  os << "; 300-update runs bit-identical (checkpoints, metrics): " << (reproducible ? "yes" : "no")
     << "; resume from update 100 matches: " << (resumed ? "yes" : "no");
  return {samples_ok && reproducible && resumed, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "directory for training runs and artifacts");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& check) {
    if (!wanted(id)) return;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "C" << id << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ": " << o.detail << std::endl;
  };

  report(1, "invertibility", invertibility);
  report(2, "log-det oracle", logdet_oracle);
  report(3, "gradient oracle", gradient_oracle);
  report(4, "zero-init contract", zero_init);
  report(5, "ELBO vs quadrature likelihood", elbo_vs_truth);

  std::vector<DeskRun> runs;
  const bool need_seed1 = wanted(6) || wanted(8) || wanted(9);
  if (wanted(7) || need_seed1) {
    const int n_seeds = wanted(7) ? 5 : 1;
    std::cout << "desk training (" << n_seeds << " seed" << (n_seeds > 1 ? "s" : "") << ")" << std::endl;
    try {
      for (int s = 1; s <= n_seeds; ++s) runs.push_back(desk_run(s, fs::path(work) / ("seed" + std::to_string(s)), std::cout));
    } catch (const std::exception& e) {
      std::cout << "  training failed: " << e.what() << std::endl;
    }
  }
  auto need_runs = [&](std::size_t n) {
    if (runs.size() < n) throw std::runtime_error("desk training did not complete");
  };
  report(6, "desk training", [&] {
    need_runs(1);
    return desk_training(runs[0], {runs.begin() + 1, runs.end()});
  });
  report(7, "decoupling direction", [&] {
    need_runs(5);
    return decoupling(runs);
  });
  report(8, "interpolation corners and self-switch", [&] {
    need_runs(1);
    return interpolation_corners(runs[0].ckpt);
  });
  report(9, "determinism", [&] {
    need_runs(1);
    return determinism(runs[0].ckpt, fs::path(work) / "determinism");
  });

  if (selected.empty() || selected.count(10)) {
    std::cout << "C10 REF large-scale bits/dim (3.27 CIFAR-10, 3.72 ImageNet-64, 1.92 LSUN, 1.97 CelebA-HQ), FID and "
                 "ablation numbers are not reproduced at desk scale; the ablation runs with configs/ablation_base.cfg"
              << std::endl;
  }
  std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criterion(s) failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
