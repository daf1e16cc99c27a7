#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flowvae/checkpoint.hpp"
#include "flowvae/dataset.hpp"
#include "flowvae/image_io.hpp"
#include "flowvae/probe.hpp"
#include "flowvae/training.hpp"

namespace flowvae::cli {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Options {
  std::string config;
  std::string ckpt;
  std::string out;
  std::string data;
  std::string split = "eval";
  std::string rep = "z";
  std::vector<std::string> images;
  std::vector<double> alphas = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> betas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  double temperature = 0.7;
  int n = 16;
  int cols = 0;
  int bits = 0;  // 0: model bit depth
  std::optional<std::uint64_t> seed;
  double l2 = 1e-3;
  int epochs = 500;
};

namespace detail {

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

inline std::uint64_t seed_or(const Options& o, std::uint64_t fallback) { return o.seed ? *o.seed : fallback; }

// Model config from --ckpt, checked against --config when both are given.
inline ModelConfig model_config(const Options& o) {
  if (o.ckpt.empty()) throw ConfigError("--ckpt is required");
  ModelConfig cfg = checkpoint_config(o.ckpt);
  if (!o.config.empty()) {
    const ModelConfig given = load_config(o.config).model;
    if (given.digest() != cfg.digest())
      throw ConfigError("config digest mismatch: " + o.config + " (" + given.digest() + ") vs " + o.ckpt + " (" +
                        cfg.digest() + ")");
  }
  return cfg;
}

inline TrainConfig train_config(const Options& o) {
  TrainConfig t = o.config.empty() ? TrainConfig{} : load_config(o.config).train;
  if (o.seed) t.seed = *o.seed;
  return t;
}

// Image file → [1, h, w, c] tensor at bin centres in the model's bit depth.
template <class T>
Tensor<T> load_image(const std::string& path, const ModelConfig& cfg) {
  Image img = read_ppm(path);
  if (img.height != cfg.height || img.width != cfg.width || img.channels != cfg.channels)
    throw ConfigError(path + ": image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                      std::to_string(img.channels) + ", model expects " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width) + "x" + std::to_string(cfg.channels));
  if (img.bits < cfg.bits) throw ConfigError(path + ": bit depth below the model's");
  const int shift = img.bits - cfg.bits;
  const double scale = std::ldexp(1.0, cfg.bits);
  Tensor<T> x(Shape{1, cfg.height, cfg.width, cfg.channels});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) x[i] = static_cast<T>(((img.pixels[i] >> shift) + 0.5) / scale);
  return x;
}

// Rows of x ([n, h, w, c] in [0, 1)) as integer images.
template <class T>
std::vector<Image> to_images(const Tensor<T>& x, int bits) {
  std::vector<Image> out;
  const auto q = quantize(x, bits);
  const std::size_t rs = x.row_size();
  for (int i = 0; i < x.dim(0); ++i)
    out.push_back({x.dim(1), x.dim(2), x.dim(3), bits, {q.begin() + i * rs, q.begin() + (i + 1) * rs}});
  return out;
}

inline int output_bits(const Options& o, const ModelConfig& cfg) {
  const int b = o.bits ? o.bits : cfg.bits;
  if (b != 5 && b != 8) throw ConfigError("--bits must be 5 or 8");
  return b;
}

inline int grid_cols(const Options& o, int n) {
  if (o.cols > 0) return o.cols;
  int c = 1;
  while (c * c < n) ++c;
  return c;
}

template <class T>
struct Loaded {
  explicit Loaded(const ModelConfig& cfg, const std::string& ckpt) : model(cfg) { load_checkpoint(ckpt, model); }
  Model<T> model;
};

// Dataset for eval/probe: --data (packed file or directory) or the split
// named by --split of the configured dataset.
inline Dataset pick_dataset(const Options& o, const TrainConfig& t, const ModelConfig& m, bool labelled) {
  Dataset d;
  if (!o.data.empty()) {
    TrainConfig src = t;
    src.dataset = std::filesystem::is_directory(o.data) ? "directory" : "packed";
    d = load_source(src, m, o.data);
  } else {
    DataSplits s = load_splits(t, m);
    if (o.split != "train" && o.split != "eval") throw ConfigError("--split must be train or eval");
    d = o.split == "train" ? std::move(s.train) : std::move(s.eval);
  }
  if (labelled && !d.labeled()) throw ConfigError("dataset has no labels");
  return d;
}

// ------------------------------------------------------------------ commands

template <class T>
int train(const Options& o, std::ostream& log) {
  if (o.config.empty()) throw ConfigError("train needs --config");
  RunConfig rc = load_config(o.config);
  if (o.seed) rc.train.seed = *o.seed;
  const std::string out = o.out.empty() ? "run" : o.out;
  DataSplits splits = load_splits(rc.train, rc.model);
  Model<T> model(rc.model, rc.train.seed);
  Trainer<T> trainer(model, rc.train, splits.train);
  if (!o.ckpt.empty()) trainer.resume(o.ckpt);
  const int every = std::max(1, rc.train.max_updates / 20);
  trainer.run(out, [&](const StepMetrics& m) {
    if ((m.update + 1) % every == 0)
      log << "update " << m.update + 1 << "  loss " << m.loss << "  kl " << m.kl << "  bpd " << m.bpd << '\n';
  });
  const double bpd = evaluate_bpd(model, splits.eval, rc.train.seed);
  log << "eval bpd " << std::setprecision(6) << bpd << "  (" << out << "/final.ckpt)\n";
  return kOk;
}

template <class T>
int eval(const Options& o, std::ostream& log) {
  const ModelConfig cfg = model_config(o);
  Loaded<T> m(cfg, o.ckpt);
  const TrainConfig t = train_config(o);
  const Dataset d = pick_dataset(o, t, cfg, false);
  const double bpd = evaluate_bpd(m.model, d, seed_or(o, 0));
  std::ostringstream os;
  os << std::setprecision(9) << "bpd," << bpd << "\nimages," << d.size() << '\n';
  log << "bpd " << std::setprecision(6) << bpd << " over " << d.size() << " images\n";
  if (!o.out.empty()) write_text(o.out, os.str());
  return kOk;
}

template <class T>
int sample(const Options& o, std::ostream& log) {
  const ModelConfig cfg = model_config(o);
  Loaded<T> m(cfg, o.ckpt);
  if (o.n < 1) throw ConfigError("--n must be >= 1");
  Rng rng(seed_or(o, 0));
  Tensor<T> x = m.model.sample(o.n, static_cast<T>(o.temperature), rng);
  const std::string out = o.out.empty() ? "samples.ppm" : o.out;
  ensure_parent(out);
  write_grid(to_images(x, output_bits(o, cfg)), grid_cols(o, o.n), out);
  log << "wrote " << o.n << " samples at temperature " << o.temperature << " to " << out << '\n';
  return kOk;
}

template <class T>
int reconstruct(const Options& o, std::ostream& log) {
  const ModelConfig cfg = model_config(o);
  Loaded<T> m(cfg, o.ckpt);
  std::vector<Tensor<T>> inputs;
  if (!o.images.empty()) {
    for (const auto& p : o.images) inputs.push_back(load_image<T>(p, cfg));
  } else {
    const Dataset d = pick_dataset(o, train_config(o), cfg, false);
    Rng rng(seed_or(o, 0));
    for (int i = 0; i < std::min(o.n, d.size()); ++i) {
      Tensor<T> x(Shape{1, cfg.height, cfg.width, cfg.channels});
      const double scale = std::ldexp(1.0, cfg.bits);
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = static_cast<T>((d.image(i)[j] + 0.5) / scale);
      inputs.push_back(std::move(x));
    }
  }
  if (inputs.empty()) throw ConfigError("nothing to reconstruct");
  std::vector<Image> tiles;
  const int bits = output_bits(o, cfg);
  double worst = 0;
  for (const auto& x : inputs) {
    Tensor<T> r = m.model.reconstruct(x);
    worst = std::max(worst, static_cast<double>(max_abs_diff(r, x)));
    tiles.push_back(to_images(x, bits)[0]);
    tiles.push_back(to_images(r, bits)[0]);
  }
  const std::string out = o.out.empty() ? "reconstructions.ppm" : o.out;
  ensure_parent(out);
  write_grid(tiles, 2, out);
  log << "wrote " << inputs.size() << " original/reconstruction pairs to " << out << " (max error " << worst << ")\n";
  return kOk;
}

template <class T>
int interpolate(const Options& o, std::ostream& log) {
  const ModelConfig cfg = model_config(o);
  Loaded<T> m(cfg, o.ckpt);
  if (o.images.size() != 2) throw ConfigError("interpolate needs exactly two --images");
  Tensor<T> grid = m.model.interpolate2d(load_image<T>(o.images[0], cfg), load_image<T>(o.images[1], cfg), o.alphas,
                                         o.betas);
  const std::string out = o.out.empty() ? "interpolation.ppm" : o.out;
  ensure_parent(out);
  write_grid(to_images(grid, output_bits(o, cfg)), static_cast<int>(o.betas.size()), out);
  log << "wrote " << o.alphas.size() << "x" << o.betas.size() << " grid (rows: alpha, columns: beta) to " << out
      << '\n';
  return kOk;
}

template <class T>
int swap(const Options& o, std::ostream& log) {
  const ModelConfig cfg = model_config(o);
  Loaded<T> m(cfg, o.ckpt);
  if (o.images.size() != 2) throw ConfigError("switch needs exactly two --images");
  Tensor<T> x1 = load_image<T>(o.images[0], cfg), x2 = load_image<T>(o.images[1], cfg);
  auto [a, b] = m.model.swap_codes(x1, x2);
  const int bits = output_bits(o, cfg);
  std::vector<Image> tiles = {to_images(x1, bits)[0], to_images(x2, bits)[0], to_images(a, bits)[0],
                              to_images(b, bits)[0]};
  const std::string out = o.out.empty() ? "switch.ppm" : o.out;
  ensure_parent(out);
  write_grid(tiles, 2, out);
  log << "wrote switch grid to " << out << " (top: inputs; bottom: (z2, v1), (z1, v2))\n";
  return kOk;
}

template <class T>
int probe(const Options& o, std::ostream& log) {
  const ModelConfig cfg = model_config(o);
  Loaded<T> m(cfg, o.ckpt);
  const TrainConfig t = train_config(o);
  if (!o.data.empty()) throw ConfigError("probe uses the configured dataset's train and eval splits");
  DataSplits s = load_splits(t, cfg);
  if (!s.train.labeled() || !s.eval.labeled()) throw ConfigError("probe needs a labelled dataset");
  const Representation rep = parse_representation(o.rep);
  ProbeOptions po{o.l2, o.epochs};
  ProbeReport r =
      run_probe(to_string(rep), extract_features(m.model, s.train, rep), extract_features(m.model, s.eval, rep), po);
  log << r.to_text();
  if (!o.out.empty()) {
    write_text(o.out + ".csv", r.to_csv());
    write_text(o.out + ".txt", r.to_text());
  }
  return kOk;
}

template <class T>
int dispatch(const std::string& cmd, const Options& o, std::ostream& log) {
  if (cmd == "train") return train<T>(o, log);
  if (cmd == "eval") return eval<T>(o, log);
  if (cmd == "sample") return sample<T>(o, log);
  if (cmd == "reconstruct") return reconstruct<T>(o, log);
  if (cmd == "interpolate") return interpolate<T>(o, log);
  if (cmd == "switch") return swap<T>(o, log);
  if (cmd == "probe") return probe<T>(o, log);
  throw ConfigError("unknown command " + cmd);
}

inline std::string precision_of(const std::string& cmd, const Options& o) {
  if (cmd == "train") return load_config(o.config).model.precision;
  return model_config(o).precision;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Variational autoencoder with a conditional flow decoder"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub, bool needs_ckpt) {
    sub->add_option("--config", o.config, "key=value run configuration")->check(CLI::ExistingFile);
    auto* ck = sub->add_option("--ckpt", o.ckpt, "checkpoint file");
    if (needs_ckpt) ck->required();
    sub->add_option("--out", o.out, "output path");
    sub->add_option("--seed", seed, "random seed")->each([&](const std::string&) { o.seed = seed; });
  };
  auto add_bits = [&](CLI::App* sub) { sub->add_option("--bits", o.bits, "output bit depth (5 or 8)"); };

  auto* train = app.add_subcommand("train", "train a model; writes metrics.csv and checkpoints to --out");
  add_common(train, false);
  train->get_option("--config")->required();
  train->get_option("--ckpt")->description("resume from this checkpoint");

  auto* eval = app.add_subcommand("eval", "mean bits/dim over a dataset");
  add_common(eval, true);
  eval->add_option("--data", o.data, "packed dataset file or directory of PPMs");
  eval->add_option("--split", o.split, "train or eval split of the configured dataset");

  auto* sample = app.add_subcommand("sample", "grid of samples");
  add_common(sample, true);
  add_bits(sample);
  sample->add_option("--n", o.n, "number of samples");
  sample->add_option("--temperature", o.temperature, "scale of the base noise");
  sample->add_option("--cols", o.cols, "grid columns");

  auto* recon = app.add_subcommand("reconstruct", "originals beside reconstructions");
  add_common(recon, true);
  add_bits(recon);
  recon->add_option("--images", o.images, "input PPM files");
  recon->add_option("--n", o.n, "images taken from the dataset when --images is absent");
  recon->add_option("--data", o.data, "packed dataset file or directory of PPMs");
  recon->add_option("--split", o.split, "train or eval split of the configured dataset");

  auto* interp = app.add_subcommand("interpolate", "2-D interpolation grid between two images");
  add_common(interp, true);
  add_bits(interp);
  interp->add_option("--images", o.images, "two input PPM files")->required()->expected(2);
  interp->add_option("--alphas", o.alphas, "weights on the second image's z")->delimiter(',');
  interp->add_option("--betas", o.betas, "weights on the second image's upsilon")->delimiter(',');

  auto* sw = app.add_subcommand("switch", "exchange z between two images");
  add_common(sw, true);
  add_bits(sw);
  sw->add_option("--images", o.images, "two input PPM files")->required()->expected(2);

  auto* pr = app.add_subcommand("probe", "linear probe on z, upsilon or raw pixels");
  add_common(pr, true);
  pr->add_option("--rep", o.rep, "z, upsilon or raw")->check(CLI::IsMember({"z", "upsilon", "raw"}));
  pr->add_option("--l2", o.l2, "L2 penalty");
  pr->add_option("--epochs", o.epochs, "full-batch gradient steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, err);
    return code == 0 ? kOk : kConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const std::string precision = detail::precision_of(cmd, o);
    return precision == "f64" ? detail::dispatch<double>(cmd, o, log) : detail::dispatch<float>(cmd, o, log);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace flowvae::cli
