#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <type_traits>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>

#include "flowvae/errors.hpp"

namespace flowvae {

/// Architecture hyperparameters. Everything here feeds the config digest
/// stored in checkpoints.
struct ModelConfig {
  int height = 8;
  int width = 8;
  int channels = 3;
  int bits = 8;
  int latent_dim = 16;
  int levels = 2;
  int steps = 1;      // K
  int subblocks = 4;  // M
  int hidden = 64;
  double alpha = 1.0;
  bool affine = true;
  // "coupling": z enters every coupling through FC(z).
  // "base": couplings are unconditional and z only sets the mean and scale
  // of υ's Gaussian (ablation).
  std::string cond_mode = "coupling";
  int encoder_width = 32;
  int encoder_max_width = 256;
  int prior_steps = 4;
  int prior_hidden = 0;  // 0 selects 2·latent_dim
  std::string precision = "f32";
  // Permits images below 8×8 and latent_dim > h·w·c/8; used for small
  // analytic test models.
  bool toy = false;

  int dims() const { return height * width * channels; }
  int prior_width() const { return prior_hidden > 0 ? prior_hidden : 2 * latent_dim; }

  void validate() const {
    auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
    require(height == width, "height must equal width");
    require(pow2(height), "height must be a power of two");
    require(toy || height >= 8, "height must be at least 8");
    require(channels >= 1, "channels must be positive");
    require(bits == 5 || bits == 8, "bits must be 5 or 8");
    require(latent_dim >= 2 && latent_dim % 2 == 0, "latent_dim must be even and >= 2");
    require(toy || latent_dim * 8 <= dims(), "latent_dim must be at most h*w*c/8");
    require(levels >= 1 && height % (1 << levels) == 0, "height must be divisible by 2^levels");
    require(steps >= 1 && subblocks >= 1 && hidden >= 1, "steps, subblocks and hidden must be positive");
    require(alpha > 0 && alpha <= 1, "alpha must lie in (0, 1]");
    require(cond_mode == "coupling" || cond_mode == "base", "cond_mode must be coupling or base");
    require(encoder_width >= 1 && encoder_max_width >= encoder_width, "bad encoder widths");
    require(prior_steps >= 0, "prior_steps must be >= 0");
    require(precision == "f32" || precision == "f64", "precision must be f32 or f64");
  }

  /// Canonical text form, one key=value per line in fixed order.
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "height=" << height << "\nwidth=" << width << "\nchannels=" << channels << "\nbits=" << bits
       << "\nlatent_dim=" << latent_dim << "\nlevels=" << levels << "\nsteps=" << steps << "\nsubblocks=" << subblocks
       << "\nhidden=" << hidden << "\nalpha=" << alpha << "\naffine=" << (affine ? 1 : 0) << "\ncond_mode=" << cond_mode
       << "\nencoder_width=" << encoder_width << "\nencoder_max_width=" << encoder_max_width
       << "\nprior_steps=" << prior_steps << "\nprior_hidden=" << prior_hidden << "\nprecision=" << precision
       << "\ntoy=" << (toy ? 1 : 0) << "\n";
    return os.str();
  }

  /// FNV-1a 64 of to_text(), as 16 hex digits.
  std::string digest() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : to_text()) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

struct TrainConfig {
  int batch_size = 64;
  double lr = 1e-3;
  int warmup = 50;
  double decay = 0.999997;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-6;
  int max_updates = 2000;
  std::uint64_t seed = 1;
  int checkpoint_every = 500;
  // synthetic | directory | packed
  std::string dataset = "synthetic";
  std::string dataset_path;
  int dataset_size = 4096;
  int num_classes = 4;
  int eval_size = 512;
  bool flip = false;
  bool crop = false;

  void validate() const {
    require(batch_size >= 1, "batch_size must be positive");
    require(lr > 0 && decay > 0 && decay <= 1, "lr and decay must be positive");
    require(warmup >= 1, "warmup must be >= 1");
    require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && adam_eps > 0, "bad adam constants");
    require(weight_decay >= 0, "weight_decay must be >= 0");
    require(max_updates >= 0, "max_updates must be >= 0");
    require(checkpoint_every >= 1, "checkpoint_every must be >= 1");
    require(dataset == "synthetic" || dataset == "directory" || dataset == "packed",
            "dataset must be synthetic, directory or packed");
    require(dataset == "synthetic" || !dataset_path.empty(), "dataset_path is required for " + dataset);
    require(dataset_size >= 1 && num_classes >= 2 && eval_size >= 1, "bad synthetic dataset sizes");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

template <class V>
V parse_number(const std::string& key, const std::string& val) {
  std::size_t pos = 0;
  V v{};
  try {
    if constexpr (std::is_same_v<V, int>)
      v = std::stoi(val, &pos);
    else if constexpr (std::is_same_v<V, double>)
      v = std::stod(val, &pos);
    else
      v = static_cast<V>(std::stoull(val, &pos));
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (val.empty() || pos != val.size()) throw ConfigError("config key " + key + ": bad value '" + val + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& val) {
  if (val == "1" || val == "true") return true;
  if (val == "0" || val == "false") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + val);
}

}  // namespace detail

/// Parses `key = value` lines; '#' starts a comment. Unknown keys are errors.
inline RunConfig parse_config(const std::string& text) {
  RunConfig rc;
  ModelConfig& m = rc.model;
  TrainConfig& t = rc.train;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto i = [](int& f) -> Setter { return [&f](auto& k, auto& v) { f = detail::parse_number<int>(k, v); }; };
  auto d = [](double& f) -> Setter { return [&f](auto& k, auto& v) { f = detail::parse_number<double>(k, v); }; };
  auto b = [](bool& f) -> Setter { return [&f](auto& k, auto& v) { f = detail::parse_bool(k, v); }; };
  auto s = [](std::string& f) -> Setter { return [&f](auto&, auto& v) { f = v; }; };
  const std::map<std::string, Setter> setters = {
      {"height", i(m.height)},
      {"width", i(m.width)},
      {"channels", i(m.channels)},
      {"bits", i(m.bits)},
      {"latent_dim", i(m.latent_dim)},
      {"levels", i(m.levels)},
      {"steps", i(m.steps)},
      {"subblocks", i(m.subblocks)},
      {"hidden", i(m.hidden)},
      {"alpha", d(m.alpha)},
      {"affine", b(m.affine)},
      {"cond_mode", s(m.cond_mode)},
      {"encoder_width", i(m.encoder_width)},
      {"encoder_max_width", i(m.encoder_max_width)},
      {"prior_steps", i(m.prior_steps)},
      {"prior_hidden", i(m.prior_hidden)},
      {"precision", s(m.precision)},
      {"toy", b(m.toy)},
      {"batch_size", i(t.batch_size)},
      {"lr", d(t.lr)},
      {"warmup", i(t.warmup)},
      {"decay", d(t.decay)},
      {"beta1", d(t.beta1)},
      {"beta2", d(t.beta2)},
      {"adam_eps", d(t.adam_eps)},
      {"weight_decay", d(t.weight_decay)},
      {"max_updates", i(t.max_updates)},
      {"seed", [&t](auto& k, auto& v) { t.seed = detail::parse_number<std::uint64_t>(k, v); }},
      {"checkpoint_every", i(t.checkpoint_every)},
      {"dataset", s(t.dataset)},
      {"dataset_path", s(t.dataset_path)},
      {"dataset_size", i(t.dataset_size)},
      {"num_classes", i(t.num_classes)},
      {"eval_size", i(t.eval_size)},
      {"flip", b(t.flip)},
      {"crop", b(t.crop)},
  };
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq)), val = detail::trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key " + key);
    it->second(key, val);
  }
  m.validate();
  t.validate();
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace flowvae
