#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "flowvae/config.hpp"
#include "flowvae/image_io.hpp"
#include "flowvae/random.hpp"

namespace flowvae {

/// Images of one shape and bit depth stored back to back, with optional
/// integer labels.
struct Dataset {
  int height = 0;
  int width = 0;
  int channels = 0;
  int bits = 8;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;  // empty when unlabeled

  std::size_t image_size() const { return static_cast<std::size_t>(height) * width * channels; }
  int size() const { return image_size() == 0 ? 0 : static_cast<int>(pixels.size() / image_size()); }
  bool labeled() const { return !labels.empty(); }
  int num_classes() const { return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1; }

  std::span<const std::uint8_t> image(int i) const {
    return {pixels.data() + static_cast<std::size_t>(i) * image_size(), image_size()};
  }

  Image image_at(int i) const {
    auto px = image(i);
    return {height, width, channels, bits, {px.begin(), px.end()}};
  }

  void append(const Image& img, int label = -1) {
    if (size() == 0 && pixels.empty()) {
      height = img.height;
      width = img.width;
      channels = img.channels;
      bits = img.bits;
    }
    if (img.height != height || img.width != width || img.channels != channels || img.bits != bits)
      throw ConfigError("dataset images must share dimensions and bit depth");
    pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
    if (label >= 0) labels.push_back(label);
  }

  Dataset slice(int begin, int count) const {
    Dataset d{height, width, channels, bits, {}, {}};
    d.pixels.assign(image(begin).data(), image(begin).data() + static_cast<std::size_t>(count) * image_size());
    if (labeled()) d.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
    return d;
  }
};

/// Drops low-order bits so every pixel lies in [0, 2^bits − 1].
inline Dataset reduce_bits(Dataset d, int bits) {
  if (bits > d.bits) throw ConfigError("cannot raise bit depth from " + std::to_string(d.bits));
  const int shift = d.bits - bits;
  for (auto& v : d.pixels) v = static_cast<std::uint8_t>(v >> shift);
  d.bits = bits;
  return d;
}

/// Checks that a dataset matches the model's image shape.
inline void check_dataset(const Dataset& d, const ModelConfig& m) {
  if (d.size() == 0) throw ConfigError("dataset is empty");
  if (d.height != m.height || d.width != m.width || d.channels != m.channels)
    throw ConfigError("dataset images are " + std::to_string(d.height) + "x" + std::to_string(d.width) + "x" +
                      std::to_string(d.channels) + ", model expects " + std::to_string(m.height) + "x" +
                      std::to_string(m.width) + "x" + std::to_string(m.channels));
}

// ---------------------------------------------------------------- synthetic

namespace detail {

// Fully saturated colour for hue ∈ [0, 1).
inline std::array<double, 3> hue_rgb(double hue) {
  auto f = [hue](double n) {
    const double k = std::fmod(n + hue * 6.0, 6.0);
    return 1.0 - std::max(0.0, std::min({k, 4.0 - k, 1.0}));
  };
  return {f(5.0), f(3.0), f(1.0)};
}

}  // namespace detail

inline constexpr double kSyntheticNoiseSd = 48.0;

/// Per-class template: a base hue plus a bright/dark pattern over the four
/// image quadrants. Templates depend only on the class count.
inline std::vector<std::vector<double>> synthetic_templates(int h, int c, int num_classes) {
  Rng layout_rng(0x5eed);
  std::vector<int> layouts;
  while (static_cast<int>(layouts.size()) < num_classes) {
    const int code = static_cast<int>(layout_rng.below(16));
    if (code == 0 || code == 15) continue;
    if (num_classes <= 14 && std::find(layouts.begin(), layouts.end(), code) != layouts.end()) continue;
    layouts.push_back(code);
  }
  std::vector<std::vector<double>> out;
  for (int k = 0; k < num_classes; ++k) {
    const auto rgb = detail::hue_rgb(static_cast<double>(k) / num_classes);
    std::vector<double> t(static_cast<std::size_t>(h) * h * c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        const int quadrant = (y >= h / 2) * 2 + (x >= h / 2);
        const double brightness = (layouts[k] >> quadrant) & 1 ? 0.9 : 0.35;
        for (int ch = 0; ch < c; ++ch) t[(y * h + x) * c + ch] = 255.0 * brightness * (0.2 + 0.8 * rgb[ch % 3]);
      }
    out.push_back(std::move(t));
  }
  return out;
}

/// Labelled images: class template plus i.i.d. per-pixel Gaussian texture
/// (sd kSyntheticNoiseSd on the 8-bit scale) that does not depend on the
/// label. Labels are uniform over classes.
inline Dataset make_synthetic_globals(int n, int h, int c, int num_classes, std::uint64_t seed, int bits = 8) {
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  const auto templates = synthetic_templates(h, c, num_classes);
  Rng rng(seed);
  Dataset d{h, h, c, 8, {}, {}};
  d.pixels.resize(static_cast<std::size_t>(n) * h * h * c);
  d.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int k = static_cast<int>(rng.below(num_classes));
    d.labels[i] = k;
    std::uint8_t* px = d.pixels.data() + static_cast<std::size_t>(i) * h * h * c;
    for (std::size_t j = 0; j < templates[k].size(); ++j)
      px[j] = static_cast<std::uint8_t>(std::clamp(std::round(templates[k][j] + kSyntheticNoiseSd * rng.normal()), 0.0, 255.0));
  }
  return bits == 8 ? d : reduce_bits(std::move(d), bits);
}

// ------------------------------------------------------------------- packed

inline constexpr char kPackedMagic[4] = {'F', 'V', 'D', 'S'};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("packed dataset: truncated header");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/// Layout: "FVDS", u32 n, h, w, c, bits, n·h·w·c uint8 pixels, then
/// optionally n uint16 labels. All integers little-endian.
inline void save_packed(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(kPackedMagic, 4);
  for (int v : {d.size(), d.height, d.width, d.channels, d.bits}) detail::put_u32(out, static_cast<std::uint32_t>(v));
  out.write(reinterpret_cast<const char*>(d.pixels.data()), static_cast<std::streamsize>(d.pixels.size()));
  for (int l : d.labels) {
    const unsigned char b[2] = {static_cast<unsigned char>(l), static_cast<unsigned char>(l >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  }
  if (!out) throw IoError("write failed: " + path);
}

inline Dataset load_packed(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kPackedMagic, 4) != 0) throw IoError(path + ": not a packed dataset");
  const std::uint32_t n = detail::get_u32(in);
  Dataset d;
  d.height = static_cast<int>(detail::get_u32(in));
  d.width = static_cast<int>(detail::get_u32(in));
  d.channels = static_cast<int>(detail::get_u32(in));
  d.bits = static_cast<int>(detail::get_u32(in));
  if (d.bits != 5 && d.bits != 8) throw IoError(path + ": bits must be 5 or 8");
  d.pixels.resize(static_cast<std::size_t>(n) * d.image_size());
  if (!in.read(reinterpret_cast<char*>(d.pixels.data()), static_cast<std::streamsize>(d.pixels.size())))
    throw IoError(path + ": truncated pixel data");
  const int top = (1 << d.bits) - 1;
  for (auto v : d.pixels)
    if (v > top) throw IoError(path + ": pixel exceeds bit depth");
  std::vector<unsigned char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (rest.size() == 2 * static_cast<std::size_t>(n)) {
    d.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) d.labels[i] = rest[2 * i] | (rest[2 * i + 1] << 8);
  } else if (!rest.empty()) {
    throw IoError(path + ": trailing bytes are neither empty nor a label block");
  }
  return d;
}

/// Every *.ppm / *.pgm in `dir`, sorted by file name. A file name of the form
/// "<label>_<rest>" supplies a label; labels are kept only if all files have one.
inline Dataset load_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && (e.path().extension() == ".ppm" || e.path().extension() == ".pgm"))
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Dataset d;
  std::vector<int> labels;
  for (const auto& f : files) {
    d.append(read_ppm(f.string()));
    const std::string stem = f.stem().string();
    const auto us = stem.find('_');
    if (us != std::string::npos && us > 0 && std::all_of(stem.begin(), stem.begin() + us, ::isdigit))
      labels.push_back(std::stoi(stem.substr(0, us)));
  }
  if (labels.size() == files.size()) d.labels = std::move(labels);
  return d;
}

// ---------------------------------------------------------------- selection

/// Training and held-out data for a run. Synthetic splits share templates and
/// use independent seeds.
struct DataSplits {
  Dataset train;
  Dataset eval;
};

inline Dataset load_source(const TrainConfig& t, const ModelConfig& m, const std::string& path) {
  Dataset d = t.dataset == "packed" ? load_packed(path) : load_directory(path);
  check_dataset(d, m);
  return m.bits < d.bits ? reduce_bits(std::move(d), m.bits) : d;
}

inline DataSplits load_splits(const TrainConfig& t, const ModelConfig& m) {
  if (t.dataset == "synthetic")
    return {make_synthetic_globals(t.dataset_size, m.height, m.channels, t.num_classes, t.seed, m.bits),
            make_synthetic_globals(t.eval_size, m.height, m.channels, t.num_classes, t.seed + 0x9e3779b97f4a7c15ull,
                                   m.bits)};
  Dataset all = load_source(t, m, t.dataset_path);
  if (all.bits != m.bits) throw ConfigError("dataset bit depth below model bits");
  const int n_eval = std::min(t.eval_size, all.size() / 5);
  return {all.slice(0, all.size() - n_eval), all.slice(all.size() - n_eval, n_eval)};
}

// ------------------------------------------------------------- augmentation

/// Random horizontal flip (p = 0.5) and random crop after 4-pixel reflection
/// padding, each when enabled.
inline std::vector<std::uint8_t> augment(std::span<const std::uint8_t> px, int h, int w, int c, bool flip, bool crop,
                                         Rng& rng) {
  std::vector<std::uint8_t> out(px.begin(), px.end());
  if (flip && rng.uniform() < 0.5)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w / 2; ++x)
        for (int ch = 0; ch < c; ++ch)
          std::swap(out[(y * w + x) * c + ch], out[(y * w + (w - 1 - x)) * c + ch]);
  if (crop) {
    constexpr int pad = 4;
    const int dy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
    const int dx = static_cast<int>(rng.below(2 * pad + 1)) - pad;
    auto reflect = [](int p, int n) {
      if (n == 1) return 0;
      const int period = 2 * (n - 1);
      p = ((p % period) + period) % period;
      return p < n ? p : period - p;
    };
    std::vector<std::uint8_t> src = out;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          out[(y * w + x) * c + ch] = src[(reflect(y + dy, h) * w + reflect(x + dx, w)) * c + ch];
  }
  return out;
}

}  // namespace flowvae
