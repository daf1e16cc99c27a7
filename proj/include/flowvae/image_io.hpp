#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "flowvae/errors.hpp"

namespace flowvae {

/// Integer image, row-major h×w×c, values in [0, 2^bits − 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  int bits = 8;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image&) const = default;
};

namespace detail {

inline int read_header_int(std::istream& in) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw IoError("ppm: malformed header");
  int v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    ch = in.get();
  }
  return v;  // the single whitespace after the number is consumed
}

}  // namespace detail

/// Binary PPM (P6, 3 channels) or PGM (P5, 1 channel) with maxval 2^bits − 1.
inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ConfigError("ppm supports 1 or 3 channels");
  if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
    throw ConfigError("ppm: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 3 ? "P6" : "P5") << '\n'
      << img.width << ' ' << img.height << '\n'
      << ((1 << img.bits) - 1) << '\n';
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed: " + path);
}

/// Reads P5/P6 with maxval < 256. The bit depth is taken from maxval
/// (31 → 5 bits, 255 → 8 bits).
inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2];
  if (!in.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw IoError(path + ": not a binary PPM/PGM");
  Image img;
  img.channels = magic[1] == '6' ? 3 : 1;
  img.width = detail::read_header_int(in);
  img.height = detail::read_header_int(in);
  const int maxval = detail::read_header_int(in);
  if (maxval == 31)
    img.bits = 5;
  else if (maxval == 255)
    img.bits = 8;
  else
    throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
  img.pixels.resize(static_cast<std::size_t>(img.height) * img.width * img.channels);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw IoError(path + ": truncated pixel data");
  for (auto v : img.pixels)
    if (v > maxval) throw IoError(path + ": pixel exceeds maxval");
  return img;
}

inline constexpr int kGridGap = 2;

/// Tiles equally sized images row-major with `cols` per row, separated and
/// framed by kGridGap pixels of white.
inline Image make_grid(const std::vector<Image>& images, int cols) {
  if (images.empty()) throw ConfigError("grid needs at least one image");
  if (cols < 1) throw ConfigError("grid needs cols >= 1");
  const Image& first = images.front();
  for (const auto& im : images)
    if (im.height != first.height || im.width != first.width || im.channels != first.channels || im.bits != first.bits)
      throw ConfigError("grid images must share dimensions and depth");
  const int n = static_cast<int>(images.size());
  const int rows = (n + cols - 1) / cols;
  Image grid;
  grid.height = rows * first.height + (rows + 1) * kGridGap;
  grid.width = cols * first.width + (cols + 1) * kGridGap;
  grid.channels = first.channels;
  grid.bits = first.bits;
  grid.pixels.assign(static_cast<std::size_t>(grid.height) * grid.width * grid.channels,
                     static_cast<std::uint8_t>((1 << grid.bits) - 1));
  const int c = first.channels;
  for (int k = 0; k < n; ++k) {
    const int oy = kGridGap + (k / cols) * (first.height + kGridGap);
    const int ox = kGridGap + (k % cols) * (first.width + kGridGap);
    for (int y = 0; y < first.height; ++y)
      std::copy_n(images[k].pixels.data() + static_cast<std::size_t>(y) * first.width * c, first.width * c,
                  grid.pixels.data() + (static_cast<std::size_t>(oy + y) * grid.width + ox) * c);
  }
  return grid;
}

inline void write_grid(const std::vector<Image>& images, int cols, const std::string& path) {
  write_ppm(path, make_grid(images, cols));
}

}  // namespace flowvae
