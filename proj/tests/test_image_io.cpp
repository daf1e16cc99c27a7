#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "flowvae/image_io.hpp"
#include "flowvae/random.hpp"

namespace fv = flowvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "flowvae_test_image_io";
  fs::create_directories(p);
  return p;
}

fv::Image random_image(int h, int w, int c, int bits, std::uint64_t seed) {
  fv::Rng rng(seed);
  fv::Image img{h, w, c, bits, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w * c)};
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(1u << bits));
  return img;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Ppm, RoundTripsColourGreyAndFiveBit) {
  const auto dir = temp_dir();
  for (auto img : {random_image(5, 7, 3, 8, 1), random_image(4, 4, 1, 8, 2), random_image(8, 8, 3, 5, 3)}) {
    const auto path = (dir / "rt.ppm").string();
    fv::write_ppm(path, img);
    EXPECT_EQ(fv::read_ppm(path), img);
  }
}

TEST(Ppm, HeaderIsExact) {
  const auto dir = temp_dir();
  fv::Image img{1, 2, 3, 8, {1, 2, 3, 4, 5, 6}};
  fv::write_ppm((dir / "h.ppm").string(), img);
  EXPECT_EQ(slurp(dir / "h.ppm"), std::string("P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06", 17));
}

TEST(Ppm, ReadsCommentsAndRejectsBadFiles) {
  const auto dir = temp_dir();
  {
    std::ofstream f(dir / "c.ppm", std::ios::binary);
    f << "P5\n# a comment\n2 1\n255\n" << '\x07' << '\x09';
  }
  fv::Image img = fv::read_ppm((dir / "c.ppm").string());
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{7, 9}));
  EXPECT_EQ(img.channels, 1);
  {
    std::ofstream f(dir / "t.ppm", std::ios::binary);
    f << "P6\n2 2\n255\n" << "abc";
  }
  EXPECT_THROW(fv::read_ppm((dir / "t.ppm").string()), fv::IoError);
  {
    std::ofstream f(dir / "a.ppm", std::ios::binary);
    f << "P3\n1 1\n255\n0 0 0\n";
  }
  EXPECT_THROW(fv::read_ppm((dir / "a.ppm").string()), fv::IoError);
  EXPECT_THROW(fv::read_ppm((dir / "missing.ppm").string()), fv::IoError);
  EXPECT_THROW(fv::write_ppm((dir / "x.ppm").string(), fv::Image{1, 1, 2, 8, {0, 0}}), fv::ConfigError);
}

TEST(Grid, SingleImageGetsBorder) {
  fv::Image img = random_image(3, 4, 3, 8, 4);
  fv::Image g = fv::make_grid({img}, 1);
  EXPECT_EQ(g.height, 3 + 2 * fv::kGridGap);
  EXPECT_EQ(g.width, 4 + 2 * fv::kGridGap);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const auto v = g.pixels[(y * g.width + x) * 3 + c];
        const bool inside = y >= 2 && y < 5 && x >= 2 && x < 6;
        EXPECT_EQ(v, inside ? img.pixels[((y - 2) * 4 + (x - 2)) * 3 + c] : 255);
      }
}

TEST(Grid, TwoByTwoLayout) {
  std::vector<fv::Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(5, 6, 3, 8, 10 + i));
  fv::Image g = fv::make_grid(imgs, 2);
  EXPECT_EQ(g.height, 2 * 5 + 3 * 2);
  EXPECT_EQ(g.width, 2 * 6 + 3 * 2);
  // Bottom-right tile starts at (2 + 5 + 2, 2 + 6 + 2).
  EXPECT_EQ(g.pixels[(9 * g.width + 10) * 3], imgs[3].pixels[0]);
  fv::Image five = fv::make_grid({random_image(2, 2, 1, 5, 1)}, 1);
  EXPECT_EQ(five.pixels[0], 31);
}

TEST(Grid, DeterministicBytesAndValidation) {
  const auto dir = temp_dir();
  std::vector<fv::Image> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(random_image(4, 4, 3, 8, 20 + i));
  fv::write_grid(imgs, 2, (dir / "g1.ppm").string());
  fv::write_grid(imgs, 2, (dir / "g2.ppm").string());
  EXPECT_TRUE(slurp(dir / "g1.ppm") == slurp(dir / "g2.ppm"));
  EXPECT_THROW(fv::make_grid({}, 2), fv::ConfigError);
  EXPECT_THROW(fv::make_grid({imgs[0], random_image(5, 4, 3, 8, 1)}, 2), fv::ConfigError);
}
