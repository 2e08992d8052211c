#include <gtest/gtest.h>

#include <set>
#include <string>
#include <vector>

#include "freeatm/grid.hpp"
#include "freeatm/rng.hpp"

using namespace freeatm;

TEST(Grid, IndexingIsRowMajorWithContiguousDepth) {
  Grid<int> g(2, 3, 4);
  g(1, 2, 3) = 7;
  EXPECT_EQ(g.storage()[(1 * 3 + 2) * 4 + 3], 7);
  EXPECT_EQ(g.pixel(1, 2).size(), 4u);
  EXPECT_EQ(g.pixel(1, 2)[3], 7);
  EXPECT_EQ(g.shape_string(), "2x3x4");
}

TEST(Grid, ChannelRejectsBadIndex) {
  Grid<double> g(2, 2, 3);
  EXPECT_THROW(channel(g, 3), IndexError);
  g(1, 0, 2) = 5.0;
  EXPECT_EQ(channel(g, 2)(1, 0), 5.0);
}

TEST(ResizeBilinear, SameSizeIsBitwiseCopy) {
  Map m(3, 5);
  for (std::size_t i = 0; i < m.size(); ++i) m.storage()[i] = 0.1 * static_cast<double>(i) + 1e-17;
  EXPECT_EQ(resize_bilinear(m, 3, 5), m);
}

TEST(ResizeBilinear, UpsampleUsesHalfPixelCentres) {
  Map m(1, 2);
  m(0, 0) = 0.0;
  m(0, 1) = 1.0;
  const Map up = resize_bilinear(m, 1, 4);
  // Output centres map to source x = -0.25, 0.25, 0.75, 1.25 (clamped).
  EXPECT_DOUBLE_EQ(up(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(up(0, 1), 0.25);
  EXPECT_DOUBLE_EQ(up(0, 2), 0.75);
  EXPECT_DOUBLE_EQ(up(0, 3), 1.0);
}

TEST(ResizeBilinear, DownsampleAveragesPairs) {
  Map m(1, 4);
  for (std::size_t x = 0; x < 4; ++x) m(0, x) = static_cast<double>(x);
  const Map down = resize_bilinear(m, 1, 2);
  EXPECT_DOUBLE_EQ(down(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(down(0, 1), 2.5);
}

TEST(ResizeBilinear, ConstantStaysConstantAcrossDepth) {
  Grid<double> g(3, 3, 2, 0.0);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) {
      g(y, x, 0) = 0.3;
      g(y, x, 1) = 0.9;
    }
  const auto r = resize_bilinear(g, 7, 2);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      EXPECT_NEAR(r(y, x, 0), 0.3, 1e-15);
      EXPECT_NEAR(r(y, x, 1), 0.9, 1e-15);
    }
}

TEST(ResizeBilinear, RejectsEmptyShapes) {
  EXPECT_THROW(resize_bilinear(Map(0, 3), 2, 2), ShapeError);
  EXPECT_THROW(resize_bilinear(Map(2, 2), 0, 2), ShapeError);
}

TEST(ImageConversion, RoundTripsEightBitValues) {
  RgbImage img(2, 2, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.storage()[i] = static_cast<std::uint8_t>(i * 21);
  EXPECT_EQ(to_rgb_image(to_float_image(img)), img);
}

TEST(Fnv1a, MatchesPublishedVectors) {
  const std::string a = "a";
  const std::string foobar = "foobar";
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64({reinterpret_cast<const std::uint8_t*>(a.data()), a.size()}),
            0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64({reinterpret_cast<const std::uint8_t*>(foobar.data()), foobar.size()}),
            0x85944171f73967e8ULL);
}

TEST(DeriveSeed, HashesLittleEndianWordBytes) {
  std::vector<std::uint8_t> bytes;
  for (const std::uint64_t w : {std::uint64_t{42}, std::uint64_t{7}})
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(w >> (8 * i)));
  EXPECT_EQ(derive_seed({42, 7}), fnv1a64(bytes));
  EXPECT_NE(derive_seed({42, 7}), derive_seed({7, 42}));
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(123), b(123), c(124);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const double va = a.uniform();
    EXPECT_EQ(va, b.uniform());
    differs |= va != c.uniform();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng rng(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_THROW(rng.below(0), ParameterError);
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(9);
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng rng(1);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  rng.shuffle(v.begin(), v.end());
  std::set<int> s(v.begin(), v.end());
  EXPECT_EQ(s.size(), 10u);
}
