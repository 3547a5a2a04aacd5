#include "isobm/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace isobm {
namespace {

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswerVectors) {
  using C = Philox4x32::Counter;
  EXPECT_EQ(Philox4x32::apply(C{0, 0, 0, 0}, {0, 0}), (C{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(Philox4x32::apply(C{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (C{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(Philox4x32::apply(C{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (C{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(PathStream, DrawsArePureFunctionsOfSeedPathStep) {
  const PathStream a(42, 7), b(42, 7);
  std::vector<double> xa(5), xb(5);
  a.normals(123, xa);
  b.normals(123, xb);
  EXPECT_EQ(xa, xb);

  const PathStream other_path(42, 8), other_seed(43, 7);
  std::vector<double> xc(5), xd(5);
  other_path.normals(123, xc);
  other_seed.normals(123, xd);
  EXPECT_NE(xa, xc);
  EXPECT_NE(xa, xd);
}

TEST(PathStream, PurposeSeparatesStreams) {
  const PathStream sim(5, 0, StreamPurpose::Simulation), resample(5, 0, StreamPurpose::Resampling);
  EXPECT_NE(sim.uniform_pair(0, 0), resample.uniform_pair(0, 0));
}

TEST(PathStream, NormalMomentsMatchStandardNormal) {
  const int n = 200000;
  double s1 = 0, s2 = 0, s4 = 0;
  std::vector<double> z(2);
  for (int i = 0; i < n / 2; ++i) {
    PathStream(9, static_cast<std::uint64_t>(i)).normals(0, z);
    for (double v : z) {
      s1 += v;
      s2 += v * v;
      s4 += v * v * v * v;
    }
  }
  EXPECT_NEAR(s1 / n, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 5.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(s4 / n, 3.0, 5.0 * std::sqrt(96.0 / n));
}

TEST(PathStream, UniformsInOpenUnitInterval) {
  const PathStream s(1, 2);
  for (std::uint32_t step = 0; step < 1000; ++step) {
    const auto [u, v] = s.uniform_pair(step, 0);
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

}  // namespace
}  // namespace isobm
