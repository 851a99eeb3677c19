#include <gtest/gtest.h>

#include <cmath>

#include "ccdm/rng.hpp"

using ccdm::Philox4x32;
using ccdm::RandomStream;

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswerVectors) {
  EXPECT_EQ(Philox4x32::generate({0, 0, 0, 0}, {0, 0}),
            (Philox4x32::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(Philox4x32::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (Philox4x32::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (Philox4x32::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RandomStream, SameKeySameSequence) {
  RandomStream a(42, 7), b(42, 7), c(42, 8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u32();
    EXPECT_EQ(x, b.next_u32());
    differs |= (x != c.next_u32());
  }
  EXPECT_TRUE(differs);
}

TEST(RandomStream, UniformAndNormalMoments) {
  RandomStream r(1, ccdm::stream_id("moments"));
  constexpr int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.015);
}

TEST(RandomStream, UniformIntCoversRangeWithoutBias) {
  RandomStream r(3, 0);
  std::array<int, 5> counts{};
  for (int i = 0; i < 50000; ++i) ++counts[r.uniform_int(5)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(RandomStream, StreamIdsSeparateRoles) {
  EXPECT_NE(ccdm::stream_id("batch", 0, 0), ccdm::stream_id("noise", 0, 0));
  EXPECT_NE(ccdm::stream_id("sample", 1, 2), ccdm::stream_id("sample", 2, 1));
  EXPECT_EQ(ccdm::stream_id("sample", 1, 2), ccdm::stream_id("sample", 1, 2));
}

TEST(RandomStream, RandnTensorMatchesScalarDraws) {
  RandomStream a(9, 1), b(9, 1);
  auto t = a.randn({3, 4}, torch::kFloat64);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(t.view(-1)[i].item<double>(), b.normal());
}
