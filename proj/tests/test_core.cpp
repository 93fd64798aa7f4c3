#include <gtest/gtest.h>

#include "tcx/core.hpp"

using namespace tcx;

TEST(Crc64, MatchesPublishedCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}),
            0x995DC9BBDF1939FAULL);
}

TEST(ByteIo, RoundTripAndSeal) {
  ByteWriter w;
  w.tag("ABCD");
  w.u8(7);
  w.u32(0xDEADBEEF);
  w.u64(1ULL << 40);
  w.f64(-2.5);
  w.seal();
  auto bytes = w.buffer();
  ByteReader r(bytes);
  EXPECT_TRUE(r.tag("ABCD"));
  EXPECT_EQ(r.u8(), 7);
  EXPECT_EQ(r.u32(), 0xDEADBEEFu);
  EXPECT_EQ(r.u64(), 1ULL << 40);
  EXPECT_EQ(r.f64(), -2.5);
  EXPECT_NO_THROW(r.check_seal());
  EXPECT_EQ(r.remaining(), 0u);

  bytes[5] ^= 1;
  ByteReader bad(bytes);
  bad.tag("ABCD");
  bad.u8();
  bad.u32();
  bad.u64();
  bad.f64();
  EXPECT_THROW(bad.check_seal(), FormatError);
}

TEST(ByteIo, LittleEndianLayout) {
  ByteWriter w;
  w.u32(0x01020304);
  EXPECT_EQ(w.buffer(), (std::vector<std::uint8_t>{4, 3, 2, 1}));
}

TEST(ByteIo, TruncationIsAnError) {
  std::vector<std::uint8_t> b{1, 2, 3};
  ByteReader r(b);
  EXPECT_THROW(r.u32(), FormatError);
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_EQ(u, b.uniform());
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
  Rng c(1);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(c.below(7), 7u);
  EXPECT_THROW(c.below(0), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double m = s / n, v = s2 / n - m * m;
  EXPECT_NEAR(m, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(v, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(Matrix, SelectRowsAndShapeChecks) {
  auto m = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(m.select_rows(idx), Matrix::from_rows({{5, 6}, {1, 2}}));
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Matrix::from_rows({{1, 2}, {3}}), std::invalid_argument);
}

TEST(Stats, BinaryEntropyAndCorrelations) {
  EXPECT_NEAR(binary_entropy(0.5), std::log(2.0), 1e-15);
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8}, z{4, 3, 2, 1};
  EXPECT_NEAR(pearson(x, y), 1.0, 1e-12);
  EXPECT_NEAR(spearman(x, z), -1.0, 1e-12);
  // Average ranks for ties.
  EXPECT_EQ(ranks(std::vector<double>{5, 1, 5}), (std::vector<double>{2.5, 1, 2.5}));
}

TEST(Stats, SigmoidIsStableAtExtremes) {
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(sigmoid(0.3), 1.0 / (1.0 + std::exp(-0.3)), 1e-15);
}
