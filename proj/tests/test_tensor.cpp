#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "synfoc/rng.hpp"
#include "synfoc/tensor.hpp"

using namespace synfoc;

TEST(Tensor, ShapeAndFill) {
  Tensor<float> t({2, 3, 4}, 1.5f);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.dim(1), 3u);
  for (float v : t.values()) EXPECT_EQ(v, 1.5f);
  EXPECT_EQ(to_string(t.shape()), "[2x3x4]");
}

TEST(Tensor, RejectsZeroExtentAndBadLength) {
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, At4MatchesRowMajorLayout) {
  Tensor<int> t({2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i);
  EXPECT_EQ(t.at(1, 2, 3, 4), 119);
  EXPECT_EQ(t.at(0, 1, 0, 0), 20);
  EXPECT_EQ(t.at(1, 0, 2, 1), 60 + 10 + 1);
}

TEST(Tensor, ItemNeedsOneElement) {
  EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor<double>({2}).item(), ShapeError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, RequireShapeAndRank) {
  EXPECT_NO_THROW(require_shape({1, 2}, {1, 2}, "x"));
  EXPECT_THROW(require_shape({1, 2}, {2, 1}, "x"), ShapeError);
  EXPECT_THROW(require_rank({1, 2}, 3, "x"), ShapeError);
}

TEST(TensorIo, HeaderAndLittleEndianPayload) {
  Tensor<float> t({1, 2}, std::vector<float>{1.0f, -2.0f});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  const std::string header = "TNSR v1 2 1 2\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  ASSERT_EQ(bytes.size(), header.size() + 8);
  // 1.0f = 0x3F800000, little-endian bytes 00 00 80 3F
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
  EXPECT_EQ(p[0], 0x00);
  EXPECT_EQ(p[1], 0x00);
  EXPECT_EQ(p[2], 0x80);
  EXPECT_EQ(p[3], 0x3F);
  // -2.0f = 0xC0000000
  EXPECT_EQ(p[7], 0xC0);
}

TEST(TensorIo, RoundTripRandomShapes) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Shape shape(static_cast<std::size_t>(uniform_int(rng, 1, 4)));
    for (auto& d : shape) d = static_cast<std::size_t>(uniform_int(rng, 1, 5));
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = static_cast<float>(normal(rng));
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(read_tensor<float>(ss), t);
  }
}

TEST(TensorIo, RejectsCorruptInput) {
  std::stringstream bad_magic("TNSX v1 1 2\n\0\0\0\0\0\0\0\0");
  EXPECT_THROW(read_tensor<float>(bad_magic), FormatError);
  std::stringstream truncated("TNSR v1 1 4\nabcd");
  EXPECT_THROW(read_tensor<float>(truncated), FormatError);
  std::stringstream zero_extent("TNSR v1 2 0 3\n");
  EXPECT_THROW(read_tensor<float>(zero_extent), FormatError);
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
  EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
  // SplitMix64 reference output for state 0 after one increment
  EXPECT_EQ(mix64(0), 0xE220A8397B1DCDAFull);
}
