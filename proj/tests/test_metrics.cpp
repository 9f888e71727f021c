#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "synfoc/metrics.hpp"
#include "synfoc/rng.hpp"

using namespace synfoc;

namespace {

/// Random blobby mask: a few filled discs, sometimes empty.
LabelMap random_mask(Rng& rng, int h, int w, bool allow_empty) {
  LabelMap m({static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, 0);
  const int discs = static_cast<int>(uniform_int(rng, allow_empty ? 0 : 1, 3));
  for (int d = 0; d < discs; ++d) {
    const double cy = uniform(rng, 0, h), cx = uniform(rng, 0, w), r = uniform(rng, 1.0, 5.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if ((y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx) <= r * r) m[static_cast<std::size_t>(y * w + x)] = 1;
      }
    }
  }
  if (!allow_empty && std::count(m.values().begin(), m.values().end(), 1) == 0) m[0] = 1;
  return m;
}

std::vector<Pixel> oracle_surface(const LabelMap& m, int h, int w) {
  auto at = [&](int y, int x) { return y >= 0 && x >= 0 && y < h && x < w && m[static_cast<std::size_t>(y * w + x)]; };
  std::vector<Pixel> out;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))) out.push_back({y, x});
    }
  }
  return out;
}

double nearest(const Pixel& p, const std::vector<Pixel>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : set) {
    const double dy = p.y - q.y, dx = p.x - q.x;
    best = std::min(best, std::sqrt(dy * dy + dx * dx));
  }
  return best;
}

/// All-pairs reference: pooled directed distances, linear-interpolated 95th percentile, mean.
std::pair<double, double> oracle_hd95_asd(const std::vector<Pixel>& a, const std::vector<Pixel>& b) {
  std::vector<double> d;
  for (const auto& p : a) d.push_back(nearest(p, b));
  for (const auto& p : b) d.push_back(nearest(p, a));
  double sum = 0;
  for (double v : d) sum += v;
  std::sort(d.begin(), d.end());
  const double rank = 0.95 * static_cast<double>(d.size() - 1);
  const std::size_t i = static_cast<std::size_t>(rank);
  const double hd = i + 1 < d.size() ? d[i] + (rank - static_cast<double>(i)) * (d[i + 1] - d[i]) : d[i];
  return {hd, sum / static_cast<double>(d.size())};
}

}  // namespace

TEST(SurfaceDistance, MatchesAllPairsOracle) {
  Rng rng(2024);
  for (int c = 0; c < 50; ++c) {
    const LabelMap a = random_mask(rng, 16, 16, false), b = random_mask(rng, 16, 16, false);
    const auto sa = surface_extract(a), sb = surface_extract(b);
    ASSERT_EQ(sa, oracle_surface(a, 16, 16));
    ASSERT_EQ(sb, oracle_surface(b, 16, 16));
    const auto [hd, as] = oracle_hd95_asd(sa, sb);
    const auto got = surface_distance(sa, sb, 16, 16);
    EXPECT_EQ(got.hd95, hd) << "pair " << c;
    EXPECT_EQ(got.asd, as) << "pair " << c;
    EXPECT_EQ(got.flag, SurfaceFlag::kOk);
  }
}

TEST(SurfaceDistance, DistanceMapMatchesBruteForceOnLargerFrames) {
  Rng rng(5);
  for (int c = 0; c < 20; ++c) {
    const int h = static_cast<int>(uniform_int(rng, 5, 40)), w = static_cast<int>(uniform_int(rng, 5, 40));
    std::vector<Pixel> seeds;
    for (int k = 0; k < 1 + c % 6; ++k) {
      seeds.push_back({static_cast<int>(uniform_int(rng, 0, h - 1)), static_cast<int>(uniform_int(rng, 0, w - 1))});
    }
    const auto d = detail::squared_distance_map(seeds, h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double ref = nearest({y, x}, seeds);
        ASSERT_EQ(d[static_cast<std::size_t>(y * w + x)], std::round(ref * ref));
      }
    }
  }
}

TEST(SurfaceDistance, EmptyCasesAreFlagged) {
  const std::vector<Pixel> one = {{3, 4}};
  const auto both = surface_distance({}, {}, 16, 16);
  EXPECT_EQ(both.flag, SurfaceFlag::kBothEmpty);
  EXPECT_EQ(both.hd95, 0.0);
  const auto single = surface_distance(one, {}, 16, 16);
  EXPECT_EQ(single.flag, SurfaceFlag::kOneEmpty);
  EXPECT_DOUBLE_EQ(single.hd95, std::sqrt(512.0));
  EXPECT_EQ(hd95(one, one, 16, 16), 0.0);
}

TEST(SurfaceDistance, ShiftedSquareByHand) {
  LabelMap a({8, 8}, 0), b({8, 8}, 0);
  for (int y = 2; y < 5; ++y) {
    for (int x = 2; x < 5; ++x) {
      a[static_cast<std::size_t>(y * 8 + x)] = 1;
      b[static_cast<std::size_t>(y * 8 + x + 2)] = 1;
    }
  }
  // 8 border pixels each; directed distances per side: 3 at 0, 2 at 1, 3 at 2.
  EXPECT_DOUBLE_EQ(asd(surface_extract(a), surface_extract(b), 8, 8), (2 * 1.0 + 3 * 2.0) / 8.0);
  EXPECT_DOUBLE_EQ(hd95(surface_extract(a), surface_extract(b), 8, 8), 2.0);
}

TEST(Overlap, DiceJaccardIdentity) {
  Rng rng(9);
  for (int c = 0; c < 200; ++c) {
    LabelMap p({12, 12}), g({12, 12});
    for (auto& v : p.values()) v = static_cast<std::uint8_t>(uniform_int(rng, 0, 2));
    for (auto& v : g.values()) v = static_cast<std::uint8_t>(uniform_int(rng, 0, 2));
    const auto d = dsc(p, g, 2), j = jaccard(p, g, 2);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(d[k], 2 * j[k] / (1 + j[k]), 1e-12);
  }
}

TEST(Overlap, HandCountsAndEmptyConvention) {
  const LabelMap p({2, 4}, std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0, 0});
  const LabelMap g({2, 4}, std::vector<std::uint8_t>{0, 1, 1, 1, 0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(dsc(p, g, 1)[0], 2.0 * 2 / 6);
  EXPECT_DOUBLE_EQ(jaccard(p, g, 1)[0], 2.0 / 4);
  const LabelMap z({2, 4}, 0);
  EXPECT_DOUBLE_EQ(dsc(z, z, 1)[0], 1.0);
  EXPECT_DOUBLE_EQ(dsc(z, g, 1)[0], 0.0);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile95({1, 2, 3, 4, 5}), 4.8);
  EXPECT_DOUBLE_EQ(percentile95({7}), 7.0);
}

TEST(Accumulator, DomainAndClassMeans) {
  MetricAccumulator acc(1);
  const LabelMap g({4, 4}, std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0});
  const LabelMap z({4, 4}, 0);
  acc.add(0, g, g);
  acc.add(0, z, g);
  acc.add(1, g, g);
  const auto r = acc.report();
  ASSERT_EQ(r.domains.size(), 2u);
  EXPECT_DOUBLE_EQ(r.domains[0].mean.dsc, 0.5);
  EXPECT_EQ(r.domains[0].flagged, 1u);
  EXPECT_DOUBLE_EQ(r.domains[1].mean.dsc, 1.0);
  EXPECT_DOUBLE_EQ(r.mean.dsc, 0.75);
  EXPECT_EQ(r.flagged, 1u);
}
