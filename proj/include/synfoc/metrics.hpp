#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "synfoc/tensor.hpp"

namespace synfoc {

struct Pixel {
  int y = 0;
  int x = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Indicator (0/1) map of class `c` in an H x W label map.
inline LabelMap class_mask(const LabelMap& labels, std::size_t c) {
  LabelMap m(labels.shape(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == c ? 1 : 0;
  return m;
}

/// Per foreground class 2|A & B| / (|A| + |B|); both empty -> 1.
inline std::vector<double> dsc(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  require_shape(gt.shape(), pred.shape(), "dsc");
  std::vector<std::size_t> np(classes + 1, 0), ng(classes + 1, 0), both(classes + 1, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t a = std::min<std::size_t>(pred[i], classes), b = std::min<std::size_t>(gt[i], classes);
    ++np[a];
    ++ng[b];
    if (a == b) ++both[a];
  }
  std::vector<double> out(classes);
  for (std::size_t c = 1; c <= classes; ++c) {
    const std::size_t d = np[c] + ng[c];
    out[c - 1] = d == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / static_cast<double>(d);
  }
  return out;
}

/// Per foreground class |A & B| / |A | B|; both empty -> 1.
inline std::vector<double> jaccard(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  require_shape(gt.shape(), pred.shape(), "jaccard");
  std::vector<std::size_t> np(classes + 1, 0), ng(classes + 1, 0), both(classes + 1, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t a = std::min<std::size_t>(pred[i], classes), b = std::min<std::size_t>(gt[i], classes);
    ++np[a];
    ++ng[b];
    if (a == b) ++both[a];
  }
  std::vector<double> out(classes);
  for (std::size_t c = 1; c <= classes; ++c) {
    const std::size_t uni = np[c] + ng[c] - both[c];
    out[c - 1] = uni == 0 ? 1.0 : static_cast<double>(both[c]) / static_cast<double>(uni);
  }
  return out;
}

/// Foreground pixels with at least one background 4-neighbour; the frame border counts as background.
/// Points come out in raster order.
inline std::vector<Pixel> surface_extract(const LabelMap& mask) {
  require_rank(mask.shape(), 2, "surface_extract");
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  auto fg = [&](int y, int x) { return y >= 0 && x >= 0 && y < h && x < w && mask[static_cast<std::size_t>(y * w + x)] != 0; };
  std::vector<Pixel> out;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.push_back({y, x});
    }
  }
  return out;
}

namespace detail {

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher) over f, in place.
inline void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  int first = 0;
  while (first < n && f[static_cast<std::size_t>(first)] == inf) ++first;
  if (first == n) return;
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (int q = first + 1; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == inf) continue;
    double s;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + q * static_cast<double>(q)) -
           (f[static_cast<std::size_t>(p)] + p * static_cast<double>(p))) / (2.0 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k + 1)] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k + 1)] < q) ++k;
    const int p = v[static_cast<std::size_t>(k)];
    d[static_cast<std::size_t>(q)] = (q - p) * static_cast<double>(q - p) + f[static_cast<std::size_t>(p)];
  }
  f = d;
}

/// Exact squared Euclidean distance to the nearest seed pixel, H x W.
inline std::vector<double> squared_distance_map(const std::vector<Pixel>& seeds, int h, int w) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(static_cast<std::size_t>(h * w), inf);
  for (const auto& p : seeds) grid[static_cast<std::size_t>(p.y * w + p.x)] = 0.0;
  const int n = std::max(h, w);
  std::vector<double> f, d(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n + 1));
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int x = 0; x < w; ++x) {
    f.assign(static_cast<std::size_t>(h), inf);
    for (int y = 0; y < h; ++y) f[static_cast<std::size_t>(y)] = grid[static_cast<std::size_t>(y * w + x)];
    d.assign(static_cast<std::size_t>(h), inf);
    edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y * w + x)] = f[static_cast<std::size_t>(y)];
  }
  for (int y = 0; y < h; ++y) {
    f.assign(grid.begin() + y * w, grid.begin() + (y + 1) * w);
    d.assign(static_cast<std::size_t>(w), inf);
    edt_1d(f, d, v, z);
    std::copy(f.begin(), f.end(), grid.begin() + y * w);
  }
  return grid;
}

}  // namespace detail

/// 95th percentile with linear interpolation between order statistics.
inline double percentile95(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const double pos = 0.95 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

enum class SurfaceFlag { kOk, kOneEmpty, kBothEmpty };

struct SurfaceDistance {
  double hd95 = 0;
  double asd = 0;
  SurfaceFlag flag = SurfaceFlag::kOk;
};

/// Pooled directed nearest-neighbour distances (a -> b, then b -> a) on an H x W grid.
/// One empty surface reports the frame diagonal; two empty surfaces report 0. Both cases are flagged.
inline SurfaceDistance surface_distance(const std::vector<Pixel>& a, const std::vector<Pixel>& b, int h, int w) {
  if (a.empty() && b.empty()) return {0.0, 0.0, SurfaceFlag::kBothEmpty};
  if (a.empty() || b.empty()) {
    const double diag = std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
    return {diag, diag, SurfaceFlag::kOneEmpty};
  }
  const auto da = detail::squared_distance_map(a, h, w);
  const auto db = detail::squared_distance_map(b, h, w);
  std::vector<double> pooled;
  pooled.reserve(a.size() + b.size());
  for (const auto& p : a) pooled.push_back(std::sqrt(db[static_cast<std::size_t>(p.y * w + p.x)]));
  for (const auto& p : b) pooled.push_back(std::sqrt(da[static_cast<std::size_t>(p.y * w + p.x)]));
  double total = 0;
  for (double d : pooled) total += d;
  SurfaceDistance out;
  out.asd = total / static_cast<double>(pooled.size());
  out.hd95 = percentile95(std::move(pooled));
  return out;
}

inline double hd95(const std::vector<Pixel>& a, const std::vector<Pixel>& b, int h, int w) {
  return surface_distance(a, b, h, w).hd95;
}

inline double asd(const std::vector<Pixel>& a, const std::vector<Pixel>& b, int h, int w) {
  return surface_distance(a, b, h, w).asd;
}

struct ClassMetrics {
  double dsc = 0;
  double jaccard = 0;
  double hd95 = 0;
  double asd = 0;
};

struct SampleMetrics {
  std::vector<ClassMetrics> per_class;
  std::size_t flagged = 0;  // classes whose surface distance used a sentinel
};

inline SampleMetrics evaluate_sample(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  require_rank(pred.shape(), 2, "evaluate_sample");
  const int h = static_cast<int>(pred.dim(0)), w = static_cast<int>(pred.dim(1));
  SampleMetrics m;
  const auto d = dsc(pred, gt, classes);
  const auto j = jaccard(pred, gt, classes);
  for (std::size_t c = 1; c <= classes; ++c) {
    const auto sd = surface_distance(surface_extract(class_mask(pred, c)), surface_extract(class_mask(gt, c)), h, w);
    if (sd.flag != SurfaceFlag::kOk) ++m.flagged;
    m.per_class.push_back({d[c - 1], j[c - 1], sd.hd95, sd.asd});
  }
  return m;
}

struct DomainMetrics {
  int domain = 0;
  std::size_t samples = 0;
  std::size_t flagged = 0;
  std::vector<ClassMetrics> per_class;  // averaged over samples
  ClassMetrics mean;                    // averaged over classes
};

struct MetricReport {
  std::vector<DomainMetrics> domains;
  ClassMetrics mean;  // averaged over domains
  std::size_t flagged = 0;
};

/// Accumulates per-sample metrics into per-domain and cross-domain means.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t classes) : classes_(classes) {}

  void add(int domain, const LabelMap& pred, const LabelMap& gt) { add(domain, evaluate_sample(pred, gt, classes_)); }

  void add(int domain, const SampleMetrics& m) {
    auto& acc = domains_[domain];
    if (acc.per_class.empty()) acc.per_class.resize(classes_);
    for (std::size_t c = 0; c < classes_; ++c) {
      acc.per_class[c].dsc += m.per_class[c].dsc;
      acc.per_class[c].jaccard += m.per_class[c].jaccard;
      acc.per_class[c].hd95 += m.per_class[c].hd95;
      acc.per_class[c].asd += m.per_class[c].asd;
    }
    ++acc.samples;
    acc.flagged += m.flagged;
  }

  MetricReport report() const {
    MetricReport r;
    for (const auto& [domain, acc] : domains_) {
      DomainMetrics d;
      d.domain = domain;
      d.samples = acc.samples;
      d.flagged = acc.flagged;
      const double inv = 1.0 / static_cast<double>(acc.samples);
      for (const auto& c : acc.per_class) {
        ClassMetrics avg{c.dsc * inv, c.jaccard * inv, c.hd95 * inv, c.asd * inv};
        d.per_class.push_back(avg);
        d.mean.dsc += avg.dsc / static_cast<double>(classes_);
        d.mean.jaccard += avg.jaccard / static_cast<double>(classes_);
        d.mean.hd95 += avg.hd95 / static_cast<double>(classes_);
        d.mean.asd += avg.asd / static_cast<double>(classes_);
      }
      r.flagged += d.flagged;
      r.domains.push_back(std::move(d));
    }
    const double nd = static_cast<double>(r.domains.size());
    for (const auto& d : r.domains) {
      r.mean.dsc += d.mean.dsc / nd;
      r.mean.jaccard += d.mean.jaccard / nd;
      r.mean.hd95 += d.mean.hd95 / nd;
      r.mean.asd += d.mean.asd / nd;
    }
    return r;
  }

 private:
  struct Acc {
    std::size_t samples = 0;
    std::size_t flagged = 0;
    std::vector<ClassMetrics> per_class;
  };
  std::size_t classes_;
  std::map<int, Acc> domains_;
};

}  // namespace synfoc
