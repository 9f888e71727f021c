#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synfoc/models.hpp"
#include "synfoc/rng.hpp"
#include "synfoc/tensor.hpp"

namespace synfoc {

/// Acquisition characteristics of one data center.
struct DomainSpec {
  double gamma = 1.0;
  double contrast = 1.0;
  bool invert = false;
  double bias_amp = 0.0;     // amplitude of the smooth multiplicative field
  double noise_sigma = 0.0;  // additive Gaussian noise
  double texture_freq = 4.0; // background texture cycles per frame

  void validate() const {
    if (!(gamma > 0) || !(contrast > 0) || !(noise_sigma >= 0) || !(bias_amp >= 0)) {
      throw ConfigError("invalid domain spec: gamma and contrast must be positive, noise and bias nonnegative");
    }
  }
};

/// Scene content that does not depend on the acquiring domain.
struct RenderSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t distractors = 1;     // square clutter objects, background in experiment labels
  bool label_distractors = false;  // objectness labelling (pretraining corpus)
};

struct Sample {
  Tensor<float> image;  // 1 x H x W in [0, 1]
  LabelMap label;       // H x W, values in {0..C}
  int domain_id = 0;
};

/// Geometry of one scene, drawn before any domain-specific randomness.
struct Scene {
  struct Blob {
    double cx, cy, ra, rb, theta;
    double h3, p3, h5, p5;  // angular harmonic wobble
    std::uint8_t label;
    double intensity;
  };
  struct Square {
    double cx, cy, half, theta, intensity;
  };
  std::vector<Blob> blobs;
  std::vector<Square> squares;
  double tex_theta = 0, tex_phase1 = 0, tex_phase2 = 0;
  std::size_t height = 64, width = 64;
  bool label_squares = false;
};

inline Scene draw_scene(Rng& rng, std::size_t classes, const RenderSpec& spec) {
  if (classes < 1 || classes > 2) throw ConfigError("classes must be 1 or 2");
  Scene s;
  s.height = spec.height;
  s.width = spec.width;
  s.label_squares = spec.label_distractors;
  const double size = static_cast<double>(std::min(spec.height, spec.width));
  s.tex_theta = uniform(rng, 0, std::numbers::pi);
  s.tex_phase1 = uniform(rng, 0, 2 * std::numbers::pi);
  s.tex_phase2 = uniform(rng, 0, 2 * std::numbers::pi);
  for (std::size_t c = 1; c <= classes; ++c) {
    Scene::Blob b{};
    const double rmax = c == 1 ? 0.19 : 0.12;
    b.cx = uniform(rng, 0.3, 0.7) * static_cast<double>(spec.width);
    b.cy = uniform(rng, 0.3, 0.7) * static_cast<double>(spec.height);
    b.ra = uniform(rng, 0.09, rmax) * size;
    b.rb = uniform(rng, 0.09, rmax) * size;
    b.theta = uniform(rng, 0, std::numbers::pi);
    b.h3 = uniform(rng, 0, 0.12);
    b.p3 = uniform(rng, 0, 2 * std::numbers::pi);
    b.h5 = uniform(rng, 0, 0.06);
    b.p5 = uniform(rng, 0, 2 * std::numbers::pi);
    b.label = static_cast<std::uint8_t>(c);
    b.intensity = c == 1 ? 0.75 : 0.5;
    s.blobs.push_back(b);
  }
  for (std::size_t d = 0; d < spec.distractors; ++d) {
    Scene::Square q{};
    q.cx = uniform(rng, 0.15, 0.85) * static_cast<double>(spec.width);
    q.cy = uniform(rng, 0.15, 0.85) * static_cast<double>(spec.height);
    q.half = uniform(rng, 0.05, 0.09) * size;
    q.theta = uniform(rng, 0, std::numbers::pi / 2);
    q.intensity = 0.72;
    s.squares.push_back(q);
  }
  return s;
}

namespace detail {

/// Signed "inside-ness" of a blob: positive inside, in pixels (approximately).
inline double blob_field(const Scene::Blob& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  const double ang = std::atan2(v, u);
  const double wobble = 1.0 + b.h3 * std::sin(3 * ang + b.p3) + b.h5 * std::sin(5 * ang + b.p5);
  const double r = std::sqrt((u / b.ra) * (u / b.ra) + (v / b.rb) * (v / b.rb));
  return (wobble - r) * std::min(b.ra, b.rb);
}

inline double square_field(const Scene::Square& q, double x, double y) {
  const double dx = x - q.cx, dy = y - q.cy;
  const double c = std::cos(q.theta), s = std::sin(q.theta);
  const double u = std::abs(c * dx + s * dy), v = std::abs(-s * dx + c * dy);
  return q.half - std::max(u, v);
}

inline double soft_edge(double field) { return 1.0 / (1.0 + std::exp(-field / 0.6)); }

}  // namespace detail

/// Noise-free rendering: textured background, squares, then blobs (later objects on top).
inline Tensor<float> render_clean(const Scene& s, double texture_freq) {
  Tensor<float> img({1, s.height, s.width});
  const double ct = std::cos(s.tex_theta), st = std::sin(s.tex_theta);
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double u = (ct * px + st * py) / static_cast<double>(s.width);
      const double v = (-st * px + ct * py) / static_cast<double>(s.height);
      double val = 0.22 + 0.05 * std::sin(2 * std::numbers::pi * texture_freq * u + s.tex_phase1) +
                   0.03 * std::sin(2 * std::numbers::pi * texture_freq * 1.7 * v + s.tex_phase2);
      for (const auto& q : s.squares) {
        const double a = detail::soft_edge(detail::square_field(q, px, py));
        val = val * (1 - a) + q.intensity * a;
      }
      for (const auto& b : s.blobs) {
        const double a = detail::soft_edge(detail::blob_field(b, px, py));
        val = val * (1 - a) + b.intensity * a;
      }
      img[y * s.width + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  return img;
}

inline LabelMap rasterize_labels(const Scene& s) {
  LabelMap lab({s.height, s.width}, 0);
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      std::uint8_t v = 0;
      for (const auto& q : s.squares) {
        if (detail::square_field(q, px, py) >= 0) v = s.label_squares ? 1 : 0;
      }
      for (const auto& b : s.blobs) {
        if (detail::blob_field(b, px, py) >= 0) v = b.label;
      }
      lab[y * s.width + x] = v;
    }
  }
  return lab;
}

/// gamma -> contrast -> optional inversion -> bias field -> Gaussian noise -> clamp.
/// Identity settings leave the corresponding step out entirely.
inline void apply_domain(Tensor<float>& img, const DomainSpec& d, Rng& rng) {
  d.validate();
  const std::size_t h = img.dim(1), w = img.dim(2);
  const double fa = uniform(rng, -1.5, 1.5), fb = uniform(rng, -1.5, 1.5), fp = uniform(rng, 0, 2 * std::numbers::pi);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double v = img[y * w + x];
      if (d.gamma != 1.0) v = std::pow(v, d.gamma);
      if (d.contrast != 1.0) v = (v - 0.5) * d.contrast + 0.5;
      if (d.invert) v = 1.0 - v;
      if (d.bias_amp != 0.0) {
        const double u = static_cast<double>(x) / static_cast<double>(w), t = static_cast<double>(y) / static_cast<double>(h);
        v *= 1.0 + d.bias_amp * std::sin(2 * std::numbers::pi * (fa * u + fb * t) + fp);
      }
      img[y * w + x] = static_cast<float>(v);
    }
  }
  if (d.noise_sigma > 0) {
    for (auto& v : img.values()) v = static_cast<float>(v + normal(rng, 0.0, d.noise_sigma));
  }
  for (auto& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
}

inline Sample generate_sample(Rng& rng, const DomainSpec& domain, std::size_t classes, const RenderSpec& spec = {},
                              int domain_id = 0) {
  Scene scene = draw_scene(rng, classes, spec);
  Sample s;
  s.image = render_clean(scene, domain.texture_freq);
  s.label = rasterize_labels(scene);
  s.domain_id = domain_id;
  apply_domain(s.image, domain, rng);
  return s;
}

/// Experiment centers. Domain 2 is deliberately severe (inverted, strong bias field).
inline std::vector<DomainSpec> experiment_domains(std::size_t k) {
  std::vector<DomainSpec> out = {
      {1.0, 1.0, false, 0.10, 0.02, 3.0},
      {1.7, 0.65, false, 0.30, 0.05, 6.0},
      {0.8, 1.1, true, 0.50, 0.04, 9.0},
  };
  for (std::size_t i = out.size(); i < k; ++i) {
    const double f = static_cast<double>(i);
    out.push_back({0.7 + 0.15 * std::fmod(f * 1.618, 6.0), 0.6 + 0.1 * std::fmod(f * 2.3, 5.0), i % 2 == 1,
                   0.1 + 0.05 * std::fmod(f, 7.0), 0.02 + 0.01 * std::fmod(f, 4.0), 3.0 + std::fmod(f * 1.3, 7.0)});
  }
  out.resize(k);
  return out;
}

/// Centers used only for the foundation model's pretraining corpus.
inline std::vector<DomainSpec> pretraining_domains() {
  return {
      {1.3, 1.2, false, 0.20, 0.03, 4.0},
      {0.7, 0.8, true, 0.35, 0.03, 7.0},
      {1.9, 0.55, false, 0.45, 0.05, 5.0},
  };
}

// ---------------------------------------------------------------------------
// Augmentation

struct WeakAugParams {
  bool flip = false;
  int dx = 0;
  int dy = 0;
};

inline WeakAugParams draw_weak(Rng& rng, int max_shift = 4) {
  WeakAugParams p;
  p.flip = bernoulli(rng, 0.5);
  p.dx = static_cast<int>(uniform_int(rng, -max_shift, max_shift));
  p.dy = static_cast<int>(uniform_int(rng, -max_shift, max_shift));
  return p;
}

/// Horizontal flip then integer translation (zero fill); the same map moves image and label.
inline Sample weak_augment(const Sample& s, const WeakAugParams& p) {
  const std::size_t h = s.label.dim(0), w = s.label.dim(1);
  Sample out;
  out.image = Tensor<float>(s.image.shape(), 0.0f);
  out.label = LabelMap(s.label.shape(), 0);
  out.domain_id = s.domain_id;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::ptrdiff_t sx0 = static_cast<std::ptrdiff_t>(x) - p.dx;
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) - p.dy;
      if (sx0 < 0 || sy < 0 || sx0 >= static_cast<std::ptrdiff_t>(w) || sy >= static_cast<std::ptrdiff_t>(h)) continue;
      const std::size_t sx = p.flip ? w - 1 - static_cast<std::size_t>(sx0) : static_cast<std::size_t>(sx0);
      const std::size_t src = static_cast<std::size_t>(sy) * w + sx;
      out.image[y * w + x] = s.image[src];
      out.label[y * w + x] = s.label[src];
    }
  }
  return out;
}

inline Sample weak_augment(const Sample& s, Rng& rng) { return weak_augment(s, draw_weak(rng)); }

struct StrongAugParams {
  double brightness = 0.0;  // additive shift
  double contrast = 0.0;    // multiplicative factor is 1 + contrast, about the image mean
  double blur_sigma = 0.0;  // 3x3 Gaussian; 0 disables
  double noise_sigma = 0.0;
  std::size_t cut_y = 0, cut_x = 0, cut_h = 0, cut_w = 0;  // cut_h * cut_w == 0 disables
  std::uint64_t noise_seed = 0;
};

inline StrongAugParams draw_strong(Rng& rng, std::size_t h, std::size_t w) {
  StrongAugParams p;
  p.brightness = uniform(rng, -0.15, 0.15);
  p.contrast = uniform(rng, -0.3, 0.3);
  p.blur_sigma = bernoulli(rng, 0.5) ? uniform(rng, 0.3, 1.0) : 0.0;
  p.noise_sigma = uniform(rng, 0.0, 0.05);
  p.cut_h = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(h / 8), static_cast<std::int64_t>(h / 3)));
  p.cut_w = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(w / 8), static_cast<std::int64_t>(w / 3)));
  p.cut_y = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(h - p.cut_h)));
  p.cut_x = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(w - p.cut_w)));
  p.noise_seed = rng();
  return p;
}

/// Intensity-only perturbation of a 1 x H x W image: brightness/contrast jitter, 3x3 blur, Gaussian noise, clamp, then one cutout rectangle filled with the image mean.
inline Tensor<float> strong_augment(const Tensor<float>& image, const StrongAugParams& p) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor<float> out = image;
  if (p.contrast != 0.0 || p.brightness != 0.0) {
    double mean = 0;
    for (float v : out.values()) mean += v;
    mean /= static_cast<double>(image.size());
    for (auto& v : out.values()) v = static_cast<float>((v - mean) * (1.0 + p.contrast) + mean + p.brightness);
  }
  if (p.blur_sigma > 0) {
    const double e = std::exp(-1.0 / (2 * p.blur_sigma * p.blur_sigma));
    const double k[3] = {e / (1 + 2 * e), 1 / (1 + 2 * e), e / (1 + 2 * e)};
    Tensor<float> tmp = out;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        for (int d = -1; d <= 1; ++d) {
          const std::size_t xx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + d, 0, static_cast<std::ptrdiff_t>(w) - 1));
          acc += k[d + 1] * out[y * w + xx];
        }
        tmp[y * w + x] = static_cast<float>(acc);
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        for (int d = -1; d <= 1; ++d) {
          const std::size_t yy = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) + d, 0, static_cast<std::ptrdiff_t>(h) - 1));
          acc += k[d + 1] * tmp[yy * w + x];
        }
        out[y * w + x] = static_cast<float>(acc);
      }
    }
  }
  if (p.noise_sigma > 0) {
    Rng nrng(p.noise_seed);
    for (auto& v : out.values()) v = static_cast<float>(v + normal(nrng, 0.0, p.noise_sigma));
  }
  for (auto& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
  if (p.cut_h > 0 && p.cut_w > 0) {
    double mean = 0;
    for (float v : out.values()) mean += v;
    const float fill = static_cast<float>(mean / static_cast<double>(out.size()));
    for (std::size_t y = p.cut_y; y < p.cut_y + p.cut_h && y < h; ++y) {
      for (std::size_t x = p.cut_x; x < p.cut_x + p.cut_w && x < w; ++x) out[y * w + x] = fill;
    }
  }
  return out;
}

inline Tensor<float> strong_augment(const Tensor<float>& image, Rng& rng) {
  return strong_augment(image, draw_strong(rng, image.dim(1), image.dim(2)));
}

// ---------------------------------------------------------------------------
// Splits and datasets

struct SplitConfig {
  std::uint64_t seed = 20240601;
  std::size_t domains = 3;
  std::size_t labeled = 10;
  std::size_t unlabeled = 300;
  std::size_t test_per_domain = 60;
  std::size_t classes = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t distractors = 1;
};

enum class Split { kLabeled, kUnlabeled, kTest };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kLabeled: return "labeled";
    case Split::kUnlabeled: return "unlabeled";
    default: return "test";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::kLabeled;
  if (s == "unlabeled") return Split::kUnlabeled;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "'");
}

struct SampleRecord {
  std::size_t id = 0;
  int domain = 0;
  Split split = Split::kTest;
  std::uint64_t seed = 0;
};

struct SplitManifest {
  SplitConfig config;
  std::vector<DomainSpec> domains;
  std::vector<SampleRecord> records;  // records[i].id == i

  std::vector<std::size_t> ids(Split split) const {
    std::vector<std::size_t> out;
    for (const auto& r : records) {
      if (r.split == split) out.push_back(r.id);
    }
    return out;
  }

  std::vector<std::size_t> test_ids(int domain) const {
    std::vector<std::size_t> out;
    for (const auto& r : records) {
      if (r.split == Split::kTest && r.domain == domain) out.push_back(r.id);
    }
    return out;
  }
};

/// Labeled ids come from domain 0 only; unlabeled ids are a balanced, shuffled mixture of all
/// domains; each domain also gets its own test set. Every sample carries its own generator seed.
inline SplitManifest build_split(const SplitConfig& cfg) {
  if (cfg.domains < 2) throw ConfigError("need at least 2 experiment domains");
  if (cfg.labeled == 0 || cfg.labeled >= cfg.unlabeled) {
    throw ConfigError("labeled count must be positive and smaller than the unlabeled count");
  }
  if (cfg.test_per_domain == 0) throw ConfigError("test_per_domain must be positive");
  if (cfg.height % 8 || cfg.width % 8) throw ConfigError("height and width must be multiples of 8");
  SplitManifest m;
  m.config = cfg;
  m.domains = experiment_domains(cfg.domains);
  auto add = [&](int domain, Split split) {
    SampleRecord r;
    r.id = m.records.size();
    r.domain = domain;
    r.split = split;
    r.seed = derive_seed(cfg.seed, {0x5A3D, r.id});
    m.records.push_back(r);
  };
  for (std::size_t i = 0; i < cfg.labeled; ++i) add(0, Split::kLabeled);
  std::vector<int> mix(cfg.unlabeled);
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = static_cast<int>(i % cfg.domains);
  Rng shuffle_rng = make_rng(cfg.seed, {0x5B11});
  std::shuffle(mix.begin(), mix.end(), shuffle_rng);
  for (int d : mix) add(d, Split::kUnlabeled);
  for (std::size_t d = 0; d < cfg.domains; ++d) {
    for (std::size_t i = 0; i < cfg.test_per_domain; ++i) add(static_cast<int>(d), Split::kTest);
  }
  return m;
}

struct Dataset {
  SplitManifest manifest;
  std::vector<Sample> samples;  // indexed by record id

  std::size_t classes() const noexcept { return manifest.config.classes; }
  std::size_t height() const noexcept { return manifest.config.height; }
  std::size_t width() const noexcept { return manifest.config.width; }
  std::size_t domain_count() const noexcept { return manifest.config.domains; }
};

inline RenderSpec render_spec(const SplitConfig& cfg) {
  return RenderSpec{cfg.height, cfg.width, cfg.distractors, false};
}

inline Dataset generate_dataset(const SplitConfig& cfg) {
  Dataset ds;
  ds.manifest = build_split(cfg);
  ds.samples.reserve(ds.manifest.records.size());
  const RenderSpec spec = render_spec(cfg);
  for (const auto& r : ds.manifest.records) {
    Rng rng(r.seed);
    ds.samples.push_back(generate_sample(rng, ds.manifest.domains[static_cast<std::size_t>(r.domain)], cfg.classes,
                                         spec, r.domain));
  }
  return ds;
}

/// Pretraining corpus for the foundation model: pretraining domains only, objectness labels
/// (clutter squares count as foreground), seeds from a stream disjoint from experiment samples.
inline std::vector<Sample> generate_pretraining_corpus(std::uint64_t seed, std::size_t count, std::size_t classes,
                                                       std::size_t height, std::size_t width,
                                                       std::size_t distractors, std::uint64_t stream = 0x9E7A) {
  if (count == 0) throw ConfigError("pretraining corpus must not be empty");
  const auto domains = pretraining_domains();
  RenderSpec spec{height, width, distractors, true};
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, {stream, i});
    const std::size_t d = i % domains.size();
    out.push_back(generate_sample(rng, domains[d], classes, spec, -1 - static_cast<int>(d)));
  }
  return out;
}

namespace detail {

inline std::string sample_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", id);
  return buf;
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& c = ds.manifest.config;
  nlohmann::json j;
  j["format"] = "synfoc-dataset v1";
  j["seed"] = c.seed;
  j["classes"] = c.classes;
  j["height"] = c.height;
  j["width"] = c.width;
  j["labeled"] = c.labeled;
  j["unlabeled"] = c.unlabeled;
  j["test_per_domain"] = c.test_per_domain;
  j["distractors"] = c.distractors;
  j["domains"] = nlohmann::json::array();
  for (const auto& d : ds.manifest.domains) {
    j["domains"].push_back({{"gamma", d.gamma},
                            {"contrast", d.contrast},
                            {"invert", d.invert},
                            {"bias_amp", d.bias_amp},
                            {"noise_sigma", d.noise_sigma},
                            {"texture_freq", d.texture_freq}});
  }
  j["samples"] = nlohmann::json::array();
  for (const auto& r : ds.manifest.records) {
    const std::string stem = detail::sample_stem(r.id);
    j["samples"].push_back({{"id", r.id},
                            {"domain", r.domain},
                            {"split", to_string(r.split)},
                            {"seed", r.seed},
                            {"image", "img_" + stem + ".tnsr"},
                            {"label", "lbl_" + stem + ".u8"}});
    const auto& s = ds.samples[r.id];
    std::ofstream img(dir / ("img_" + stem + ".tnsr"), std::ios::binary);
    write_tensor(img, s.image);
    std::ofstream lbl(dir / ("lbl_" + stem + ".u8"), std::ios::binary);
    lbl.write(reinterpret_cast<const char*>(s.label.data()), static_cast<std::streamsize>(s.label.size()));
    if (!img || !lbl) throw FormatError("failed writing sample " + stem);
  }
  std::ofstream(dir / "manifest.json") << j.dump(1) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("no dataset manifest in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(mf);
  if (j.value("format", "") != "synfoc-dataset v1") throw FormatError("unsupported dataset format in " + dir.string());
  Dataset ds;
  auto& c = ds.manifest.config;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.classes = j.at("classes").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.labeled = j.at("labeled").get<std::size_t>();
  c.unlabeled = j.at("unlabeled").get<std::size_t>();
  c.test_per_domain = j.at("test_per_domain").get<std::size_t>();
  c.distractors = j.value("distractors", std::size_t{1});
  for (const auto& d : j.at("domains")) {
    ds.manifest.domains.push_back({d.at("gamma").get<double>(), d.at("contrast").get<double>(),
                                   d.at("invert").get<bool>(), d.at("bias_amp").get<double>(),
                                   d.at("noise_sigma").get<double>(), d.at("texture_freq").get<double>()});
  }
  c.domains = ds.manifest.domains.size();
  for (const auto& s : j.at("samples")) {
    SampleRecord r;
    r.id = s.at("id").get<std::size_t>();
    r.domain = s.at("domain").get<int>();
    r.split = parse_split(s.at("split").get<std::string>());
    r.seed = s.at("seed").get<std::uint64_t>();
    if (r.id != ds.manifest.records.size()) throw FormatError("dataset sample ids must be dense and ordered");
    ds.manifest.records.push_back(r);
    Sample sample;
    std::ifstream img(dir / s.at("image").get<std::string>(), std::ios::binary);
    if (!img) throw FormatError("missing image file for sample " + std::to_string(r.id));
    sample.image = read_tensor<float>(img);
    require_shape(sample.image.shape(), Shape{1, c.height, c.width}, "dataset image");
    sample.label = LabelMap({c.height, c.width});
    std::ifstream lbl(dir / s.at("label").get<std::string>(), std::ios::binary);
    lbl.read(reinterpret_cast<char*>(sample.label.data()), static_cast<std::streamsize>(sample.label.size()));
    if (static_cast<std::size_t>(lbl.gcount()) != sample.label.size()) {
      throw FormatError("truncated label file for sample " + std::to_string(r.id));
    }
    sample.domain_id = r.domain;
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace synfoc
