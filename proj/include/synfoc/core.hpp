#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "synfoc/autodiff.hpp"
#include "synfoc/models.hpp"
#include "synfoc/rng.hpp"

namespace synfoc {

// ---------------------------------------------------------------------------
// Strategies

enum class Strategy {
  kSynFoC,           // alpha = phi_self * phi_mut, with consensus-divergence regularization
  kStandaloneConv,   // conventional model with its own teacher only
  kStandaloneFound,  // foundation model with its own teacher only
  kConstant,         // alpha = 0.5
  kCps,              // alpha = 0
  kLinear,           // alpha = t / t_max
  kSelfOnly,         // alpha = phi_self
  kMutualOnly,       // alpha = phi_mut
};

inline const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all = {Strategy::kSynFoC,   Strategy::kStandaloneConv, Strategy::kStandaloneFound,
                                            Strategy::kConstant, Strategy::kCps,            Strategy::kLinear,
                                            Strategy::kSelfOnly, Strategy::kMutualOnly};
  return all;
}

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kSynFoC: return "synfoc";
    case Strategy::kStandaloneConv: return "standalone-conv";
    case Strategy::kStandaloneFound: return "standalone-found";
    case Strategy::kConstant: return "constant";
    case Strategy::kCps: return "cps";
    case Strategy::kLinear: return "linear";
    case Strategy::kSelfOnly: return "self-only";
    case Strategy::kMutualOnly: return "mutual-only";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (auto st : all_strategies()) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown strategy '" + s + "'");
}

inline bool uses_conventional(Strategy s) { return s != Strategy::kStandaloneFound; }
inline bool uses_foundation(Strategy s) { return s != Strategy::kStandaloneConv; }
inline bool is_synergistic(Strategy s) { return uses_conventional(s) && uses_foundation(s); }

// ---------------------------------------------------------------------------
// Copy-Paste

/// Binary H x W map with exactly one axis-aligned rectangle of ones (possibly empty).
struct PasteMask {
  std::size_t height = 0, width = 0;
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;

  static PasteMask rectangle(std::size_t height, std::size_t width, std::size_t y0, std::size_t x0, std::size_t h,
                             std::size_t w) {
    if (height == 0 || width == 0) throw ShapeError("paste mask: degenerate frame");
    if (y0 + h > height || x0 + w > width) throw ShapeError("paste mask: rectangle leaves the frame");
    return {height, width, y0, x0, h, w};
  }

  bool contains(std::size_t y, std::size_t x) const noexcept { return y >= y0 && y < y0 + h && x >= x0 && x < x0 + w; }
  double area_fraction() const noexcept {
    return static_cast<double>(h * w) / static_cast<double>(height * width);
  }

  LabelMap map() const {
    LabelMap m({height, width}, 0);
    for (std::size_t y = y0; y < y0 + h; ++y) {
      for (std::size_t x = x0; x < x0 + w; ++x) m[y * width + x] = 1;
    }
    return m;
  }
};

/// Rectangle whose side fractions are drawn uniformly from [lo, hi], placed uniformly inside the frame.
inline PasteMask make_paste_mask(std::size_t height, std::size_t width, std::pair<double, double> ratio_range, Rng& rng) {
  if (height == 0 || width == 0) throw ShapeError("paste mask: degenerate frame");
  const auto [lo, hi] = ratio_range;
  if (!(lo >= 0.0 && hi <= 1.0 && lo <= hi)) throw ConfigError("paste mask: ratio range must satisfy 0 <= lo <= hi <= 1");
  const double fy = uniform(rng, lo, std::nextafter(hi, 2.0));
  const double fx = uniform(rng, lo, std::nextafter(hi, 2.0));
  const auto side = [](double f, std::size_t extent) {
    return std::min(extent, static_cast<std::size_t>(std::lround(std::min(f, 1.0) * static_cast<double>(extent))));
  };
  const std::size_t h = side(fy, height), w = side(fx, width);
  const auto y0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(height - h)));
  const auto x0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(width - w)));
  return PasteMask::rectangle(height, width, y0, x0, h, w);
}

template <typename T>
struct PastedSample {
  Tensor<T> image;  // 1 x H x W
  LabelMap label;   // H x W
};

/// u_c = x_w * m + u_s * (1 - m);  q_c = y_w * m + q_w * (1 - m).
template <typename T>
PastedSample<T> copy_paste(const Tensor<T>& x_w, const Tensor<T>& u_s, const LabelMap& y_w, const LabelMap& q_w,
                           const PasteMask& m) {
  const Shape img_shape{1, m.height, m.width};
  const Shape lab_shape{m.height, m.width};
  require_shape(x_w.shape(), img_shape, "copy_paste x_w");
  require_shape(u_s.shape(), img_shape, "copy_paste u_s");
  require_shape(y_w.shape(), lab_shape, "copy_paste y_w");
  require_shape(q_w.shape(), lab_shape, "copy_paste q_w");
  PastedSample<T> out{u_s, q_w};
  for (std::size_t y = m.y0; y < m.y0 + m.h; ++y) {
    for (std::size_t x = m.x0; x < m.x0 + m.w; ++x) {
      const std::size_t i = y * m.width + x;
      out.image[i] = x_w[i];
      out.label[i] = y_w[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confidence and ensembling

/// Mean over foreground classes 1..C of 2|A_i & B_i| / (|A_i| + |B_i|) between two label maps.
/// A class absent from both maps counts as full agreement.
inline double dice_agreement(const LabelMap& a, const LabelMap& b, std::size_t classes) {
  require_shape(b.shape(), a.shape(), "dice_agreement");
  if (classes == 0) throw ConfigError("dice_agreement needs at least one foreground class");
  std::vector<std::size_t> na(classes + 1, 0), nb(classes + 1, 0), both(classes + 1, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t la = a[i], lb = b[i];
    if (la > classes || lb > classes) throw ShapeError("dice_agreement: label exceeds class count");
    ++na[la];
    ++nb[lb];
    if (la == lb) ++both[la];
  }
  double acc = 0;
  for (std::size_t c = 1; c <= classes; ++c) {
    const std::size_t denom = na[c] + nb[c];
    acc += denom == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / static_cast<double>(denom);
  }
  return acc / static_cast<double>(classes);
}

/// Instance `n` of an N x H x W label batch.
inline LabelMap label_instance(const LabelMap& batch, std::size_t n) {
  require_rank(batch.shape(), 3, "label_instance");
  const std::size_t plane = batch.dim(1) * batch.dim(2);
  std::vector<std::uint8_t> data(batch.data() + n * plane, batch.data() + (n + 1) * plane);
  return LabelMap({batch.dim(1), batch.dim(2)}, std::move(data));
}

inline LabelMap stack_labels(const std::vector<LabelMap>& maps) {
  if (maps.empty()) throw ShapeError("stack_labels: empty batch");
  const Shape inner = maps.front().shape();
  std::vector<std::uint8_t> data;
  for (const auto& m : maps) {
    require_shape(m.shape(), inner, "stack_labels");
    data.insert(data.end(), m.values().begin(), m.values().end());
  }
  Shape shape{maps.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return LabelMap(std::move(shape), std::move(data));
}

/// Per-instance dice_agreement over two N x H x W label batches.
inline std::vector<double> batch_agreement(const LabelMap& a, const LabelMap& b, std::size_t classes) {
  require_shape(b.shape(), a.shape(), "batch_agreement");
  require_rank(a.shape(), 3, "batch_agreement");
  std::vector<double> out(a.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = dice_agreement(label_instance(a, n), label_instance(b, n), classes);
  return out;
}

/// Self-confidence: agreement of the conventional student and teacher on the weak view.
inline std::vector<double> self_confidence(const LabelMap& student_ut, const LabelMap& teacher_ut, std::size_t classes) {
  return batch_agreement(student_ut, teacher_ut, classes);
}

/// Mutual confidence: agreement of the foundation and conventional teachers on the weak view.
inline std::vector<double> mutual_confidence(const LabelMap& teacher_ms, const LabelMap& teacher_ut, std::size_t classes) {
  return batch_agreement(teacher_ms, teacher_ut, classes);
}

struct ConfidencePair {
  double phi_self = 0;
  double phi_mut = 0;
  double alpha = 0;
};

/// Weight of the conventional teacher's map in the ensemble.
inline double ensemble_ratio(double phi_self, double phi_mut, Strategy strategy, double t, double t_max) {
  if (!(phi_self >= 0 && phi_self <= 1) || !(phi_mut >= 0 && phi_mut <= 1)) {
    throw std::out_of_range("ensemble_ratio: confidences must lie in [0, 1]");
  }
  if (!(t_max > 0) || !(t >= 0) || t > t_max) throw std::out_of_range("ensemble_ratio: need 0 <= t <= t_max");
  switch (strategy) {
    case Strategy::kSynFoC: return phi_self * phi_mut;
    case Strategy::kConstant: return 0.5;
    case Strategy::kCps: return 0.0;
    case Strategy::kLinear: return t / t_max;
    case Strategy::kSelfOnly: return phi_self;
    case Strategy::kMutualOnly: return phi_mut;
    case Strategy::kStandaloneConv: return 1.0;
    case Strategy::kStandaloneFound: return 0.0;
  }
  return 0.0;
}

template <typename T>
struct EnsembleResult {
  Tensor<T> probs;  // N x C' x H x W
  LabelMap labels;  // N x H x W
};

/// p_en = alpha_n * p_ut + (1 - alpha_n) * p_ms per instance; q_en = argmax p_en.
template <typename T>
EnsembleResult<T> ensemble_pseudo(const Tensor<T>& p_ut, const Tensor<T>& p_ms, const std::vector<double>& alphas) {
  require_shape(p_ms.shape(), p_ut.shape(), "ensemble_pseudo");
  require_rank(p_ut.shape(), 4, "ensemble_pseudo");
  const std::size_t n = p_ut.dim(0);
  if (alphas.size() != n) throw ShapeError("ensemble_pseudo: one alpha per instance required");
  const std::size_t row = p_ut.size() / n;
  EnsembleResult<T> out{Tensor<T>(p_ut.shape()), {}};
  for (std::size_t s = 0; s < n; ++s) {
    const double a = alphas[s];
    if (!(a >= 0 && a <= 1)) throw std::out_of_range("ensemble_pseudo: alpha outside [0, 1]");
    const T* u = p_ut.data() + s * row;
    const T* m = p_ms.data() + s * row;
    T* o = out.probs.data() + s * row;
    if (a == 1.0) {
      std::copy_n(u, row, o);
    } else if (a == 0.0) {
      std::copy_n(m, row, o);
    } else {
      const T ta = static_cast<T>(a), tb = static_cast<T>(1.0 - a);
      for (std::size_t i = 0; i < row; ++i) o[i] = ta * u[i] + tb * m[i];
    }
  }
  out.labels = argmax_channels(out.probs);
  return out;
}

/// 1(max_c p_en >= tau), N x 1 x H x W. With `pasted` masks, the map is carried onto the
/// Copy-Paste composite: ones inside each pasted labeled rectangle when `certain_paste` is set,
/// the unlabeled instance's own map elsewhere.
template <typename T>
Tensor<T> confidence_weight(const Tensor<T>& p_en, double tau, const std::vector<PasteMask>& pasted = {},
                            bool certain_paste = true) {
  if (!(tau > 0 && tau < 1)) throw ConfigError("confidence threshold must lie in (0, 1)");
  Tensor<T> w = channel_max(p_en);
  const T thr = static_cast<T>(tau);
  for (auto& v : w.values()) v = v >= thr ? T{1} : T{0};
  if (!pasted.empty() && certain_paste) {
    if (pasted.size() != w.dim(0)) throw ShapeError("confidence_weight: one paste mask per instance required");
    const std::size_t hh = w.dim(2), ww = w.dim(3);
    for (std::size_t s = 0; s < pasted.size(); ++s) {
      const auto& m = pasted[s];
      if (m.height != hh || m.width != ww) throw ShapeError("confidence_weight: paste mask frame mismatch");
      for (std::size_t y = m.y0; y < m.y0 + m.h; ++y) {
        for (std::size_t x = m.x0; x < m.x0 + m.w; ++x) w[(s * hh + y) * ww + x] = T{1};
      }
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Losses

/// One-hot encoding of an N x H x W label batch into N x C' x H x W.
template <typename T>
Tensor<T> one_hot(const LabelMap& labels, std::size_t channels) {
  require_rank(labels.shape(), 3, "one_hot");
  const std::size_t n = labels.dim(0), plane = labels.dim(1) * labels.dim(2);
  Tensor<T> out({n, channels, labels.dim(1), labels.dim(2)}, T{0});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t c = labels[s * plane + i];
      if (c >= channels) throw ShapeError("one_hot: label exceeds channel count");
      out[(s * channels + c) * plane + i] = T{1};
    }
  }
  return out;
}

/// Repeats an N x 1 x H x W map across `channels`.
template <typename T>
Tensor<T> expand_channels(const Tensor<T>& m, std::size_t channels) {
  require_rank(m.shape(), 4, "expand_channels");
  if (m.dim(1) != 1) throw ShapeError("expand_channels expects a single-channel map");
  const std::size_t n = m.dim(0), plane = m.dim(2) * m.dim(3);
  Tensor<T> out({n, channels, m.dim(2), m.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < channels; ++c) std::copy_n(m.data() + s * plane, plane, out.data() + (s * channels + c) * plane);
  }
  return out;
}

template <typename T>
Tensor<T> ones_weight(const Shape& prob_shape) {
  return Tensor<T>({prob_shape.at(0), 1, prob_shape.at(2), prob_shape.at(3)}, T{1});
}

/// -(1 / (N H W)) sum w * y * log p, summed over channels, y one-hot.
template <typename T>
Var<T> ce_loss(const LabelMap& y, Var<T> p, const Tensor<T>& w) {
  require_rank(p.shape(), 4, "ce_loss");
  const std::size_t n = p.shape()[0], ch = p.shape()[1], plane = p.shape()[2] * p.shape()[3];
  require_shape(y.shape(), Shape{n, p.shape()[2], p.shape()[3]}, "ce_loss labels");
  require_shape(w.shape(), Shape{n, 1, p.shape()[2], p.shape()[3]}, "ce_loss weights");
  Tensor<T> yw = one_hot<T>(y, ch);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t i = 0; i < plane; ++i) yw[(s * ch + c) * plane + i] *= w[s * plane + i];
    }
  }
  auto& tape = p.tape();
  auto total = sum(mul(log(p), tape.constant(std::move(yw))));
  return mul(total, T{-1} / static_cast<T>(n * plane));
}

/// Per foreground class c: 1 - (2 sum w p y + eps) / (sum w (p^2 + y^2) + eps), averaged over classes 1..C.
/// Sums run over the whole batch.
template <typename T>
Var<T> dice_loss(const LabelMap& y, Var<T> p, const Tensor<T>& w, T eps = T(1e-8)) {
  require_rank(p.shape(), 4, "dice_loss");
  const std::size_t n = p.shape()[0], ch = p.shape()[1];
  require_shape(y.shape(), Shape{n, p.shape()[2], p.shape()[3]}, "dice_loss labels");
  require_shape(w.shape(), Shape{n, 1, p.shape()[2], p.shape()[3]}, "dice_loss weights");
  if (ch < 2) throw ShapeError("dice_loss needs background plus at least one class");
  auto& tape = p.tape();
  Tensor<T> wexp = expand_channels(w, ch);
  Tensor<T> yw = one_hot<T>(y, ch);
  for (std::size_t i = 0; i < yw.size(); ++i) yw[i] *= wexp[i];
  const std::vector<std::size_t> spatial = {0, 2, 3};
  // sum over batch/space of y^2 w = y w for binary y
  Tensor<T> ysq({1, ch, 1, 1}, T{0});
  {
    const std::size_t plane = p.shape()[2] * p.shape()[3];
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t i = 0; i < plane; ++i) ysq[c] += yw[(s * ch + c) * plane + i];
      }
    }
  }
  auto wv = tape.constant(std::move(wexp));
  auto num = sum_axes(mul(p, tape.constant(std::move(yw))), spatial);
  auto den = add(sum_axes(mul(square(p), wv), spatial), tape.constant(std::move(ysq)));
  auto ratio = div(add(mul(num, T{2}), eps), add(den, eps));
  Tensor<T> select({1, ch, 1, 1}, T{1} / static_cast<T>(ch - 1));
  select[0] = T{0};
  auto mean_ratio = sum(mul(ratio, tape.constant(std::move(select))));
  return add(neg(mean_ratio), T{1});
}

/// CE + Dice of each model's labeled-batch prediction against the weak-view labels.
template <typename T>
Var<T> supervised_loss(Var<T> p_x_ut, Var<T> p_x_ms, const LabelMap& y_w) {
  require_shape(p_x_ms.shape(), p_x_ut.shape(), "supervised_loss");
  const Tensor<T> ones = ones_weight<T>(p_x_ut.shape());
  auto a = add(ce_loss(y_w, p_x_ut, ones), dice_loss(y_w, p_x_ut, ones));
  auto b = add(ce_loss(y_w, p_x_ms, ones), dice_loss(y_w, p_x_ms, ones));
  return add(a, b);
}

/// Weighted CE + Dice of both students' composite-sample predictions against the ensembled pseudo-label.
template <typename T>
Var<T> unsupervised_loss(const LabelMap& q_c_en, Var<T> p_c_ut, Var<T> p_c_ms, const Tensor<T>& w_c_en) {
  require_shape(p_c_ms.shape(), p_c_ut.shape(), "unsupervised_loss");
  auto a = add(ce_loss(q_c_en, p_c_ut, w_c_en), dice_loss(q_c_en, p_c_ut, w_c_en));
  auto b = add(ce_loss(q_c_en, p_c_ms, w_c_en), dice_loss(q_c_en, p_c_ms, w_c_en));
  return add(a, b);
}

template <typename T>
struct RegionMasks {
  Tensor<T> consensus;   // N x 1 x H x W, 1 where the students' argmax agree
  Tensor<T> divergence;  // complement
};

template <typename T>
RegionMasks<T> region_masks(const Tensor<T>& p_c_ut, const Tensor<T>& p_c_ms) {
  require_shape(p_c_ms.shape(), p_c_ut.shape(), "region_masks");
  const LabelMap a = argmax_channels(p_c_ut), b = argmax_channels(p_c_ms);
  Shape shape{p_c_ut.dim(0), 1, p_c_ut.dim(2), p_c_ut.dim(3)};
  RegionMasks<T> m{Tensor<T>(shape, T{0}), Tensor<T>(shape, T{0})};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool agree = a[i] == b[i];
    m.consensus[i] = agree ? T{1} : T{0};
    m.divergence[i] = agree ? T{0} : T{1};
  }
  return m;
}

/// Normalizer for the consensus/divergence terms.
enum class SNorm {
  kElementCount,  // N * (C+1) * H * W, the probability tensor's element count
  kLiteral,       // N * H * W * C
};

template <typename T>
T normalizer(const Shape& prob_shape, SNorm s) {
  const std::size_t n = prob_shape.at(0), ch = prob_shape.at(1), plane = prob_shape.at(2) * prob_shape.at(3);
  return static_cast<T>(s == SNorm::kElementCount ? n * ch * plane : n * (ch - 1) * plane);
}

/// -(1/S) sum (p_ut log p_ut + p_ms log p_ms) over the consensus region.
template <typename T>
Var<T> consensus_entropy_loss(Var<T> p_c_ut, Var<T> p_c_ms, const Tensor<T>& m_c, SNorm s = SNorm::kElementCount) {
  require_shape(p_c_ms.shape(), p_c_ut.shape(), "consensus_entropy_loss");
  auto& tape = p_c_ut.tape();
  auto mask = tape.constant(expand_channels(m_c, p_c_ut.shape()[1]));
  auto h = add(mul(p_c_ut, log(p_c_ut)), mul(p_c_ms, log(p_c_ms)));
  return mul(sum(mul(h, mask)), T{-1} / normalizer<T>(p_c_ut.shape(), s));
}

/// (1/S) sum (p_ut - p_ms)^2 over the divergence region.
template <typename T>
Var<T> divergence_mse_loss(Var<T> p_c_ut, Var<T> p_c_ms, const Tensor<T>& m_d, SNorm s = SNorm::kElementCount) {
  require_shape(p_c_ms.shape(), p_c_ut.shape(), "divergence_mse_loss");
  auto& tape = p_c_ut.tape();
  auto mask = tape.constant(expand_channels(m_d, p_c_ut.shape()[1]));
  return mul(sum(mul(square(sub(p_c_ut, p_c_ms)), mask)), T{1} / normalizer<T>(p_c_ut.shape(), s));
}

/// lambda(t) = exp(-5 (1 - t / t_max)); t beyond t_max clamps to 1.
inline double warmup_lambda(double t, double t_max) {
  if (!(t_max > 0)) throw ConfigError("t_max must be positive");
  if (t < 0) throw std::out_of_range("warmup_lambda: t must be nonnegative");
  if (t >= t_max) return 1.0;
  return std::exp(-5.0 * (1.0 - t / t_max));
}

/// l_x + lambda(t) (l_u + l_c + l_d).
template <typename T>
Var<T> total_loss(Var<T> l_x, Var<T> l_u, Var<T> l_c, Var<T> l_d, double t, double t_max) {
  const T lambda = static_cast<T>(warmup_lambda(t, t_max));
  return add(l_x, mul(add(add(l_u, l_c), l_d), lambda));
}

}  // namespace synfoc
