#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "synfoc/autodiff.hpp"
#include "synfoc/rng.hpp"

namespace synfoc {

enum class Mode { kTrain, kEval };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(uniform(rng, -bound, bound));
  return t;
}

}  // namespace detail

/// conv3x3 (or 1x1) -> instance norm -> ReLU.
template <typename T>
struct ConvNormRelu {
  Parameter<T> weight, bias, gamma, beta;

  ConvNormRelu() = default;
  ConvNormRelu(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng)
      : weight(name + ".weight", detail::kaiming_uniform<T>({cout, cin, 3, 3}, cin * 9, rng)),
        bias(name + ".bias", Tensor<T>({cout}, T{0})),
        gamma(name + ".norm.gamma", Tensor<T>({cout}, T{1})),
        beta(name + ".norm.beta", Tensor<T>({cout}, T{0})) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x, bool track) {
    auto y = conv2d(x, tape.parameter(weight, track), tape.parameter(bias, track), 1, 1);
    return relu(instance_norm(y, tape.parameter(gamma, track), tape.parameter(beta, track)));
  }

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&weight, &bias, &gamma, &beta}); }
};

/// Conventional role: a small U-shaped encoder-decoder trained from scratch.
/// Encoder stages at H, H/2, H/4; the decoder upsamples and concatenates skips;
/// a 1x1 head emits (C+1)-channel logits at input resolution.
template <typename T>
class ConvSegNet {
 public:
  ConvSegNet() = default;
  ConvSegNet(std::size_t classes, Rng& rng, std::array<std::size_t, 3> widths = {16, 32, 64})
      : classes_(classes),
        enc1_("enc1", 1, widths[0], rng),
        enc2_("enc2", widths[0], widths[1], rng),
        enc3_("enc3", widths[1], widths[2], rng),
        dec2_("dec2", widths[2] + widths[1], widths[1], rng),
        dec1_("dec1", widths[1] + widths[0], widths[0], rng),
        head_w_("head.weight", detail::kaiming_uniform<T>({classes + 1, widths[0], 1, 1}, widths[0], rng)),
        head_b_("head.bias", Tensor<T>({classes + 1}, T{0})) {}

  std::size_t classes() const noexcept { return classes_; }
  std::size_t out_channels() const noexcept { return classes_ + 1; }

  Var<T> forward(Tape<T>& tape, Var<T> images, Mode mode) {
    require_rank(images.shape(), 4, "ConvSegNet input");
    const std::size_t h = images.shape()[2], w = images.shape()[3];
    if (images.shape()[1] != 1 || h % 4 || w % 4) {
      throw ConfigError("ConvSegNet needs N x 1 x H x W input with H, W divisible by 4, got " +
                        to_string(images.shape()));
    }
    const bool track = mode == Mode::kTrain;
    auto e1 = enc1_(tape, images, track);
    auto e2 = enc2_(tape, maxpool2(e1), track);
    auto e3 = enc3_(tape, maxpool2(e2), track);
    auto d2 = dec2_(tape, concat_channels(bilinear_resize(e3, h / 2, w / 2), e2), track);
    auto d1 = dec1_(tape, concat_channels(bilinear_resize(d2, h, w), e1), track);
    return conv2d(d1, tape.parameter(head_w_, track), tape.parameter(head_b_, track));
  }

  /// Eval-mode logits without keeping a tape around.
  Tensor<T> predict_logits(const Tensor<T>& images) {
    Tape<T> tape;
    return forward(tape, tape.constant(images), Mode::kEval).value();
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* b : {&enc1_, &enc2_, &enc3_, &dec2_, &dec1_}) b->collect(out);
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
  }
  std::vector<Parameter<T>*> trainable_parameters() { return parameters(); }
  std::vector<Parameter<T>*> ema_parameters() { return parameters(); }

  Parameter<T>& head_weight() { return head_w_; }
  Parameter<T>& head_bias() { return head_b_; }

 private:
  std::size_t classes_ = 1;
  ConvNormRelu<T> enc1_, enc2_, enc3_, dec2_, dec1_;
  Parameter<T> head_w_, head_b_;
};

/// Backbone convolution with an optional low-rank adapter:
/// effective kernel = W + scale * reshape(B A), with A: r x fan_in and B: cout x r.
template <typename T>
struct LoraConv {
  Parameter<T> weight, bias, gamma, beta;  // backbone (frozen after pretraining)
  Parameter<T> lora_a, lora_b;             // adapter
  T scale = T{1};

  LoraConv() = default;
  LoraConv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t rank, Rng& rng)
      : weight(name + ".weight", detail::kaiming_uniform<T>({cout, cin, 3, 3}, cin * 9, rng)),
        bias(name + ".bias", Tensor<T>({cout}, T{0})),
        gamma(name + ".norm.gamma", Tensor<T>({cout}, T{1})),
        beta(name + ".norm.beta", Tensor<T>({cout}, T{0})),
        lora_a(name + ".lora_a", Tensor<T>({rank, cin * 9}, T{0})),
        lora_b(name + ".lora_b", Tensor<T>({cout, rank}, T{0})),
        scale(T{1} / static_cast<T>(rank)) {}

  Var<T> effective_kernel(Tape<T>& tape, bool adapters, bool track) {
    auto w = tape.parameter(weight, track);
    if (!adapters) return w;
    auto delta = matmul(tape.parameter(lora_b, track), tape.parameter(lora_a, track));
    return add(w, reshape(mul(delta, scale), weight.value.shape()));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, bool adapters, bool track) {
    auto y = conv2d(x, effective_kernel(tape, adapters, track), tape.parameter(bias, track), 1, 1);
    return relu(instance_norm(y, tape.parameter(gamma, track), tape.parameter(beta, track)));
  }

  void collect_backbone(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&weight, &bias, &gamma, &beta}); }
  void collect_adapter(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&lora_a, &lora_b}); }
};

/// Foundation role: the encoder topology at wider channels, run on a 2x upsampled input,
/// with a light decoder that emits (C+1)-channel logits at half the input resolution.
/// After pretraining the backbone is frozen and low-rank adapters carry all backbone adaptation.
template <typename T>
class FoundationSegNet {
 public:
  FoundationSegNet() = default;
  FoundationSegNet(std::size_t classes, Rng& rng, std::size_t rank = 4,
                   std::array<std::size_t, 3> widths = {32, 64, 128})
      : classes_(classes),
        rank_(rank == 0 ? throw ConfigError("adapter rank must be positive") : rank),
        enc1_("backbone.enc1", 1, widths[0], rank, rng),
        enc2_("backbone.enc2", widths[0], widths[1], rank, rng),
        enc3_("backbone.enc3", widths[1], widths[2], rank, rng),
        dec_("decoder.conv", widths[2], widths[0], rng),
        head_w_("decoder.head.weight", detail::kaiming_uniform<T>({classes + 1, widths[0], 1, 1}, widths[0], rng)),
        head_b_("decoder.head.bias", Tensor<T>({classes + 1}, T{0})) {}

  std::size_t classes() const noexcept { return classes_; }
  std::size_t out_channels() const noexcept { return classes_ + 1; }
  std::size_t rank() const noexcept { return rank_; }
  bool adapters_enabled() const noexcept { return adapters_; }

  Var<T> forward(Tape<T>& tape, Var<T> images, Mode mode) {
    require_rank(images.shape(), 4, "FoundationSegNet input");
    const std::size_t h = images.shape()[2], w = images.shape()[3];
    if (images.shape()[1] != 1 || (2 * h) % 8 || (2 * w) % 8) {
      throw ConfigError("FoundationSegNet needs N x 1 x H x W input with 2H, 2W divisible by 8, got " +
                        to_string(images.shape()));
    }
    const bool track = mode == Mode::kTrain;
    auto x = bilinear_resize(images, 2 * h, 2 * w);
    auto e1 = enc1_(tape, x, adapters_, track);
    auto e2 = enc2_(tape, maxpool2(e1), adapters_, track);
    auto e3 = enc3_(tape, maxpool2(e2), adapters_, track);
    auto d = dec_(tape, e3, track);
    return conv2d(d, tape.parameter(head_w_, track), tape.parameter(head_b_, track));
  }

  Tensor<T> predict_logits(const Tensor<T>& images) {
    Tape<T> tape;
    return forward(tape, tape.constant(images), Mode::kEval).value();
  }

  /// Freezes the backbone and starts the adapters at identity:
  /// A ~ uniform(+-1/sqrt(r)) * 0.01, B = 0.
  void freeze_backbone(Rng& rng) {
    for (auto* p : backbone_parameters()) p->trainable = false;
    const double bound = 1.0 / std::sqrt(static_cast<double>(rank_));
    for (auto* conv : {&enc1_, &enc2_, &enc3_}) {
      for (auto& v : conv->lora_a.value.values()) v = static_cast<T>(uniform(rng, -bound, bound) * 0.01);
      conv->lora_b.value.fill(T{0});
      conv->lora_a.zero_grad();
      conv->lora_b.zero_grad();
    }
    adapters_ = true;
  }

  /// Restores flags after loading a checkpoint written by a frozen network.
  void set_frozen(bool frozen) {
    for (auto* p : backbone_parameters()) p->trainable = !frozen;
    adapters_ = frozen;
  }

  std::vector<Parameter<T>*> backbone_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* c : {&enc1_, &enc2_, &enc3_}) c->collect_backbone(out);
    return out;
  }
  std::vector<Parameter<T>*> adapter_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* c : {&enc1_, &enc2_, &enc3_}) c->collect_adapter(out);
    return out;
  }
  std::vector<Parameter<T>*> decoder_parameters() {
    std::vector<Parameter<T>*> out;
    dec_.collect(out);
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
  }
  std::vector<Parameter<T>*> parameters() {
    auto out = backbone_parameters();
    for (auto* p : adapter_parameters()) out.push_back(p);
    for (auto* p : decoder_parameters()) out.push_back(p);
    return out;
  }
  /// Backbone + decoder before freezing; adapters + decoder afterwards.
  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out = adapters_ ? adapter_parameters() : backbone_parameters();
    for (auto* p : decoder_parameters()) out.push_back(p);
    return out;
  }
  std::vector<Parameter<T>*> ema_parameters() { return trainable_parameters(); }

  Parameter<T>& head_weight() { return head_w_; }
  Parameter<T>& head_bias() { return head_b_; }

 private:
  std::size_t classes_ = 1;
  std::size_t rank_ = 4;
  bool adapters_ = false;
  LoraConv<T> enc1_, enc2_, enc3_;
  ConvNormRelu<T> dec_;
  Parameter<T> head_w_, head_b_;
};

/// Student network plus an EMA shadow of it.
template <typename Net>
struct TeacherStudentPair {
  Net student;
  Net teacher;
  double decay = 0.99;

  TeacherStudentPair() = default;
  TeacherStudentPair(Net net, double d) : student(net), teacher(std::move(net)), decay(d) {
    if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("EMA decay must lie in [0, 1]");
  }
};

/// teacher <- decay * teacher + (1 - decay) * student over the tracked parameters
/// (for the foundation net: adapters and decoder only).
template <typename Net>
void ema_update(TeacherStudentPair<Net>& pair) {
  auto src = pair.student.ema_parameters();
  auto dst = pair.teacher.ema_parameters();
  if (src.size() != dst.size()) throw ShapeError("ema_update: teacher/student parameter lists differ");
  using T = typename std::remove_reference_t<decltype(src[0]->value)>::value_type;
  const T d = static_cast<T>(pair.decay);
  const T one_minus = static_cast<T>(1.0 - pair.decay);
  for (std::size_t i = 0; i < src.size(); ++i) {
    require_shape(src[i]->value.shape(), dst[i]->value.shape(), "ema_update");
    auto& t = dst[i]->value;
    const auto& s = src[i]->value;
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = d * t[k] + one_minus * s[k];
  }
}

}  // namespace synfoc
