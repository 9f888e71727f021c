#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "synfoc/tensor.hpp"

namespace synfoc {

/// Inputs to every logarithm are clamped to at least this value.
inline constexpr double kLogClamp = 1e-8;

template <typename T>
class Tape;

/// Named trainable (or frozen) array owned by a network.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), T{0}), trainable(train) {}

  void zero_grad() { grad.fill(T{0}); }
};

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Single-owner record of operations for reverse-mode differentiation.
/// Nodes are appended in evaluation order, so the node vector is already topologically sorted.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, Kind::kConstant, nullptr, {}});
    return {this, nodes_.size() - 1};
  }

  /// Leaf whose gradient is kept on the tape (read it back with grad()).
  Var<T> variable(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, true, Kind::kVariable, nullptr, {}});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  /// Frozen parameters, or track == false, enter as constants.
  Var<T> parameter(Parameter<T>& p, bool track = true) {
    if (!track || !p.trainable) return constant(p.value);
    nodes_.push_back(Node{p.value, {}, true, Kind::kParameter, &p, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw std::logic_error("operands recorded on different tapes");
      needs = needs || nodes_[in.id()].requires_grad;
    }
    nodes_.push_back(
        Node{std::move(value), {}, needs, Kind::kOp, nullptr, needs ? std::move(fn) : Backward{}});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of a variable leaf after backward(); zeros if nothing reached it.
  Tensor<T> grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id());
    if (!n.requires_grad) throw std::logic_error("gradient requested for a tensor off the tape");
    if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
    return n.grad;
  }

  /// Mutable gradient buffer for node `id`, zero-allocated on first use;
  /// nullptr when the node does not take part in differentiation.
  T* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
    return n.grad.data();
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    T* dst = grad_buffer(id);
    if (!dst) return;
    const T* src = g.data();
    for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += src[i];
  }

  void backward(Var<T> loss) {
    if (&loss.tape() != this) throw std::logic_error("loss belongs to a different tape");
    if (loss.value().size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!nodes_[loss.id()].requires_grad) return;
    for (auto& n : nodes_) {
      if (n.kind == Kind::kOp) n.grad = Tensor<T>();
    }
    grad_buffer(loss.id())[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.kind == Kind::kOp) {
        // Moving the gradient out keeps the node vector stable while the closure accumulates.
        Tensor<T> g = std::move(n.grad);
        n.grad = Tensor<T>();
        n.backward(*this, g);
      } else if (n.kind == Kind::kParameter) {
        auto& pg = n.param->grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
        n.grad = Tensor<T>();
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  enum class Kind { kConstant, kVariable, kParameter, kOp };
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Kind kind = Kind::kConstant;
    Parameter<T>* param = nullptr;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
  return a.tape();
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;

template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_shape(b.shape(), a.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    if (T* gb = t.grad_buffer(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_shape(b.shape(), a.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (T* gb = t.grad_buffer(ib)) {
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_shape(b.shape(), a.shape(), "div");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return tape.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (T* ga = t.grad_buffer(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (T* gb = t.grad_buffer(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v += s;
  return a.tape().record(std::move(out), {a},
                         [ia = a.id()](Tape<T>& t, const Tensor<T>& g) { t.accumulate(ia, g); });
}

template <typename T>
Var<T> mul(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape().record(std::move(out), {a}, [ia = a.id(), s](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    }
  });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return mul(a, T{-1});
}

template <typename T>
Var<T> square(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= v;
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T{2} * av[i] * g[i];
    }
  });
}

/// Natural log of max(x, 1e-8); the clamped region has zero gradient.
template <typename T>
Var<T> log(Var<T> a) {
  const T floor = static_cast<T>(kLogClamp);
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::log(std::max(v, floor));
  return a.tape().record(std::move(out), {a}, [ia = a.id(), floor](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > floor) ga[i] += g[i] / av[i];
      }
    }
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  const std::size_t self = a.tape().size();
  return a.tape().record(std::move(out), {a}, [ia = a.id(), self](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      const auto& y = t.value(self);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > T{0}) ga[i] += g[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (T v : a.value().values()) acc += v;
  return a.tape().record(Tensor<T>::scalar(acc), {a}, [ia = a.id()](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      const std::size_t n = t.value(ia).size();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
    }
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return mul(sum(a), T{1} / static_cast<T>(a.value().size()));
}

/// Sums over the listed axes; reduced axes are kept with extent 1.
template <typename T>
Var<T> sum_axes(Var<T> a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  Shape out_shape = in;
  for (auto ax : axes) {
    if (ax >= in.size()) throw ShapeError("sum_axes: axis out of range for " + to_string(in));
    out_shape[ax] = 1;
  }
  // Map every input index to its output index once.
  std::vector<std::size_t> target(a.value().size());
  {
    std::vector<std::size_t> out_stride(in.size(), 1);
    for (std::size_t d = in.size(); d-- > 1;) out_stride[d - 1] = out_stride[d] * out_shape[d];
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t i = 0; i < target.size(); ++i) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < in.size(); ++d) o += (out_shape[d] == 1 ? 0 : idx[d]) * out_stride[d];
      target[i] = o;
      for (std::size_t d = in.size(); d-- > 0;) {
        if (++idx[d] < in[d]) break;
        idx[d] = 0;
      }
    }
  }
  Tensor<T> out(out_shape, T{0});
  const auto& av = a.value();
  for (std::size_t i = 0; i < target.size(); ++i) out[target[i]] += av[i];
  return a.tape().record(std::move(out), {a},
                         [ia = a.id(), target = std::move(target)](Tape<T>& t, const Tensor<T>& g) {
                           if (T* ga = t.grad_buffer(ia)) {
                             for (std::size_t i = 0; i < target.size(); ++i) ga[i] += g[target[i]];
                           }
                         });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

/// Rows [begin, begin + count) of the leading (batch) axis.
template <typename T>
Var<T> slice_batch(Var<T> a, std::size_t begin, std::size_t count) {
  const Shape& in = a.shape();
  if (in.empty() || count == 0 || begin + count > in[0]) {
    throw ShapeError("slice_batch: range out of bounds for " + to_string(in));
  }
  const std::size_t row = a.value().size() / in[0];
  Shape out_shape = in;
  out_shape[0] = count;
  std::vector<T> data(a.value().data() + begin * row, a.value().data() + (begin + count) * row);
  return a.tape().record(Tensor<T>(out_shape, std::move(data)), {a},
                         [ia = a.id(), off = begin * row](Tape<T>& t, const Tensor<T>& g) {
                           if (T* ga = t.grad_buffer(ia)) {
                             for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                           }
                         });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor<T> out({m, n});
  detail::MapMat<T>(out.data(), m, n).noalias() =
      detail::ConstMapMat<T>(a.value().data(), m, k) * detail::ConstMapMat<T>(b.value().data(), k, n);
  return tape.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id(), m, k, n](Tape<T>& t, const Tensor<T>& g) {
    detail::ConstMapMat<T> gm(g.data(), m, n);
    if (T* ga = t.grad_buffer(ia)) {
      detail::MapMat<T>(ga, m, k).noalias() += gm * detail::ConstMapMat<T>(t.value(ib).data(), k, n).transpose();
    }
    if (T* gb = t.grad_buffer(ib)) {
      detail::MapMat<T>(gb, k, n).noalias() += detail::ConstMapMat<T>(t.value(ia).data(), m, k).transpose() * gm;
    }
  });
}

// ---------------------------------------------------------------------------
// Image operations (N x C x H x W)

namespace detail {

template <typename T>
using StridedMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

/// Stride-1 "same" convolution as k*k shifted GEMMs over a zero-padded copy of the input.
/// Rows of the padded image are wp = w + 2 pad wide; outputs are computed on that wider grid
/// and the pad columns are dropped, so no im2col buffer is needed.
template <typename T>
Var<T> conv2d_same(Tape<T>& tape, Var<T> x, Var<T> kernel, Var<T> bias) {
  const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t cout = kernel.shape()[0], k = kernel.shape()[2], pad = (k - 1) / 2;
  const std::size_t wp = w + 2 * pad, hp = h + 2 * pad;
  const std::size_t cs = hp * wp + 2 * pad;  // channel stride; the tail keeps the last shifted view in bounds
  const std::size_t wide = h * wp;
  const std::size_t taps = k * k;

  // taps x (cout x cin) repacked kernel
  auto repack = [=](const T* kv) {
    std::vector<T> wk(taps * cout * cin);
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t t = 0; t < taps; ++t) wk[(t * cout + o) * cin + c] = kv[(o * cin + c) * taps + t];
      }
    }
    return wk;
  };
  const std::vector<T> wk = repack(kernel.value().data());
  std::vector<T> xpad(n * cin * cs, T{0});
  const T* xv = x.value().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < cin; ++c) {
      T* dst = xpad.data() + (s * cin + c) * cs;
      const T* src = xv + (s * cin + c) * h * w;
      for (std::size_t y = 0; y < h; ++y) std::copy_n(src + y * w, w, dst + (y + pad) * wp + pad);
    }
  }
  Tensor<T> out({n, cout, h, w});
  RowMat<T> acc(cout, wide);
  const auto& bv = bias.value();
  for (std::size_t s = 0; s < n; ++s) {
    acc.setZero();
    for (std::size_t t = 0; t < taps; ++t) {
      const std::size_t off = (t / k) * wp + (t % k);
      ConstStridedMat<T> xs(xpad.data() + s * cin * cs + off, cin, wide, Eigen::OuterStride<>(cs));
      acc.noalias() += ConstMapMat<T>(wk.data() + t * cout * cin, cout, cin) * xs;
    }
    for (std::size_t o = 0; o < cout; ++o) {
      T* dst = out.data() + (s * cout + o) * h * w;
      const T* src = acc.data() + o * wide;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] = src[y * wp + xx] + bv[o];
      }
    }
  }
  if (!kernel.requires_grad()) xpad.clear();

  return tape.record(
      std::move(out), {x, kernel, bias},
      [ix = x.id(), ik = kernel.id(), ib = bias.id(), xpad = std::move(xpad), repack, n, cin, h, w, cout, k, pad,
       wp, cs, wide, taps](Tape<T>& t, const Tensor<T>& g) {
        if (T* gb = t.grad_buffer(ib)) {
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < cout; ++c) {
              const T* gp = g.data() + (s * cout + c) * h * w;
              T a{0};
              for (std::size_t p = 0; p < h * w; ++p) a += gp[p];
              gb[c] += a;
            }
          }
        }
        T* gk = t.grad_buffer(ik);
        T* gx = t.grad_buffer(ix);
        if (!gk && !gx) return;
        // gradient on the wide grid, zero in the pad columns
        RowMat<T> gw(cout, wide);
        std::vector<T> gwk(gk ? taps * cout * cin : 0, T{0});
        const std::vector<T> wk = gx ? repack(t.value(ik).data()) : std::vector<T>{};
        std::vector<T> gpad(gx ? cin * cs : 0);
        for (std::size_t s = 0; s < n; ++s) {
          gw.setZero();
          for (std::size_t o = 0; o < cout; ++o) {
            const T* src = g.data() + (s * cout + o) * h * w;
            T* dst = gw.data() + o * wide;
            for (std::size_t y = 0; y < h; ++y) std::copy_n(src + y * w, w, dst + y * wp);
          }
          if (gk) {
            for (std::size_t tp = 0; tp < taps; ++tp) {
              const std::size_t off = (tp / k) * wp + (tp % k);
              ConstStridedMat<T> xs(xpad.data() + s * cin * cs + off, cin, wide, Eigen::OuterStride<>(cs));
              MapMat<T>(gwk.data() + tp * cout * cin, cout, cin).noalias() += gw * xs.transpose();
            }
          }
          if (gx) {
            std::fill(gpad.begin(), gpad.end(), T{0});
            for (std::size_t tp = 0; tp < taps; ++tp) {
              const std::size_t off = (tp / k) * wp + (tp % k);
              StridedMat<T> gs(gpad.data() + off, cin, wide, Eigen::OuterStride<>(cs));
              gs.noalias() += ConstMapMat<T>(wk.data() + tp * cout * cin, cout, cin).transpose() * gw;
            }
            for (std::size_t c = 0; c < cin; ++c) {
              const T* src = gpad.data() + c * cs;
              T* dst = gx + (s * cin + c) * h * w;
              for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] += src[(y + pad) * wp + xx + pad];
              }
            }
          }
        }
        if (gk) {
          for (std::size_t o = 0; o < cout; ++o) {
            for (std::size_t c = 0; c < cin; ++c) {
              for (std::size_t tp = 0; tp < taps; ++tp) gk[(o * cin + c) * taps + tp] += gwk[(tp * cout + o) * cin + c];
            }
          }
        }
      });
}

}  // namespace detail

/// Cross-correlation with a Cout x Cin x k x k kernel. "Same" stride-1 convolutions use shifted GEMMs,
/// everything else im2col + GEMM.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t stride = 1, std::size_t pad = 0) {
  auto& tape = detail::same_tape(x, kernel);
  detail::same_tape(x, bias);
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t cout = kernel.shape()[0], k = kernel.shape()[2];
  if (kernel.shape()[1] != cin || kernel.shape()[3] != k) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " does not fit input " +
                     to_string(x.shape()));
  }
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  require_shape(bias.shape(), Shape{cout}, "conv2d bias");
  if (stride == 0 || h + 2 * pad < k || w + 2 * pad < k || (h + 2 * pad - k) % stride != 0 ||
      (w + 2 * pad - k) % stride != 0) {
    throw ShapeError("conv2d: output extent not integral for input " + to_string(x.shape()));
  }
  if (stride == 1 && 2 * pad + 1 == k) return detail::conv2d_same(tape, x, kernel, bias);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t kk = cin * k * k, plane = ho * wo;

  auto im2col = [=](const T* src, T* col) {
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          T* dst = col + ((c * k + ki) * k + kj) * plane;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
            T* row = dst + oh * wo;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
              std::fill(row, row + wo, T{0});
              continue;
            }
            const T* srow = src + (c * h + static_cast<std::size_t>(ih)) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(pad);
              row[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) ? T{0} : srow[iw];
            }
          }
        }
      }
    }
  };

  const bool keep_cols = kernel.requires_grad();
  std::vector<T> cols(keep_cols ? n * kk * plane : kk * plane);
  Tensor<T> out({n, cout, ho, wo});
  detail::ConstMapMat<T> wmat(kernel.value().data(), cout, kk);
  const auto& bv = bias.value();
  for (std::size_t s = 0; s < n; ++s) {
    T* col = cols.data() + (keep_cols ? s * kk * plane : 0);
    im2col(x.value().data() + s * cin * h * w, col);
    detail::MapMat<T> y(out.data() + s * cout * plane, cout, plane);
    y.noalias() = wmat * detail::ConstMapMat<T>(col, kk, plane);
    for (std::size_t c = 0; c < cout; ++c) y.row(c).array() += bv[c];
  }
  if (!keep_cols) cols.clear();

  return tape.record(
      std::move(out), {x, kernel, bias},
      [ix = x.id(), ik = kernel.id(), ib = bias.id(), cols = std::move(cols), n, cin, h, w, cout, k,
       stride, pad, ho, wo, kk, plane](Tape<T>& t, const Tensor<T>& g) {
        if (T* gb = t.grad_buffer(ib)) {
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < cout; ++c) {
              const T* gp = g.data() + (s * cout + c) * plane;
              T acc{0};
              for (std::size_t p = 0; p < plane; ++p) acc += gp[p];
              gb[c] += acc;
            }
          }
        }
        if (T* gk = t.grad_buffer(ik)) {
          detail::MapMat<T> gw(gk, cout, kk);
          for (std::size_t s = 0; s < n; ++s) {
            gw.noalias() += detail::ConstMapMat<T>(g.data() + s * cout * plane, cout, plane) *
                            detail::ConstMapMat<T>(cols.data() + s * kk * plane, kk, plane).transpose();
          }
        }
        if (T* gx = t.grad_buffer(ix)) {
          detail::ConstMapMat<T> wmat(t.value(ik).data(), cout, kk);
          detail::RowMat<T> dcol(kk, plane);
          for (std::size_t s = 0; s < n; ++s) {
            dcol.noalias() = wmat.transpose() * detail::ConstMapMat<T>(g.data() + s * cout * plane, cout, plane);
            T* dst = gx + s * cin * h * w;
            for (std::size_t c = 0; c < cin; ++c) {
              for (std::size_t ki = 0; ki < k; ++ki) {
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const T* src = dcol.data() + ((c * k + ki) * k + kj) * plane;
                  for (std::size_t oh = 0; oh < ho; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    T* drow = dst + (c * h + static_cast<std::size_t>(ih)) * w;
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                      const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                      if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w)) drow[iw] += src[oh * wo + ow];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

/// 2x2 max pooling with stride 2; ties route the gradient to the first maximum in raster order.
template <typename T>
Var<T> maxpool2(Var<T> x) {
  require_rank(x.shape(), 4, "maxpool2");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 || w % 2) throw ShapeError("maxpool2: spatial extents must be even, got " + to_string(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> out({n, c, ho, wo});
  std::vector<std::uint32_t> arg(out.size());
  const T* src = x.value().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = src + p * h * w;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = (2 * i) * w + 2 * j;
        for (std::size_t cand : {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1}) {
          if (plane[cand] > plane[best]) best = cand;
        }
        const std::size_t o = p * ho * wo + i * wo + j;
        out[o] = plane[best];
        arg[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [ix = x.id(), arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix)) {
      for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
    }
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_rank(a.shape(), 4, "concat_channels lhs");
  require_rank(b.shape(), 4, "concat_channels rhs");
  const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1], h = a.shape()[2], w = a.shape()[3];
  if (b.shape()[0] != n || b.shape()[2] != h || b.shape()[3] != w) {
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t plane = h * w;
  Tensor<T> out({n, ca + cb, h, w});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.value().data() + s * ca * plane, ca * plane, out.data() + s * (ca + cb) * plane);
    std::copy_n(b.value().data() + s * cb * plane, cb * plane, out.data() + (s * (ca + cb) + ca) * plane);
  }
  return tape.record(std::move(out), {a, b}, [ia = a.id(), ib = b.id(), n, ca, cb, plane](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) {
      for (std::size_t s = 0; s < n; ++s) {
        const T* src = g.data() + s * (ca + cb) * plane;
        for (std::size_t i = 0; i < ca * plane; ++i) ga[s * ca * plane + i] += src[i];
      }
    }
    if (T* gb = t.grad_buffer(ib)) {
      for (std::size_t s = 0; s < n; ++s) {
        const T* src = g.data() + (s * (ca + cb) + ca) * plane;
        for (std::size_t i = 0; i < cb * plane; ++i) gb[s * cb * plane + i] += src[i];
      }
    }
  });
}

/// Per-sample, per-channel normalization with a learnable affine (gamma, beta of length C).
template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  auto& tape = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  require_rank(x.shape(), 4, "instance_norm");
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  require_shape(gamma.shape(), Shape{c}, "instance_norm gamma");
  require_shape(beta.shape(), Shape{c}, "instance_norm beta");
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(n * c);
  Tensor<T> out(x.shape());
  const T* src = x.value().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* in = src + p * plane;
    T mu{0};
    for (std::size_t i = 0; i < plane; ++i) mu += in[i];
    mu /= static_cast<T>(plane);
    T var{0};
    for (std::size_t i = 0; i < plane; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<T>(plane);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[p] = is;
    const T gm = gamma.value()[p % c], bt = beta.value()[p % c];
    T* xh = xhat.data() + p * plane;
    T* o = out.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      xh[i] = (in[i] - mu) * is;
      o[i] = gm * xh[i] + bt;
    }
  }
  return tape.record(
      std::move(out), {x, gamma, beta},
      [ix = x.id(), ig = gamma.id(), ibt = beta.id(), xhat = std::move(xhat), inv_std = std::move(inv_std), n, c,
       plane](Tape<T>& t, const Tensor<T>& g) {
        T* gg = t.grad_buffer(ig);
        T* gbt = t.grad_buffer(ibt);
        T* gx = t.grad_buffer(ix);
        const auto& gamma_v = t.value(ig);
        for (std::size_t p = 0; p < n * c; ++p) {
          const T* gp = g.data() + p * plane;
          const T* xh = xhat.data() + p * plane;
          T sum_g{0}, sum_gx{0};
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * xh[i];
          }
          if (gg) gg[p % c] += sum_gx;
          if (gbt) gbt[p % c] += sum_g;
          if (gx) {
            const T scale = gamma_v[p % c] * inv_std[p] / static_cast<T>(plane);
            const T np = static_cast<T>(plane);
            T* dst = gx + p * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] += scale * (np * gp[i] - sum_g - xh[i] * sum_gx);
          }
        }
      });
}

/// Softmax over the channel axis of an N x C x H x W tensor (max-subtracted).
template <typename T>
Var<T> softmax_channels(Var<T> logits) {
  require_rank(logits.shape(), 4, "softmax_channels");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1], plane = logits.shape()[2] * logits.shape()[3];
  if (c < 2) throw ShapeError("softmax_channels needs at least 2 channels");
  Tensor<T> out(logits.shape());
  const T* src = logits.value().data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* in = src + s * c * plane;
    T* o = out.data() + s * c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = in[p];
      for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, in[ch * plane + p]);
      T z{0};
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(in[ch * plane + p] - mx);
        o[ch * plane + p] = e;
        z += e;
      }
      for (std::size_t ch = 0; ch < c; ++ch) o[ch * plane + p] /= z;
    }
  }
  const std::size_t self = logits.tape().size();
  return logits.tape().record(std::move(out), {logits}, [il = logits.id(), self, n, c, plane](Tape<T>& t, const Tensor<T>& g) {
    T* gl = t.grad_buffer(il);
    if (!gl) return;
    const auto& y = t.value(self);
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = s * c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        T dot{0};
        for (std::size_t ch = 0; ch < c; ++ch) dot += g[base + ch * plane + p] * y[base + ch * plane + p];
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = base + ch * plane + p;
          gl[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

namespace detail {

struct ResizeTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

/// Half-pixel (align_corners = false) source taps for one axis.
inline ResizeTaps resize_taps(std::size_t in, std::size_t out) {
  ResizeTaps taps;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    taps.lo[o] = lo;
    taps.hi[o] = std::min(lo + 1, in - 1);
    taps.frac[o] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of the spatial axes with half-pixel centers.
template <typename T>
Var<T> bilinear_resize(Var<T> x, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output extents must be positive");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h == out_h && w == out_w) {
    return x.tape().record(x.value(), {x}, [ix = x.id()](Tape<T>& t, const Tensor<T>& g) { t.accumulate(ix, g); });
  }
  auto rows = detail::resize_taps(h, out_h);
  auto cols = detail::resize_taps(w, out_w);
  Tensor<T> out({n, c, out_h, out_w});
  const T* src = x.value().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* in = src + p * h * w;
    T* o = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(rows.frac[i]);
      const T* r0 = in + rows.lo[i] * w;
      const T* r1 = in + rows.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(cols.frac[j]);
        const T top = r0[cols.lo[j]] * (T{1} - fx) + r0[cols.hi[j]] * fx;
        const T bot = r1[cols.lo[j]] * (T{1} - fx) + r1[cols.hi[j]] * fx;
        o[i * out_w + j] = top * (T{1} - fy) + bot * fy;
      }
    }
  }
  return x.tape().record(std::move(out), {x},
                         [ix = x.id(), rows = std::move(rows), cols = std::move(cols), n, c, h, w, out_h,
                          out_w](Tape<T>& t, const Tensor<T>& g) {
                           T* gx = t.grad_buffer(ix);
                           if (!gx) return;
                           for (std::size_t p = 0; p < n * c; ++p) {
                             T* in = gx + p * h * w;
                             const T* gp = g.data() + p * out_h * out_w;
                             for (std::size_t i = 0; i < out_h; ++i) {
                               const T fy = static_cast<T>(rows.frac[i]);
                               T* r0 = in + rows.lo[i] * w;
                               T* r1 = in + rows.hi[i] * w;
                               for (std::size_t j = 0; j < out_w; ++j) {
                                 const T fx = static_cast<T>(cols.frac[j]);
                                 const T v = gp[i * out_w + j];
                                 r0[cols.lo[j]] += v * (T{1} - fy) * (T{1} - fx);
                                 r0[cols.hi[j]] += v * (T{1} - fy) * fx;
                                 r1[cols.lo[j]] += v * fy * (T{1} - fx);
                                 r1[cols.hi[j]] += v * fy * fx;
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Non-differentiable map queries. These read plain tensors and never touch a tape.

/// Per-pixel index of the largest channel; ties go to the lowest index.
template <typename T>
LabelMap argmax_channels(const Tensor<T>& p) {
  require_rank(p.shape(), 4, "argmax_channels");
  const std::size_t n = p.dim(0), c = p.dim(1), plane = p.dim(2) * p.dim(3);
  LabelMap out({n, p.dim(2), p.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    const T* in = p.data() + s * c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t ch = 1; ch < c; ++ch) {
        if (in[ch * plane + i] > in[best * plane + i]) best = ch;
      }
      out[s * plane + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

/// Per-pixel maximum over channels, N x 1 x H x W.
template <typename T>
Tensor<T> channel_max(const Tensor<T>& p) {
  require_rank(p.shape(), 4, "channel_max");
  const std::size_t n = p.dim(0), c = p.dim(1), plane = p.dim(2) * p.dim(3);
  Tensor<T> out({n, 1, p.dim(2), p.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    const T* in = p.data() + s * c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = in[i];
      for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, in[ch * plane + i]);
      out[s * plane + i] = mx;
    }
  }
  return out;
}

/// Tape-free convenience wrappers.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tape<T> tape;
  return softmax_channels(tape.constant(logits)).value();
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  Tape<T> tape;
  return bilinear_resize(tape.constant(x), out_h, out_w).value();
}

}  // namespace synfoc
