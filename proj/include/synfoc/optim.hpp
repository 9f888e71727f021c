#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "synfoc/autodiff.hpp"

namespace synfoc {

enum class OptimizerKind { kSgdMomentum, kAdamW };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::kSgdMomentum ? "sgd-momentum" : "adamw";
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgdMomentum;
  double lr = 0.03;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double epsilon = 1e-8;

  static OptimizerConfig sgd(double lr, double momentum, double wd) {
    return {OptimizerKind::kSgdMomentum, lr, momentum, 0.9, 0.999, wd, 1e-8};
  }
  static OptimizerConfig adamw(double lr, double b1, double b2, double wd, double eps = 1e-8) {
    return {OptimizerKind::kAdamW, lr, 0.0, b1, b2, wd, eps};
  }
};

/// Per-parameter slots for SGD with momentum or AdamW.
///   SGD:   v <- mu v + g;  p <- p - lr (v + wd p)
///   AdamW: bias-corrected moments, decoupled decay p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
template <typename T>
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const noexcept { return cfg_; }
  OptimizerConfig& mutable_config() noexcept { return cfg_; }
  std::int64_t steps() const noexcept { return step_; }

  /// Applies one update to every parameter in `params` using its accumulated grad.
  void step(const std::vector<Parameter<T>*>& params) {
    if (slots_.empty()) {
      for (auto* p : params) {
        slots_.push_back(Tensor<T>(p->value.shape(), T{0}));
        if (cfg_.kind == OptimizerKind::kAdamW) second_.push_back(Tensor<T>(p->value.shape(), T{0}));
      }
    }
    if (slots_.size() != params.size()) {
      throw ShapeError("optimizer: expected " + std::to_string(slots_.size()) + " parameters, got " +
                       std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->value.shape() != slots_[i].shape() || params[i]->grad.shape() != slots_[i].shape()) {
        throw ShapeError("optimizer: slot shape mismatch for parameter " + params[i]->name);
      }
    }
    ++step_;
    const T lr = static_cast<T>(cfg_.lr);
    const T wd = static_cast<T>(cfg_.weight_decay);
    if (cfg_.kind == OptimizerKind::kSgdMomentum) {
      const T mu = static_cast<T>(cfg_.momentum);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->value;
        const auto& g = params[i]->grad;
        auto& v = slots_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
          v[k] = mu * v[k] + g[k];
          p[k] -= lr * (v[k] + wd * p[k]);
        }
      }
      return;
    }
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2), eps = static_cast<T>(cfg_.epsilon);
    const T c1 = T{1} - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(step_)));
    const T c2 = T{1} - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(step_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i]->value;
      const auto& g = params[i]->grad;
      auto& m = slots_[i];
      auto& v = second_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = b1 * m[k] + (T{1} - b1) * g[k];
        v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
        const T mhat = m[k] / c1, vhat = v[k] / c2;
        p[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[k]);
      }
    }
  }

  // Slot access for checkpointing.
  std::vector<Tensor<T>>& first_moments() noexcept { return slots_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return second_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return slots_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return second_; }
  void set_steps(std::int64_t s) { step_ = s; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor<T>> slots_;   // momentum (SGD) or first moment (AdamW)
  std::vector<Tensor<T>> second_;  // AdamW only
  std::int64_t step_ = 0;
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace synfoc
