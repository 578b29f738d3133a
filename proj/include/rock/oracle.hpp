#pragma once

#include <vector>

#include "rock/tensor.hpp"

namespace rock {

/// White-box access to a dense per-pixel segmenter F(x, ·).
/// Implementations must be reentrant: concurrent calls on distinct inputs may
/// not interfere.
class GradientOracle {
 public:
  virtual ~GradientOracle() = default;
  /// K+1.
  virtual int output_channels() const = 0;
  /// (K+1)×H×W pre-softmax map.
  virtual Tensor logits(const Tensor& x) const = 0;
  /// ∇_x Σ_{k,t} weights(k,t)·F_k(x,t); linear in `weights`.
  /// When `logits_out` is given it receives F(x, ·) from the same forward pass.
  virtual Tensor input_gradient(const Tensor& x, const Tensor& weights, Tensor* logits_out = nullptr) const = 0;
};

/// White-box access to an image classifier producing C logits.
class ClassifierOracle {
 public:
  virtual ~ClassifierOracle() = default;
  virtual std::vector<double> logits(const Tensor& x) const = 0;
  /// ∇_x of the cross-entropy of `label`; the loss itself goes to `loss_out`.
  virtual Tensor loss_gradient(const Tensor& x, int label, double* loss_out = nullptr) const = 0;
};

}  // namespace rock
