#pragma once

#include <cstddef>
#include <map>
#include <optional>

#include "qforget/params.hpp"
#include "qforget/tensor.hpp"

namespace qforget::optim {

/// base_lr * (1 + cos(pi * t / T)) / 2 for 0 <= t <= T; throws past T.
double cosine_lr(std::size_t t, std::size_t total_steps, double base_lr);

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 1.0;
  std::size_t total_steps = 300;
  /// Cosine annealing over total_steps; constant lr when false.
  bool cosine = true;
  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

/// AdamW with decoupled weight decay. The raw gradient is clipped to
/// clip_norm (global norm over trainable entries) before the moment
/// updates. Step t (1-based) uses cosine_lr(t - 1, T).
class AdamW {
 public:
  explicit AdamW(AdamWConfig config);

  /// One update of every unfrozen entry. grads must cover all unfrozen
  /// entries. An optional per-entry 0/1 mask multiplies the update, so
  /// masked coordinates do not move at all.
  void step(ParamSet& params, const NamedTensors& grads, const NamedTensors* mask = nullptr);

  std::size_t steps_taken() const { return t_; }
  double current_lr() const;
  const AdamWConfig& config() const { return config_; }
  /// Norm of the last raw (pre-clip) gradient.
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  double last_grad_norm_ = 0.0;
  NamedTensors m_;
  NamedTensors v_;
};

}  // namespace qforget::optim
