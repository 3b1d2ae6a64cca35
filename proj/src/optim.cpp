#include "qforget/optim.hpp"

#include <cmath>
#include <numbers>

#include "qforget/error.hpp"

namespace qforget::optim {

double cosine_lr(std::size_t t, std::size_t total_steps, double base_lr) {
  if (t > total_steps) {
    throw ConfigError("cosine_lr: step " + std::to_string(t) + " exceeds total " + std::to_string(total_steps));
  }
  if (total_steps == 0) return base_lr;
  if (t == total_steps) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(phase));
}

AdamW::AdamW(AdamWConfig config) : config_(config) {
  if (!(config_.lr >= 0.0) || !(config_.eps > 0.0) || config_.beta1 < 0.0 || config_.beta1 >= 1.0 ||
      config_.beta2 < 0.0 || config_.beta2 >= 1.0 || config_.weight_decay < 0.0) {
    throw ConfigError("AdamW: invalid hyperparameters");
  }
}

double AdamW::current_lr() const {
  if (!config_.cosine) return config_.lr;
  return cosine_lr(std::min(t_, config_.total_steps), config_.total_steps, config_.lr);
}

void AdamW::step(ParamSet& params, const NamedTensors& grads, const NamedTensors* mask) {
  const auto names = params.trainable_names();
  double norm_sq = 0.0;
  for (const auto& name : names) {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("AdamW: no gradient for trainable parameter '" + name + "'");
    if (it->second.shape() != params.at(name).value.shape()) {
      throw ShapeError("AdamW: gradient shape " + shape_string(it->second.shape()) + " does not match parameter '" +
                       name + "' " + shape_string(params.at(name).value.shape()));
    }
    for (double g : it->second.values()) {
      if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient for parameter '" + name + "'");
      norm_sq += g * g;
    }
  }
  last_grad_norm_ = std::sqrt(norm_sq);
  const double clip = (config_.clip_norm > 0.0 && last_grad_norm_ > config_.clip_norm)
                          ? config_.clip_norm / last_grad_norm_
                          : 1.0;

  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));

  for (const auto& name : names) {
    Tensor& w = params.at(name).value;
    const Tensor& g = grads.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Tensor::zeros_like(w));
    auto [vit, v_new] = v_.try_emplace(name, Tensor::zeros_like(w));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const Tensor* mk = nullptr;
    if (mask) {
      auto it = mask->find(name);
      if (it != mask->end()) mk = &it->second;
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = clip == 1.0 ? g[i] : g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      double update = lr * config_.weight_decay * w[i] + lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      if (mk) update *= (*mk)[i];
      w[i] -= update;
    }
  }
}

}  // namespace qforget::optim
