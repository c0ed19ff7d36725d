#pragma once

#include <cmath>
#include <span>
#include <string>

#include "djfk/error.hpp"
#include "djfk/parameter.hpp"

namespace djfk {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0 (got " + std::to_string(lr) + ")");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  }
};

/// Bias-corrected Adam step with decoupled weight decay, then zero the grads.
///
/// The decay term uses the value from before the Adam update.
template <class T>
void optimizer_step(std::span<const NamedParameter<T>> params, const AdamWConfig& cfg) {
  cfg.validate();
  for (const auto& np : params) {
    Parameter<T>& p = *np.param;
    const auto t = static_cast<double>(p.step_count + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      const double m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
      p.first_moment[i] = static_cast<T>(m);
      p.second_moment[i] = static_cast<T>(v);
      const double before = p.value[i];
      const double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p.value[i] = static_cast<T>(before - update - cfg.lr * cfg.weight_decay * before);
    }
    p.zero_grad();
    ++p.step_count;
  }
}

template <class T>
void zero_grads(std::span<const NamedParameter<T>> params) {
  for (const auto& np : params) np.param->zero_grad();
}

template <class T>
double grad_norm(std::span<const NamedParameter<T>> params) {
  double s = 0.0;
  for (const auto& np : params) {
    for (auto g : np.param->grad.data()) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

/// Scale all grads so the global L2 norm is at most max_norm.
template <class T>
void clip_grad_norm(std::span<const NamedParameter<T>> params, double max_norm) {
  const double n = grad_norm(params);
  if (max_norm <= 0.0 || n <= max_norm) return;
  const double k = max_norm / n;
  for (const auto& np : params) {
    for (auto& g : np.param->grad.data()) g = static_cast<T>(g * k);
  }
}

}  // namespace djfk
