#pragma once

#include <cmath>
#include <string>

#include "djfk/error.hpp"
#include "djfk/rng.hpp"
#include "djfk/tensor.hpp"

namespace djfk::flow {

/// One point on the straight noise-to-data path: x_t = t*x + (1-t)*eps.
template <class T>
struct FlowSample {
  Tensor<T> x;
  Tensor<T> eps;
  T t{0};
  Tensor<T> x_t;
  Tensor<T> v_target;  // x - eps
};

template <class T>
Tensor<T> standard_normal(const Shape& shape, Rng& rng) {
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(rng.normal());
  return out;
}

template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& x, Tensor<T> eps, T t) {
  if (!(t >= T{0} && t <= T{1})) throw ContractError("make_flow_sample: t must lie in [0, 1], got " + std::to_string(t));
  if (eps.shape() != x.shape()) throw ShapeError("make_flow_sample: noise shape mismatch");
  FlowSample<T> s{x, std::move(eps), t, Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  for (std::size_t i = 0; i < x.numel(); ++i) {
    // Endpoints are selected explicitly so t in {0, 1} is bit-exact.
    s.x_t[i] = t == T{1} ? x[i] : t == T{0} ? s.eps[i] : t * x[i] + (T{1} - t) * s.eps[i];
    s.v_target[i] = x[i] - s.eps[i];
  }
  return s;
}

template <class T>
FlowSample<T> make_flow_sample(const Tensor<T>& x, Rng& rng, T t) {
  if (!(t >= T{0} && t <= T{1})) throw ContractError("make_flow_sample: t must lie in [0, 1], got " + std::to_string(t));
  return make_flow_sample(x, standard_normal<T>(x.shape(), rng), t);
}

/// Conditional flow-matching loss for one sample: mean over dims of
/// (v_pred - (x - eps))^2.
template <class T>
T flow_loss(const Tensor<T>& v_pred, const FlowSample<T>& s) {
  if (v_pred.shape() != s.v_target.shape()) {
    throw ShapeError("flow_loss: prediction " + shape_str(v_pred.shape()) + " vs target " + shape_str(s.v_target.shape()));
  }
  T acc{0};
  for (std::size_t i = 0; i < v_pred.numel(); ++i) {
    const T d = v_pred[i] - s.v_target[i];
    acc += d * d;
  }
  return acc / static_cast<T>(v_pred.numel());
}

/// Time shift t' = s*t / (1 + (s-1)*t); s > 1 packs steps toward t = 1.
inline double shift_time(double t, double s) {
  if (!(s > 0.0)) throw ConfigError("flow.shift must be > 0");
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return s * t / (1.0 + (s - 1.0) * t);
}

/// v_uncond + w * (v_cond - v_uncond).
template <class T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, double w) {
  if (v_cond.shape() != v_uncond.shape()) throw ShapeError("cfg_velocity: shape mismatch");
  if (!(w >= 0.0)) throw ConfigError("flow.cfg must be >= 0");
  Tensor<T> out(v_cond.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(v_uncond[i] + w * (v_cond[i] - v_uncond[i]));
  return out;
}

struct SolverConfig {
  int steps = 250;
  double time_shift = 4.5;
  double cfg_weight = 1.0;

  void validate() const {
    if (steps < 1) throw ConfigError("flow.steps must be >= 1");
    if (!(time_shift > 0.0)) throw ConfigError("flow.shift must be > 0");
    if (!(cfg_weight >= 0.0)) throw ConfigError("flow.cfg must be >= 0");
  }
};

/// Euler integration of dx = v(x, t, z) dt from t = 0 to 1 on shifted knots,
/// starting from the given state x0.
template <class T, class Velocity, class Cond>
Tensor<T> euler_integrate(Velocity&& velocity_fn, Tensor<T> x, const Cond& z, const SolverConfig& cfg) {
  cfg.validate();
  double t_prev = shift_time(0.0, cfg.time_shift);
  for (int k = 0; k < cfg.steps; ++k) {
    const double t_next = shift_time(static_cast<double>(k + 1) / cfg.steps, cfg.time_shift);
    const Tensor<T> v = velocity_fn(x, static_cast<T>(t_prev), z);
    if (v.shape() != x.shape()) throw ShapeError("euler: velocity shape " + shape_str(v.shape()) + " vs state " + shape_str(x.shape()));
    const T dt = static_cast<T>(t_next - t_prev);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += dt * v[i];
    if (!x.all_finite()) throw NumericError("euler solve produced a non-finite state at step " + std::to_string(k));
    t_prev = t_next;
  }
  return x;
}

/// Draw x0 ~ N(0, I) with the given shape, then integrate to t = 1.
template <class T, class Velocity, class Cond>
Tensor<T> euler_solve(Velocity&& velocity_fn, const Cond& z, const Shape& state_shape, const SolverConfig& cfg, Rng& rng) {
  return euler_integrate<T>(std::forward<Velocity>(velocity_fn), standard_normal<T>(state_shape, rng), z, cfg);
}

}  // namespace djfk::flow
