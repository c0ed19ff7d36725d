#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/flowmatch.hpp"
#include "djfk/grid.hpp"
#include "djfk/jepa.hpp"
#include "djfk/posenc.hpp"
#include "djfk/rng.hpp"

namespace djfk::sampler {

using djfk::token_drop;

inline constexpr int kMaxArSteps = 128;
inline constexpr double kMetricCfg = 6.0;
inline constexpr double kDefaultCfg = 2.0;

struct ScheduleSpec {
  int steps = 1;
  std::size_t tokens = 1;
  std::vector<std::size_t> counts;  // tokens produced at each step

  /// Fraction of tokens still masked after step k (k = 0 means before any step).
  double mask_ratio(std::size_t k) const {
    std::size_t done = 0;
    for (std::size_t i = 0; i < k && i < counts.size(); ++i) done += counts[i];
    return static_cast<double>(tokens - done) / static_cast<double>(tokens);
  }
};

/// remaining_k = round(N cos(pi/2 k/T)), n_k = remaining_{k-1} - remaining_k.
/// Empty steps are repaired by moving one token from the currently largest
/// step (latest on ties), which keeps the total at N.
inline ScheduleSpec cosine_step_counts(int steps, std::size_t n) {
  if (steps < 1) throw ConfigError("schedule.steps must be >= 1");
  if (n < 1) throw ConfigError("schedule needs at least one token");
  if (static_cast<std::size_t>(steps) > n) {
    throw ConfigError("schedule.steps (" + std::to_string(steps) + ") exceeds token count " + std::to_string(n));
  }
  ScheduleSpec s{steps, n, std::vector<std::size_t>(static_cast<std::size_t>(steps))};
  auto remaining = [&](int k) {
    if (k == 0) return n;
    if (k == steps) return std::size_t{0};
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * std::cos(std::numbers::pi / 2.0 * k / steps)));
  };
  for (int k = 1; k <= steps; ++k) s.counts[static_cast<std::size_t>(k - 1)] = remaining(k - 1) - remaining(k);
  for (auto& c : s.counts) {
    if (c != 0) continue;
    auto largest = s.counts.begin();
    for (auto it = s.counts.begin(); it != s.counts.end(); ++it) {
      if (*it >= *largest) largest = it;
    }
    --*largest;
    c = 1;
  }
  return s;
}

/// 64 steps up to 256 tokens, 128 beyond; never more steps than tokens.
inline int default_ar_steps(std::size_t n) {
  const std::size_t t = n <= 256 ? 64 : static_cast<std::size_t>(kMaxArSteps);
  return static_cast<int>(std::min(t, n));
}

/// Same geometry with the relative positional offset replaced.
inline posenc::GridGeometry layout_offset(posenc::GridGeometry g, double b) {
  if (!std::isfinite(b)) throw ConfigError("sample.bias must be finite");
  g.b = b;
  return g;
}

struct GenerationRequest {
  int condition = 0;
  bool unconditional = false;  // use the null embedding whatever `condition` says
  int width = 16;              // tokens
  int height = 16;
  int grid = posenc::kDefaultGrid;
  std::optional<double> rho;
  std::optional<double> bias;
  std::uint64_t seed = 0;
  flow::SolverConfig solver{250, 4.5, kDefaultCfg};
  int ar_steps = 0;  // 0: default_ar_steps(W * H)

  void validate() const {
    if (width < 1 || height < 1) throw ConfigError("sample.width and sample.height must be >= 1");
    if (rho && !(*rho > 0.0)) throw ConfigError("sample.rho must be > 0");
    if (bias && !std::isfinite(*bias)) throw ConfigError("sample.bias must be finite");
    if (ar_steps < 0) throw ConfigError("sample.ar_steps must be >= 0");
    solver.validate();
  }

  posenc::GridGeometry geometry() const {
    auto g = posenc::grid_geometry(width, height, grid);
    if (rho) g.rho = *rho;
    if (bias) g = layout_offset(g, *bias);
    return g;
  }
};

/// Euler-solves one token per row of z_cond. With z_uncond the velocity is
/// guided as v_u + w (v_c - v_u); without it (or at w = 1) only the
/// conditional branch runs.
template <class T>
Tensor<T> denoise_tokens(jepa::Model<T>& m, const Tensor<T>& z_cond, const Tensor<T>* z_uncond, const flow::SolverConfig& solver, Rng& rng) {
  const std::size_t n = z_cond.rows();
  const bool guided = z_uncond != nullptr && solver.cfg_weight != 1.0;
  auto velocity = [&](const Tensor<T>& x, T t, int) {
    std::vector<T> tv(n, t);
    Tape<T> tape(false, false);
    auto vc = jepa::denoise(tape.constant(x), std::span<const T>(tv), tape.constant(z_cond), m.denoiser, m.cfg, mmvit::Bind::frozen);
    if (!guided) return vc.value();
    auto vu = jepa::denoise(tape.constant(x), std::span<const T>(tv), tape.constant(*z_uncond), m.denoiser, m.cfg, mmvit::Bind::frozen);
    return flow::cfg_velocity(vc.value(), vu.value(), solver.cfg_weight);
  };
  return flow::euler_solve<T>(velocity, 0, Shape{n, static_cast<std::size_t>(m.cfg.token_dim)}, solver, rng);
}

/// Features for the unfilled positions given the filled ones.
template <class T>
Tensor<T> predict_unfilled(jepa::Model<T>& m, const Tensor<T>& tokens, const std::vector<posenc::NormalizedPosition>& pos,
                           const std::vector<std::size_t>& filled, const std::vector<std::size_t>& unfilled, int condition) {
  Tape<T> tape(false, false);
  return jepa::predict_features(tape, m, gather(tokens, filled), gather(pos, filled), gather(pos, unfilled), condition, mmvit::Bind::frozen)
      .value();
}

/// Generalized next-token prediction: per step, encode the filled tokens,
/// predict z for every unfilled position, pick n of them uniformly and
/// denoise each with the flow ODE.
/// `fill_step`, when given, receives the step that produced each position.
template <class T>
TokenGrid<T> generate(const GenerationRequest& req, jepa::Model<T>& m, std::vector<int>* fill_step = nullptr) {
  req.validate();
  TokenGrid<T> out;
  out.geom = req.geometry();
  const auto pos = posenc::lattice_positions(out.geom);
  const std::size_t n = pos.size();
  const std::size_t d = static_cast<std::size_t>(m.cfg.token_dim);
  out.tokens = Tensor<T>(Shape{n, d});
  const auto schedule = cosine_step_counts(req.ar_steps > 0 ? req.ar_steps : default_ar_steps(n), n);
  const int cond = req.unconditional ? jepa::kNullCondition : req.condition;
  const bool guided = cond != jepa::kNullCondition && req.solver.cfg_weight != 1.0;

  Rng rng(req.seed);
  std::vector<char> filled(n, 0);
  if (fill_step) fill_step->assign(n, -1);
  for (std::size_t k = 0; k < schedule.counts.size(); ++k) {
    std::vector<std::size_t> done, todo;
    for (std::size_t i = 0; i < n; ++i) (filled[i] ? done : todo).push_back(i);
    const auto zc = predict_unfilled(m, out.tokens, pos, done, todo, cond);
    std::optional<Tensor<T>> zu;
    if (guided) zu = predict_unfilled(m, out.tokens, pos, done, todo, jepa::kNullCondition);

    const auto pick = token_drop(todo.size(), schedule.counts[k], rng);
    const auto zc_sel = gather(zc, pick);
    const auto zu_sel = zu ? std::optional<Tensor<T>>(gather(*zu, pick)) : std::nullopt;
    Tensor<T> x;
    try {
      x = denoise_tokens(m, zc_sel, zu_sel ? &*zu_sel : nullptr, req.solver, rng);
    } catch (const NumericError& e) {
      throw NumericError("generation step " + std::to_string(k) + ", first position " + std::to_string(todo[pick.front()]) + ": " + e.what());
    }
    for (std::size_t i = 0; i < pick.size(); ++i) {
      const std::size_t p = todo[pick[i]];
      if (filled[p]) throw ContractError("position " + std::to_string(p) + " generated twice");
      for (std::size_t j = 0; j < d; ++j) {
        const T v = x[i * d + j];
        if (!std::isfinite(v)) throw NumericError("non-finite token at generation step " + std::to_string(k) + ", position " + std::to_string(p));
        out.tokens[p * d + j] = v;
      }
      filled[p] = 1;
      if (fill_step) (*fill_step)[p] = static_cast<int>(k);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!filled[i]) throw ContractError("position " + std::to_string(i) + " left empty after generation");
  }
  return out;
}

}  // namespace djfk::sampler
