#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "djfk/checkpoint.hpp"
#include "djfk/config.hpp"
#include "djfk/feedback.hpp"
#include "djfk/jepa.hpp"
#include "djfk/posenc.hpp"
#include "djfk/rng.hpp"
#include "djfk/synthdata.hpp"

namespace djfk::train {

/// Model plus every random stream a run consumes, so a run can stop at any
/// step and continue bit-identically from a checkpoint.
template <class T>
struct TrainState {
  RunConfig cfg;
  jepa::Model<T> model;
  Rng data_rng;
  Rng target_rng;
  Rng step_rng;
  std::uint64_t step = 0;
};

template <class T>
TrainState<T> init_state(const RunConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng init = root.split();
  TrainState<T> s{cfg, jepa::init_model<T>(cfg.model, init), root.split(), root.split(), root.split(), 0};
  return s;
}

/// Long-side target (kilo-pixels) for a step: fixed in phase 1, drawn from
/// the trunc_norm law in phase 2.
inline double resolution_target(const RunConfig& cfg, std::uint64_t step, Rng& target_rng) {
  if (step < cfg.phase1_steps) return cfg.phase1_side * cfg.stride / feedback::kPixelsPerUnit;
  return feedback::trunc_norm_sample(cfg.res, target_rng);
}

/// Draw corpus records until one downscales to the target, then render it.
template <class T>
jepa::Example<T> draw_example(const RunConfig& cfg, const synth::SynthSpec& spec, const std::vector<synth::Zipf>& laws, double target,
                              Rng& data_rng) {
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const auto rec = synth::gen_record_meta(spec, data_rng, laws);
    const auto t = feedback::accept_transformable(rec, target);
    if (!t) continue;
    const int w = posenc::pixels_to_tokens(t->width, cfg.stride), h = posenc::pixels_to_tokens(t->height, cfg.stride);
    return jepa::Example<T>{synth::render<T>(spec, rec.label, w, h, data_rng), rec.label};
  }
  throw NumericError("no corpus record reaches resolution target " + std::to_string(target));
}

struct RunHooks {
  std::ostream* metrics = nullptr;                                // CSV rows, header written by the caller
  std::function<void(std::uint64_t step)> checkpoint;             // called every checkpoint_every steps
  std::vector<double>* phase2_targets = nullptr;                  // sampled kilo-pixel targets
};

/// Advance to `until` steps (absolute).
template <class T>
std::vector<jepa::Metrics> run(TrainState<T>& s, std::uint64_t until, const RunHooks& hooks = {}) {
  const auto spec = s.cfg.data_spec();
  const auto laws = synth::make_laws(spec);
  std::vector<jepa::Metrics> out;
  while (s.step < until) {
    const double target = resolution_target(s.cfg, s.step, s.target_rng);
    if (hooks.phase2_targets && s.step >= s.cfg.phase1_steps) hooks.phase2_targets->push_back(target);
    std::vector<jepa::Example<T>> batch;
    for (int b = 0; b < s.cfg.batch; ++b) batch.push_back(draw_example<T>(s.cfg, spec, laws, target, s.data_rng));
    const auto m = jepa::train_step<T>(s.model, batch, s.step_rng, s.step);
    if (hooks.metrics) jepa::write_metrics_row(*hooks.metrics, m);
    out.push_back(m);
    ++s.step;
    if (hooks.checkpoint && s.cfg.checkpoint_every > 0 && s.step % s.cfg.checkpoint_every == 0) hooks.checkpoint(s.step);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint mapping

template <class T>
ckpt::Checkpoint to_checkpoint(TrainState<T>& s) {
  ckpt::Checkpoint c;
  c.digest = config_digest(s.cfg);
  c.put_text("config", config_text(s.cfg));
  c.put_u64("train.step", s.step);
  c.put_text("rng.data", s.data_rng.state());
  c.put_text("rng.target", s.target_rng.state());
  c.put_text("rng.step", s.step_rng.state());
  for (const auto& [name, p] : s.model.trainable()) {
    c.put(name + ".value", p->value);
    c.put(name + ".m", p->first_moment);
    c.put(name + ".v", p->second_moment);
    c.put_u64(name + ".steps", p->step_count);
  }
  for (const auto& [name, p] : s.model.shadow()) c.put(name + ".value", p->value);
  return c;
}

/// Config embedded in a checkpoint.
inline RunConfig checkpoint_config(const ckpt::Checkpoint& c) {
  const auto cfg = parse_config(c.get_text("config"));
  if (config_digest(cfg) != c.digest) throw FormatError("checkpoint config does not match its digest (corrupt file)");
  return cfg;
}

/// Rebuild the state; `cfg` may differ from the stored one only in keys the
/// digest ignores (or anywhere, if the caller forced the load).
template <class T>
TrainState<T> from_checkpoint(const ckpt::Checkpoint& c, const RunConfig& cfg) {
  TrainState<T> s = init_state<T>(cfg);
  auto restore = [&](const std::string& name, Tensor<T>& dst) {
    auto t = c.get<T>(name);
    if (t.shape() != dst.shape()) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " + shape_str(dst.shape()));
    }
    dst = std::move(t);
  };
  for (const auto& [name, p] : s.model.trainable()) {
    restore(name + ".value", p->value);
    restore(name + ".m", p->first_moment);
    restore(name + ".v", p->second_moment);
    p->step_count = c.get_u64(name + ".steps");
  }
  for (const auto& [name, p] : s.model.shadow()) restore(name + ".value", p->value);
  s.step = c.get_u64("train.step");
  s.data_rng.set_state(c.get_text("rng.data"));
  s.target_rng.set_state(c.get_text("rng.target"));
  s.step_rng.set_state(c.get_text("rng.step"));
  return s;
}

}  // namespace djfk::train
