#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>

#include "djfk/error.hpp"
#include "djfk/feedback.hpp"
#include "djfk/flowmatch.hpp"
#include "djfk/jepa.hpp"
#include "djfk/simulation.hpp"
#include "djfk/synthdata.hpp"

namespace djfk {

/// Everything a run needs. Text form is flat `key = value` lines with dotted
/// namespaces; `#` starts a comment.
struct RunConfig {
  std::uint64_t seed = 0;

  jepa::Config model;
  int grid = posenc::kDefaultGrid;
  int stride = posenc::kDefaultTokenStride;
  flow::SolverConfig solver{250, 4.5, 2.0};
  int ar_steps = 0;

  std::string dtype = "f32";
  int batch = 8;
  std::uint64_t steps = 1000;
  std::uint64_t phase1_steps = 200;
  int phase1_side = 12;                          // tokens
  feedback::TruncNormal res{0.192, 0.064, 0.128, 0.256};  // phase 2 long side, kilo-pixels
  std::uint64_t checkpoint_every = 0;

  double sigma = 0.1;
  double spread = 1.0;
  double field_scale = 0.5;
  std::uint64_t data_seed = 20240731;
  feedback::TruncNormal natural{14.0, 4.0, 8.0, 24.0};  // corpus long side, tokens
  double aspect_min = 0.5;
  double aspect_max = 2.0;

  feedback::SimConfig sim;
  int sim_runs = 100;

  /// Calls f(key, member) for every configurable field.
  template <class Self, class F>
  static void fields(Self& c, F&& f) {
    f("seed", c.seed);
    f("model.width", c.model.model.width);
    f("model.heads", c.model.model.heads);
    f("model.blocks", c.model.model.blocks);
    f("model.rope_base", c.model.model.rope_base);
    f("model.qk_norm", c.model.model.qk_norm);
    f("model.text_tokens", c.model.text_tokens);
    f("denoiser.hidden", c.model.denoiser_hidden);
    f("denoiser.layers", c.model.denoiser_layers);
    f("denoiser.time_embed_dim", c.model.time_embed_dim);
    f("posenc.grid", c.grid);
    f("posenc.stride", c.stride);
    f("flow.steps", c.solver.steps);
    f("flow.shift", c.solver.time_shift);
    f("flow.cfg", c.solver.cfg_weight);
    f("schedule.steps", c.ar_steps);
    f("train.dtype", c.dtype);
    f("train.lr", c.model.optim.lr);
    f("train.beta1", c.model.optim.beta1);
    f("train.beta2", c.model.optim.beta2);
    f("train.eps", c.model.optim.eps);
    f("train.weight_decay", c.model.optim.weight_decay);
    f("train.lambda_pred", c.model.lambda_pred);
    f("train.ema_tau", c.model.ema_tau);
    f("train.mask_min", c.model.mask_min);
    f("train.mask_max", c.model.mask_max);
    f("train.cond_drop", c.model.cond_drop);
    f("train.token_cap", c.model.token_cap);
    f("train.flow_repeats", c.model.flow_repeats);
    f("train.grad_clip", c.model.grad_clip);
    f("train.batch", c.batch);
    f("train.steps", c.steps);
    f("train.phase1_steps", c.phase1_steps);
    f("train.phase1_side", c.phase1_side);
    f("train.res_mu", c.res.mu);
    f("train.res_sigma", c.res.sigma);
    f("train.res_min", c.res.a);
    f("train.res_max", c.res.b);
    f("train.checkpoint_every", c.checkpoint_every);
    f("data.classes", c.model.classes);
    f("data.token_dim", c.model.token_dim);
    f("data.sigma", c.sigma);
    f("data.spread", c.spread);
    f("data.field_scale", c.field_scale);
    f("data.seed", c.data_seed);
    f("data.long_mu", c.natural.mu);
    f("data.long_sigma", c.natural.sigma);
    f("data.long_min", c.natural.a);
    f("data.long_max", c.natural.b);
    f("data.aspect_min", c.aspect_min);
    f("data.aspect_max", c.aspect_max);
    f("sim.window", c.sim.window);
    f("sim.bins", c.sim.bins);
    f("sim.coverage_min", c.sim.coverage_min);
    f("sim.budget", c.sim.budget);
    f("sim.classes", c.sim.classes);
    f("sim.zipf", c.sim.zipf);
    f("sim.runs", c.sim_runs);
    f("sim.res_mu", c.sim.target.mu);
    f("sim.res_sigma", c.sim.target.sigma);
    f("sim.res_min", c.sim.target.a);
    f("sim.res_max", c.sim.target.b);
  }

  synth::SynthSpec data_spec() const {
    auto s = synth::make_spec(model.classes, model.token_dim, sigma, spread, field_scale, data_seed);
    s.long_side = natural;
    s.aspect_min = aspect_min;
    s.aspect_max = aspect_max;
    s.grid = grid;
    s.stride = stride;
    s.validate();
    return s;
  }

  void validate() const {
    model.validate();
    if (grid < 1) throw ConfigError("posenc.grid must be >= 1");
    if (stride < 1) throw ConfigError("posenc.stride must be >= 1");
    solver.validate();
    if (ar_steps < 0 || ar_steps > 128) throw ConfigError("schedule.steps must be in [0, 128] (0 = default)");
    if (dtype != "f32" && dtype != "f64") throw ConfigError("train.dtype must be f32 or f64, got '" + dtype + "'");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (phase1_side < 1) throw ConfigError("train.phase1_side must be >= 1");
    if (!(res.sigma > 0.0)) throw ConfigError("train.res_sigma must be > 0");
    if (!(res.a > 0.0 && res.a < res.b)) throw ConfigError("train.res_min must be > 0 and < train.res_max");
    if (!(sigma >= 0.0)) throw ConfigError("data.sigma must be >= 0");
    if (!(natural.sigma > 0.0)) throw ConfigError("data.long_sigma must be > 0");
    if (!(natural.a >= 1.0 && natural.a < natural.b)) throw ConfigError("data.long_min must be >= 1 and < data.long_max");
    if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) throw ConfigError("data.aspect_min must be > 0 and <= data.aspect_max");
    // Every target must be reachable by downscaling some corpus record.
    const double largest = std::max(res.b * feedback::kPixelsPerUnit / stride, static_cast<double>(phase1_side));
    if (largest > natural.b) {
      throw ConfigError("train.res_max / train.phase1_side exceed the corpus long side data.long_max (" + std::to_string(natural.b) + " tokens)");
    }
    if (sim_runs < 1) throw ConfigError("sim.runs must be >= 1");
    sim.validate();
    data_spec();
  }
};

namespace config_detail {

template <class V>
void parse_into(const std::string& key, const std::string& text, V& out) {
  auto bad = [&](const char* what) { return ConfigError("config key '" + key + "': expected " + what + ", got '" + text + "'"); };
  if constexpr (std::is_same_v<V, std::string>) {
    out = text;
  } else if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else throw bad("true or false");
  } else if constexpr (std::is_floating_point_v<V>) {
    std::size_t used = 0;
    try {
      out = std::stod(text, &used);
    } catch (const std::exception&) {
      throw bad("a number");
    }
    if (used != text.size()) throw bad("a number");
  } else if constexpr (std::is_signed_v<V>) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (const std::exception&) {
      throw bad("an integer");
    }
    if (used != text.size() || v < std::numeric_limits<V>::min() || v > std::numeric_limits<V>::max()) throw bad("an integer");
    out = static_cast<V>(v);
  } else {
    std::size_t used = 0;
    unsigned long long v = 0;
    if (!text.empty() && text[0] == '-') throw bad("a non-negative integer");
    try {
      v = std::stoull(text, &used);
    } catch (const std::exception&) {
      throw bad("a non-negative integer");
    }
    if (used != text.size() || v > std::numeric_limits<V>::max()) throw bad("a non-negative integer");
    out = static_cast<V>(v);
  }
}

template <class V>
std::string format(const V& v) {
  if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<V>) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  } else {
    return std::to_string(v);
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace config_detail

/// Apply one override; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  RunConfig::fields(c, [&](const char* k, auto& member) {
    if (key != k) return;
    config_detail::parse_into(key, value, member);
    found = true;
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

/// Overrides on top of `base` from key = value text. Validates the result.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = config_detail::trim(line.substr(0, eq));
    const auto value = config_detail::trim(line.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError("config key '" + key + "' repeated on lines " + std::to_string(it->second) + " and " + std::to_string(lineno));
    }
    seen[key] = lineno;
    set_config_value(base, key, value);
  }
  base.validate();
  return base;
}

/// Canonical text: every key in declaration order.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  RunConfig::fields(c, [&](const char* k, const auto& member) { out += std::string(k) + " = " + config_detail::format(member) + "\n"; });
  return out;
}

/// Keys that may change between a checkpoint and a resumed run.
inline bool digest_exempt(const std::string& key) { return key == "train.steps" || key == "train.checkpoint_every"; }

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_digest(const RunConfig& c) {
  std::string out;
  RunConfig::fields(c, [&](const char* k, const auto& member) {
    if (!digest_exempt(k)) out += std::string(k) + "=" + config_detail::format(member) + "\n";
  });
  return fnv1a(out);
}

}  // namespace djfk
