#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/feedback.hpp"
#include "djfk/rng.hpp"
#include "djfk/synthdata.hpp"

namespace djfk::feedback {

/// Paired feedback simulation over a Zipf-tagged synthetic corpus. The budget
/// counts accepted records, so both runs end with the same training set size.
struct SimConfig {
  std::size_t budget = 100000;
  std::size_t classes = 1000;  // values of the "notion" attribute
  double zipf = 1.2;
  TruncNormal natural{96.0, 64.0, 16.0, 512.0};  // corpus long side, tokens
  int stride = 16;                               // pixels per token
  TruncNormal target{1.024, 1.0, 0.256, 4.096};  // kilo-pixels
  std::size_t window = 10000;
  int bins = 64;
  std::uint64_t coverage_min = 10;     // accepts needed for a class to count as covered
  std::uint64_t max_attempts = 1000000;  // per target draw

  void validate() const {
    if (budget < 1) throw ConfigError("sim.budget must be >= 1");
    if (classes < 1) throw ConfigError("sim.classes must be >= 1");
    if (!(zipf >= 0.0)) throw ConfigError("sim.zipf must be >= 0");
    natural.validate();
    target.validate();
    if (stride < 1) throw ConfigError("sim.stride must be >= 1");
    if (window < 1) throw ConfigError("sim.window must be >= 1");
    if (bins < 1) throw ConfigError("sim.bins must be >= 1");
    if (max_attempts < 1) throw ConfigError("sim.max_attempts must be >= 1");
  }

  FeedbackConfig feedback_config() const {
    return FeedbackConfig{{AttributeSpec{"notion", std::vector<double>(classes, 1.0 / static_cast<double>(classes))}}, window, 0.5, target, bins};
  }

  synth::SynthSpec corpus() const {
    synth::SynthSpec s;
    s.classes = 1;
    s.token_dim = 1;
    s.means = {{0.0}};
    s.field = {{0.0, 0.0}};
    s.long_side = natural;
    s.stride = stride;
    s.attributes = {synth::AttributeLaw{"notion", classes, zipf}};
    s.validate();
    return s;
  }
};

struct SimResult {
  std::uint64_t run = 0;
  bool feedback = false;
  double kl = 0.0;
  std::size_t coverage = 0;      // classes with >= coverage_min accepts
  std::size_t coverage_any = 0;  // classes with >= 1 accept
  double head_share = 0.0;       // accepted share of value 0, the Zipf head
  std::uint64_t accepted = 0;
  std::uint64_t rejected = 0;
  std::vector<double> long_sides;  // accepted long sides, kilo-pixels
};

/// With feedback the record must pass the non-transformable rule, then be
/// downscaled to a trunc_norm resolution target (drawn anew after each
/// accept). Without it every offered record is accepted as is.
inline SimResult simulate(const SimConfig& cfg, bool feedback_on, std::uint64_t seed, std::uint64_t run = 0) {
  cfg.validate();
  const auto spec = cfg.corpus();
  const auto laws = synth::make_laws(spec);
  FeedbackState state(cfg.feedback_config());
  Rng data(seed);
  Rng decide = data.split(), target = data.split();

  SimResult out;
  out.run = run;
  out.feedback = feedback_on;
  out.long_sides.reserve(cfg.budget);
  double want = trunc_norm_sample(cfg.target, target);
  std::uint64_t attempts = 0;
  while (state.accepted() < cfg.budget) {
    const auto rec = synth::gen_record_meta(spec, data, laws);
    if (!feedback_on) {
      state.apply(Outcome{rec, true});
      out.long_sides.push_back(rec.long_side_units());
      continue;
    }
    if (++attempts > cfg.max_attempts) {
      throw NumericError("feedback simulation: no record reaches target " + std::to_string(want) + " after " +
                         std::to_string(cfg.max_attempts) + " attempts");
    }
    if (!state.decide(rec, decide)) {
      state.apply(Outcome{rec, false});
      continue;
    }
    const auto t = accept_transformable(rec, want);
    state.apply(Outcome{t ? *t : rec, t.has_value()});
    if (!t) continue;
    out.long_sides.push_back(t->long_side_units());
    want = trunc_norm_sample(cfg.target, target);
    attempts = 0;
  }

  out.accepted = state.accepted();
  out.rejected = state.rejected();
  out.kl = kl_to_target(state.resolution_histogram(), cfg.target);
  const auto& notion = state.attribute("notion");
  for (auto c : notion.accepted) {
    if (c >= cfg.coverage_min) ++out.coverage;
    if (c >= 1) ++out.coverage_any;
  }
  out.head_share = static_cast<double>(notion.accepted[0]) / static_cast<double>(out.accepted);
  return out;
}

inline void write_sim_header(std::ostream& os) { os << "run,feedback,kl,coverage,accepted,rejected\n"; }

inline void write_sim_row(std::ostream& os, const SimResult& r) {
  char kl[32];
  std::snprintf(kl, sizeof kl, "%.9g", r.kl);
  os << r.run << ',' << (r.feedback ? "on" : "off") << ',' << kl << ',' << r.coverage << ',' << r.accepted << ',' << r.rejected << '\n';
}

}  // namespace djfk::feedback
