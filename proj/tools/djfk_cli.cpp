// djfk command line: train, sample, curves, feedback-sim, gradcheck.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "djfk/checkpoint.hpp"
#include "djfk/config.hpp"
#include "djfk/gridio.hpp"
#include "djfk/posenc.hpp"
#include "djfk/sampler.hpp"
#include "djfk/selfcheck.hpp"
#include "djfk/simulation.hpp"
#include "djfk/train.hpp"

using namespace djfk;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("DJFK_SEED");
  if (!s || !*s) return std::nullopt;
  std::uint64_t v = 0;
  config_detail::parse_into("DJFK_SEED", s, v);
  return v;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Defaults, then DJFK_SEED, then the config file, then --set overrides,
/// then --seed.
RunConfig build_config(const std::string& path, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed) {
  RunConfig base;
  if (auto s = env_seed()) base.seed = *s;
  std::string text = path.empty() ? "" : slurp(path);
  for (const auto& kv : sets) {
    if (kv.find('=') == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    text += "\n" + kv;
  }
  auto cfg = parse_config(text, base);
  if (seed) {
    cfg.seed = *seed;
    cfg.validate();
  }
  return cfg;
}

void save_atomic(const std::string& path, const ckpt::Checkpoint& c) {
  const auto tmp = path + ".tmp";
  ckpt::save(tmp, c);
  std::filesystem::rename(tmp, path);
}

struct TrainArgs {
  std::string config, out = "djfk.ckpt", metrics = "metrics.csv", resume;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed, steps;
  bool force = false;
};

template <class T>
int train_as(RunConfig cfg, const TrainArgs& a) {
  train::TrainState<T> s;
  if (!a.resume.empty()) {
    const auto c = ckpt::load(a.resume, config_digest(cfg), a.force);
    s = train::from_checkpoint<T>(c, cfg);
    std::cerr << "resumed from " << a.resume << " at step " << s.step << '\n';
  } else {
    s = train::init_state<T>(cfg);
  }
  std::ofstream metrics(a.metrics, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw ConfigError("cannot open metrics file '" + a.metrics + "'");
  if (a.resume.empty()) jepa::write_metrics_header(metrics);

  train::RunHooks hooks;
  hooks.metrics = &metrics;
  hooks.checkpoint = [&](std::uint64_t step) {
    metrics.flush();
    save_atomic(a.out, train::to_checkpoint(s));
    std::cerr << "step " << step << ": checkpoint " << a.out << '\n';
  };
  const auto rows = train::run(s, cfg.steps, hooks);
  save_atomic(a.out, train::to_checkpoint(s));
  if (!rows.empty()) {
    const auto& m = rows.back();
    std::fprintf(stderr, "step %llu  loss_pred %.6g  loss_flow %.6g\n", static_cast<unsigned long long>(m.step), m.loss_pred, m.loss_flow);
  }
  std::cerr << "wrote " << a.out << '\n';
  return 0;
}

int cmd_train(const TrainArgs& a) {
  auto cfg = build_config(a.config, a.sets, a.seed);
  if (a.steps) cfg.steps = *a.steps;
  return cfg.dtype == "f64" ? train_as<double>(cfg, a) : train_as<float>(cfg, a);
}

struct SampleArgs {
  std::string checkpoint, out, ppm;
  std::optional<int> width, height, steps, flow_steps, cls;
  std::optional<double> rho, bias, cfg, shift;
  std::optional<std::uint64_t> seed;
  bool unconditional = false;
};

template <class T>
int sample_as(const ckpt::Checkpoint& c, const RunConfig& cfg, const SampleArgs& a) {
  auto s = train::from_checkpoint<T>(c, cfg);
  sampler::GenerationRequest req;
  req.grid = cfg.grid;
  req.solver = cfg.solver;
  req.ar_steps = cfg.ar_steps;
  req.width = a.width.value_or(cfg.phase1_side);
  req.height = a.height.value_or(cfg.phase1_side);
  req.rho = a.rho;
  req.bias = a.bias;
  if (a.cfg) req.solver.cfg_weight = *a.cfg;
  if (a.shift) req.solver.time_shift = *a.shift;
  if (a.flow_steps) req.solver.steps = *a.flow_steps;
  if (a.steps) req.ar_steps = *a.steps;
  req.condition = a.cls.value_or(0);
  req.unconditional = a.unconditional;
  if (!req.unconditional && (req.condition < 0 || req.condition >= cfg.model.classes)) {
    throw ConfigError("--class must be in [0, " + std::to_string(cfg.model.classes) + ")");
  }
  if (req.ar_steps > 0 && static_cast<std::size_t>(req.ar_steps) > static_cast<std::size_t>(req.width) * static_cast<std::size_t>(req.height)) {
    throw ConfigError("--steps exceeds the number of tokens");
  }
  req.seed = a.seed ? *a.seed : env_seed().value_or(0);
  const auto grid = sampler::generate(req, s.model);

  std::ofstream os(a.out);
  if (!os) throw ConfigError("cannot open '" + a.out + "' for writing");
  write_grid(os, grid);
  if (!a.ppm.empty()) {
    std::ofstream ps(a.ppm, std::ios::binary);
    if (!ps) throw ConfigError("cannot open '" + a.ppm + "' for writing");
    write_ppm(ps, grid);
  }
  std::cerr << "wrote " << a.out << " (" << grid.geom.width << "x" << grid.geom.height << " tokens)\n";
  return 0;
}

int cmd_sample(const SampleArgs& a) {
  const auto c = ckpt::load(a.checkpoint);
  const auto cfg = train::checkpoint_config(c);
  return cfg.dtype == "f64" ? sample_as<double>(c, cfg, a) : sample_as<float>(c, cfg, a);
}

struct CurveArgs {
  std::string out = "-";
  int dim = 64;
  double base = posenc::kDefaultBase;
  double max_distance = 256.0;
  int points = 257;
  double ntk_factor = 2.0;
  std::vector<double> rhos{1.0, 0.5, 0.25};
};

int cmd_curves(const CurveArgs& a) {
  if (a.points < 2) throw ConfigError("--points must be >= 2");
  if (!(a.max_distance > 0.0)) throw ConfigError("--max-distance must be > 0");
  const auto params = posenc::make_rotary(a.base, a.dim);
  std::vector<double> dist(static_cast<std::size_t>(a.points));
  for (int i = 0; i < a.points; ++i) dist[static_cast<std::size_t>(i)] = a.max_distance * i / (a.points - 1);

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (a.out != "-") {
    file.open(a.out);
    if (!file) throw ConfigError("cannot open '" + a.out + "' for writing");
    os = &file;
  }
  posenc::write_decay_csv_header(*os);
  std::vector<posenc::DecayMode> modes{{posenc::DecayKind::rope}, {posenc::DecayKind::ntk_rope, 1.0, a.ntk_factor}};
  for (double r : a.rhos) modes.push_back({posenc::DecayKind::vope, r});
  for (const auto& m : modes) posenc::write_decay_csv(*os, posenc::decay_curve(params, dist, m), m);
  return 0;
}

struct SimArgs {
  std::string config, out = "-";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

int cmd_feedback_sim(const SimArgs& a) {
  const auto cfg = build_config(a.config, a.sets, a.seed);
  std::ofstream file;
  std::ostream* os = &std::cout;
  if (a.out != "-") {
    file.open(a.out);
    if (!file) throw ConfigError("cannot open '" + a.out + "' for writing");
    os = &file;
  }
  feedback::write_sim_header(*os);
  Rng seeds(cfg.seed);
  int kl_wins = 0, cov_wins = 0;
  for (int r = 0; r < cfg.sim_runs; ++r) {
    const auto s = seeds.next_u64();
    const auto on = feedback::simulate(cfg.sim, true, s, static_cast<std::uint64_t>(r));
    const auto off = feedback::simulate(cfg.sim, false, s, static_cast<std::uint64_t>(r));
    feedback::write_sim_row(*os, on);
    feedback::write_sim_row(*os, off);
    kl_wins += on.kl < off.kl;
    cov_wins += on.coverage > off.coverage;
  }
  std::cerr << "feedback ON lower KL in " << kl_wins << "/" << cfg.sim_runs << " runs, higher coverage in " << cov_wins << "/"
            << cfg.sim_runs << '\n';
  return 0;
}

struct GradArgs {
  std::uint64_t seed = 0;
  double op_tol = 1e-4, block_tol = 1e-4, e2e_tol = 1e-3;
};

int cmd_gradcheck(const GradArgs& a) {
  bool ok = true;
  for (const auto& r : gradcheck_suite(a.seed, a.op_tol, a.block_tol, a.e2e_tol)) {
    std::printf("%-4s %-22s worst_rel=%.3e tol=%.0e\n", r.report.pass ? "ok" : "FAIL", r.name.c_str(), r.report.worst(), r.report.tolerance);
    if (!r.report.pass) {
      std::cout << r.report;
      ok = false;
    }
  }
  std::puts(ok ? "gradcheck: all passed" : "gradcheck: FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"djfk: toy-scale D-JEPA trainer, sampler and experiment drivers"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train the model on the synthetic corpus");
  train->add_option("-c,--config", ta.config, "key = value config file");
  train->add_option("--set", ta.sets, "override one key (key=value), repeatable");
  train->add_option("-o,--out", ta.out, "checkpoint path")->capture_default_str();
  train->add_option("--metrics", ta.metrics, "metrics CSV path")->capture_default_str();
  train->add_option("--resume", ta.resume, "continue from this checkpoint");
  train->add_flag("--force", ta.force, "load a checkpoint written with a different config");
  train->add_option("--seed", ta.seed, "seed (falls back to the config, then DJFK_SEED)");
  train->add_option("--steps", ta.steps, "total steps (overrides train.steps)");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "generate a token grid from a checkpoint");
  sample->add_option("--checkpoint", sa.checkpoint, "checkpoint path")->required();
  sample->add_option("-o,--out", sa.out, "grid file path")->required();
  sample->add_option("--ppm", sa.ppm, "also write a PPM preview");
  sample->add_option("--width", sa.width, "width in tokens");
  sample->add_option("--height", sa.height, "height in tokens");
  sample->add_option("--rho", sa.rho, "resolution density override");
  sample->add_option("--bias", sa.bias, "relative positional offset override");
  sample->add_option("--cfg", sa.cfg, "guidance weight");
  sample->add_option("--steps", sa.steps, "autoregressive steps (0 = default)");
  sample->add_option("--flow-steps", sa.flow_steps, "Euler steps per token");
  sample->add_option("--shift", sa.shift, "time shift");
  sample->add_option("--seed", sa.seed, "seed (falls back to DJFK_SEED)");
  sample->add_option("--class", sa.cls, "condition id");
  sample->add_flag("--unconditional", sa.unconditional, "use the null condition");

  CurveArgs ca;
  auto* curves = app.add_subcommand("curves", "write rotary decay curves as CSV");
  curves->add_option("-o,--out", ca.out, "CSV path, - for stdout")->capture_default_str();
  curves->add_option("--dim", ca.dim, "rotary dimension")->capture_default_str();
  curves->add_option("--base", ca.base, "base frequency")->capture_default_str();
  curves->add_option("--max-distance", ca.max_distance, "largest distance")->capture_default_str();
  curves->add_option("--points", ca.points, "number of distances")->capture_default_str();
  curves->add_option("--ntk-factor", ca.ntk_factor, "NTK base scaling factor")->capture_default_str();
  curves->add_option("--rho", ca.rhos, "VoPE densities")->capture_default_str();

  SimArgs fa;
  auto* fsim = app.add_subcommand("feedback-sim", "paired data-feedback simulations");
  fsim->add_option("-c,--config", fa.config, "key = value config file (sim.* keys)");
  fsim->add_option("--set", fa.sets, "override one key (key=value), repeatable");
  fsim->add_option("-o,--out", fa.out, "CSV path, - for stdout")->capture_default_str();
  fsim->add_option("--seed", fa.seed, "seed (falls back to the config, then DJFK_SEED)");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--seed", ga.seed)->capture_default_str();
  grad->add_option("--op-tol", ga.op_tol)->capture_default_str();
  grad->add_option("--block-tol", ga.block_tol)->capture_default_str();
  grad->add_option("--e2e-tol", ga.e2e_tol)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*sample) return cmd_sample(sa);
    if (*curves) return cmd_curves(ca);
    if (*fsim) return cmd_feedback_sim(fa);
    if (*grad) return cmd_gradcheck(ga);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
