#pragma once

#include <functional>
#include <string>
#include <vector>

#include "djfk/autodiff.hpp"
#include "djfk/gradcheck.hpp"
#include "djfk/jepa.hpp"
#include "djfk/mmvit.hpp"

namespace djfk {

struct NamedReport {
  std::string name;
  GradCheckReport report;
};

namespace selfcheck_detail {

inline Tensor<double> randn(Shape s, Rng& rng, double k = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = k * rng.normal();
  return t;
}

// Fixed random projection so every output element reaches the root.
inline Var<double> project(Tape<double>& tape, Var<double> x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, tape.constant(randn(x.shape(), rng))));
}

inline void jitter(Parameter<double>& p, Rng& rng, double k) {
  for (auto& v : p.value.data()) v = 1.0 + k * rng.normal();
}

}  // namespace selfcheck_detail

/// Finite-difference checks (double, h = 1e-5) of every tape op, one joint
/// attention block and the full training loss.
inline std::vector<NamedReport> gradcheck_suite(std::uint64_t seed, double op_tol = 1e-4, double block_tol = 1e-4, double e2e_tol = 1e-3) {
  using namespace selfcheck_detail;
  using P = Parameter<double>;
  Rng rng(seed);
  std::vector<NamedReport> out;

  struct Case {
    const char* name;
    Shape a, b;
    std::function<Var<double>(Tape<double>&, P&, P&)> fn;
  };
  const std::vector<Case> ops = {
      {"matmul", {3, 4}, {4, 2}, [](auto& t, P& a, P& b) { return project(t, matmul(t.param(a), t.param(b)), 1); }},
      {"matmul_batched", {2, 3, 4}, {2, 4, 3}, [](auto& t, P& a, P& b) { return project(t, matmul(t.param(a), t.param(b)), 2); }},
      {"add", {3, 4}, {4}, [](auto& t, P& a, P& b) { return project(t, add(t.param(a), t.param(b)), 3); }},
      {"sub", {2, 3}, {1, 3}, [](auto& t, P& a, P& b) { return project(t, sub(t.param(b), t.param(a)), 4); }},
      {"mul", {3, 3}, {3, 3}, [](auto& t, P& a, P& b) { return project(t, mul(t.param(a), t.param(b)), 5); }},
      {"scale", {2, 5}, {1}, [](auto& t, P& a, P& b) { return add(project(t, scale(t.param(a), -1.7), 6), sum(t.param(b))); }},
      {"concat", {2, 3}, {2, 2}, [](auto& t, P& a, P& b) { return project(t, concat<double>({t.param(a), t.param(b)}, 1), 7); }},
      {"slice", {3, 4}, {1}, [](auto& t, P& a, P& b) { return add(project(t, slice(t.param(a), 0, 1, 3), 8), sum(t.param(b))); }},
      {"softmax_lastdim", {3, 5}, {1}, [](auto& t, P& a, P& b) { return add(project(t, softmax_lastdim(t.param(a)), 9), sum(t.param(b))); }},
      {"rms_norm", {3, 6}, {6}, [](auto& t, P& a, P& b) { return project(t, rms_norm(t.param(a), t.param(b)), 10); }},
      {"silu", {4, 3}, {1}, [](auto& t, P& a, P& b) { return add(project(t, silu(t.param(a)), 11), sum(t.param(b))); }},
      {"transpose_lastdims", {2, 3, 4}, {1},
       [](auto& t, P& a, P& b) { return add(project(t, transpose_lastdims(t.param(a)), 12), sum(t.param(b))); }},
      {"sum", {3, 4}, {1}, [](auto& t, P& a, P& b) { return add(sum(mul(t.param(a), t.param(a))), sum(t.param(b))); }},
      {"mean_squared_error", {3, 4}, {3, 4}, [](auto& t, P& a, P& b) { return mean_squared_error(t.param(a), t.param(b)); }},
      {"gather_rows", {3, 2}, {1},
       [](auto& t, P& a, P& b) { return add(project(t, gather_rows(t.param(a), {2, 0, 2, 1}), 13), sum(t.param(b))); }},
      {"rotary", {3, 4}, {1},
       [](auto& t, P& a, P& b) {
         Rng ar(99);
         Tensor<double> ang(Shape{3, 2});
         for (auto& v : ang.data()) v = ar.uniform(-3.0, 3.0);
         return add(project(t, rotary(t.param(a), ang), 14), sum(t.param(b)));
       }},
      {"reshape", {2, 6}, {1}, [](auto& t, P& a, P& b) { return add(project(t, reshape(t.param(a), Shape{3, 4}), 15), sum(t.param(b))); }},
  };
  for (const auto& c : ops) {
    P a(randn(c.a, rng)), b(randn(c.b, rng));
    ParameterList<double> params{{"a", &a}, {"b", &b}};
    out.push_back({std::string("op.") + c.name, gradient_check([&](Tape<double>& t) { return c.fn(t, a, b); }, params, op_tol)});
  }

  {
    mmvit::Config cfg;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    auto blk = mmvit::init_block<double>(cfg, rng);
    for (auto* s : {&blk.text, &blk.image}) {
      for (auto* p : {&s->attn_norm, &s->q_norm, &s->k_norm, &s->ffn_norm}) jitter(*p, rng, 0.3);
    }
    std::vector<posenc::NormalizedPosition> pos(4);
    for (auto& p : pos) p = {rng.uniform(0.0, 256.0), rng.uniform(0.0, 256.0)};
    const auto t = randn({3, 8}, rng), x = randn({4, 8}, rng), rt = randn({3, 8}, rng), ri = randn({4, 8}, rng);
    auto tables = mmvit::make_rotary_tables<double>(3, pos, cfg);
    ParameterList<double> params;
    mmvit::collect_parameters(blk, "", params);
    auto model = [&](Tape<double>& tape) {
      mmvit::JointSequence<double> seq{tape.constant(t), tape.constant(x), tables};
      auto o = mmvit::block_forward(seq, blk, cfg, tape.grad_enabled() ? mmvit::Bind::trainable : mmvit::Bind::frozen);
      return add(sum(mul(o.text, tape.constant(rt))), sum(mul(o.image, tape.constant(ri))));
    };
    out.push_back({"mmvit.block", gradient_check(model, std::span<const NamedParameter<double>>(params), block_tol)});
  }

  {
    jepa::Config cfg;
    cfg.token_dim = 4;
    cfg.classes = 2;
    cfg.text_tokens = 2;
    cfg.model.width = 8;
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.denoiser_hidden = 8;
    cfg.time_embed_dim = 8;
    cfg.flow_repeats = 2;
    cfg.cond_drop = 0.0;
    cfg.mask_min = cfg.mask_max = 0.6;
    auto m = jepa::init_model<double>(cfg, rng);
    // Generic values everywhere so no gradient is trivially zero.
    for (auto& v : m.denoiser.weights.back().value.data()) v = 0.5 * rng.normal();
    for (auto& v : m.denoiser.biases.back().value.data()) v = 0.5 * rng.normal();
    for (auto* p : {&m.phi.out_norm_image, &m.phi.out_norm_text, &m.gamma.out_norm}) jitter(*p, rng, 0.2);
    m.phi_bar = jepa::make_shadow(m.phi);
    jepa::Example<double> ex;
    ex.grid.geom = posenc::grid_geometry(3, 3, 16);
    ex.grid.tokens = randn({9, 4}, rng);
    ex.condition = 1;
    const auto in = jepa::sample_step_inputs(cfg, ex, rng);
    auto params = m.trainable();
    out.push_back({"jepa.step_loss",
                   gradient_check([&](Tape<double>& tape) { return jepa::step_loss(tape, m, ex, in).total; },
                                  std::span<const NamedParameter<double>>(params), e2e_tol)});
  }
  return out;
}

}  // namespace djfk
