#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "djfk/gradcheck.hpp"
#include "djfk/jepa.hpp"

using namespace djfk;
using namespace djfk::jepa;

namespace {

Config tiny_config() {
  Config c;
  c.token_dim = 4;
  c.classes = 2;
  c.text_tokens = 2;
  c.model.width = 8;
  c.model.heads = 2;
  c.model.blocks = 1;
  c.denoiser_hidden = 8;
  c.time_embed_dim = 8;
  return c;
}

Example<double> random_example(int w, int h, int cls, Rng& rng, int d = 4) {
  Example<double> ex;
  ex.grid.geom = posenc::grid_geometry(w, h, 16);
  ex.grid.tokens = Tensor<double>(Shape{static_cast<std::size_t>(w * h), static_cast<std::size_t>(d)});
  for (auto& v : ex.grid.tokens.data()) v = rng.normal();
  ex.condition = cls;
  return ex;
}

void randomize(Parameter<double>& p, Rng& rng, double k) {
  for (auto& v : p.value.data()) v = k * rng.normal();
}

}  // namespace

TEST_CASE("config validation names the key", "[jepa]") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.ema_tau = 1.5;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.ema_tau") != std::string::npos);
  }
  c = tiny_config();
  c.optim.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("sample_mask examples", "[jepa]") {
  Rng rng(1);
  auto full = sample_mask(10, rng, 1.0, 1.0);
  CHECK(full.context.empty());
  CHECK(full.masked.size() == 10);
  CHECK(sample_mask(1, rng, 0.7, 1.0).masked.size() == 1);

  Rng a(5), b(5);
  auto pa = sample_mask(50, a), pb = sample_mask(50, b);
  CHECK(pa.masked == pb.masked);
  CHECK(pa.ratio == pb.ratio);

  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    auto p = sample_mask(n, rng);
    CHECK(p.ratio >= 0.7);
    CHECK(p.ratio <= 1.0);
    CHECK(p.masked.size() == std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p.ratio * static_cast<double>(n)))));
    std::vector<int> seen(n, 0);
    for (auto i : p.masked) ++seen[i];
    for (auto i : p.context) ++seen[i];
    for (int s : seen) CHECK(s == 1);
  }
}

TEST_CASE("each index is masked with the configured frequency", "[jepa][property]") {
  Rng rng(2);
  const std::size_t n = 20;
  const double r = 0.5;
  std::vector<int> hits(n, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    for (auto j : sample_mask(n, rng, r, r).masked) ++hits[j];
  }
  const double sigma = std::sqrt(r * (1 - r) / draws);
  for (int h : hits) CHECK(std::abs(h / static_cast<double>(draws) - r) < 3.5 * sigma);
}

TEST_CASE("shadow starts equal to phi and carries no gradient state", "[jepa]") {
  Rng rng(3);
  auto m = init_model<double>(tiny_config(), rng);
  CHECK_FALSE(has_gradient_state(m.phi_bar));
  CHECK(has_gradient_state(m.phi));

  auto ex = random_example(3, 4, 1, rng);
  const auto pos = ex.grid.positions();
  const auto target = target_features(m, ex.grid.tokens, pos, ex.condition);
  Tape<double> tape;
  const auto online = encode(tape, m.phi, ex.grid.tokens, pos, ex.condition, m.cfg, mmvit::Bind::trainable).image.value();
  CHECK(target == online);

  // Backward through a loss on the targets touches phi/gamma only.
  auto in = sample_step_inputs(m.cfg, ex, rng);
  Tape<double> t2;
  t2.backward(step_loss(t2, m, ex, in).total);
  CHECK_FALSE(has_gradient_state(m.phi_bar));
}

TEST_CASE("ema_update boundaries and closed form", "[jepa]") {
  Rng rng(4);
  auto m = init_model<double>(tiny_config(), rng);
  for (auto& np : m.trainable()) randomize(*np.param, rng, 1.0);
  const auto phi0 = m.phi_bar;

  ema_update(m.phi, m.phi_bar, 1.0);
  CHECK(m.phi_bar.token_in.value == phi0.token_in.value);
  CHECK(m.phi_bar.blocks[0].image.wq.value == phi0.blocks[0].image.wq.value);

  auto copy = m.phi_bar;
  ema_update(m.phi, copy, 0.0);
  CHECK(copy.token_in.value == m.phi.token_in.value);
  CHECK(copy.blocks[0].text.w_down.value == m.phi.blocks[0].text.w_down.value);

  for (double tau : {0.9, 0.999}) {
    for (int k : {1, 10, 100}) {
      auto shadow = phi0;
      for (int i = 0; i < k; ++i) ema_update(m.phi, shadow, tau);
      const double tk = std::pow(tau, k);
      std::vector<const Parameter<double>*> a, b, c;
      Encoder<double>::visit(shadow, [&](const std::string&, const Parameter<double>& p) { a.push_back(&p); });
      Encoder<double>::visit(phi0, [&](const std::string&, const Parameter<double>& p) { b.push_back(&p); });
      Encoder<double>::visit(m.phi, [&](const std::string&, const Parameter<double>& p) { c.push_back(&p); });
      double worst = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i]->value.numel(); ++j) {
          worst = std::max(worst, std::abs(a[i]->value[j] - (tk * b[i]->value[j] + (1 - tk) * c[i]->value[j])));
        }
      }
      CHECK(worst < 1e-10);
    }
  }
  CHECK_THROWS_AS(ema_update(m.phi, copy, 1.5), ContractError);
}

TEST_CASE("predict_features contracts", "[jepa]") {
  Rng rng(5);
  auto m = init_model<double>(tiny_config(), rng);
  auto ex = random_example(4, 3, 0, rng);
  const auto pos = ex.grid.positions();

  SECTION("no context: z ignores image token values") {
    Tape<double> t1, t2;
    const Tensor<double> empty(Shape{0, 4});
    auto z1 = predict_features(t1, m, empty, {}, pos, 0).value();
    CHECK(z1.shape() == Shape{12, 8});
    auto other = random_example(4, 3, 0, rng);
    auto z2 = predict_features(t2, m, Tensor<double>(Shape{0, 4}), {}, other.grid.positions(), 0).value();
    CHECK(z1 == z2);
    Tape<double> t3;
    auto z3 = predict_features(t3, m, empty, {}, pos, 1).value();
    CHECK(max_abs_diff(z1, z3) > 1e-6);
  }

  SECTION("shape and permutation equivariance") {
    for (int trial = 0; trial < 10; ++trial) {
      auto plan = sample_mask(12, rng);
      const auto ctx_pos = gather(pos, plan.context);
      const auto ctx_tok = gather(ex.grid.tokens, plan.context);
      auto msk_pos = gather(pos, plan.masked);
      Tape<double> t1;
      auto z = predict_features(t1, m, ctx_tok, ctx_pos, msk_pos, 1).value();
      CHECK(z.shape() == Shape{plan.masked.size(), 8});
      std::vector<std::size_t> perm(msk_pos.size());
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm.begin(), perm.end());
      Tape<double> t2;
      auto zp = predict_features(t2, m, ctx_tok, ctx_pos, gather(msk_pos, perm), 1).value();
      for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(zp.at(i, j) - z.at(perm[i], j)) < 1e-10);
    }
  }

  SECTION("empty mask set") {
    Tape<double> t;
    CHECK_THROWS_AS(predict_features(t, m, ex.grid.tokens, pos, {}, 0), ContractError);
  }
}

TEST_CASE("pred_loss examples", "[jepa]") {
  Rng rng(6);
  Tensor<double> targets(Shape{5, 6});
  for (auto& v : targets.data()) v = rng.normal();
  Tape<double> tape;
  CHECK(pred_loss(tape.constant(targets), targets).value().item() == Catch::Approx(0.0).margin(1e-15));

  // Unit-RMS rows, z = -targets.
  Tensor<double> unit = targets;
  for (std::size_t i = 0; i < 5; ++i) {
    double ms = 0;
    for (double v : unit.row(i)) ms += v * v / 6;
    for (double& v : unit.row(i)) v /= std::sqrt(ms);
  }
  Tensor<double> neg = unit;
  for (auto& v : neg.data()) v = -v;
  CHECK(pred_loss(tape.constant(neg), unit).value().item() == Catch::Approx(4.0).epsilon(1e-5));

  Tensor<double> z(Shape{5, 6});
  for (auto& v : z.data()) v = rng.normal();
  const double base = pred_loss(tape.constant(z), targets).value().item();
  Tensor<double> scaled = z;
  for (std::size_t i = 0; i < 5; ++i) {
    const double k = 0.5 + 10 * rng.uniform();
    for (double& v : scaled.row(i)) v *= k;
  }
  // Exact up to the RMSNorm epsilon, which contributes O(eps / mean(z^2)).
  CHECK(pred_loss(tape.constant(scaled), targets).value().item() == Catch::Approx(base).epsilon(1e-5));
  CHECK_THROWS_AS(pred_loss(tape.constant(z), Tensor<double>(Shape{5, 5})), ShapeError);
}

TEST_CASE("flow terms read masked tokens only", "[jepa][property]") {
  Rng rng(7);
  auto cfg = tiny_config();
  cfg.flow_repeats = 3;
  for (int trial = 0; trial < 20; ++trial) {
    auto ex = random_example(5, 4, 0, rng);
    auto in = sample_step_inputs(cfg, ex, rng);
    const auto fb = flow_batch(ex, in);
    CHECK(fb.x_t.rows() == 3 * in.plan.masked.size());
    auto perturbed = ex;
    for (auto c : in.plan.context) {
      for (auto& v : perturbed.grid.tokens.row(in.kept[c])) v += 100.0 * rng.normal();
    }
    const auto fp = flow_batch(perturbed, in);
    CHECK(fp.x_t == fb.x_t);
    CHECK(fp.v_target == fb.v_target);
  }
}

TEST_CASE("lambda_pred = 0 leaves pure flow matching", "[jepa]") {
  Rng rng(8);
  auto cfg = tiny_config();
  cfg.lambda_pred = 0.0;
  auto m = init_model<double>(cfg, rng);
  auto ex = random_example(3, 3, 1, rng);
  auto in = sample_step_inputs(cfg, ex, rng);
  Tape<double> tape;
  auto l = step_loss(tape, m, ex, in);
  CHECK(l.total.value().item() == l.flow.value().item());
  // Untrained denoiser outputs zero, so L_flow = mean |x - eps|^2.
  const auto fb = flow_batch(ex, in);
  double acc = 0;
  for (auto v : fb.v_target.data()) acc += v * v;
  CHECK(l.flow.value().item() == Catch::Approx(acc / static_cast<double>(fb.v_target.numel())).epsilon(1e-12));
}

TEST_CASE("a small step decreases the loss of a singleton batch", "[jepa]") {
  Rng rng(9);
  auto cfg = tiny_config();
  cfg.optim.lr = 1e-4;
  auto m = init_model<double>(cfg, rng);
  auto ex = random_example(3, 4, 0, rng);
  std::vector<Example<double>> batch{ex};

  Rng a(11), b(11);
  const auto in = sample_step_inputs(cfg, ex, a);
  double before;
  {
    Tape<double> tape;
    before = step_loss(tape, m, ex, in).total.value().item();
  }
  train_step<double>(m, batch, b, 0);
  Tape<double> tape;
  const double after = step_loss(tape, m, ex, in).total.value().item();
  INFO("before " << before << " after " << after);
  CHECK(after < before);
}

TEST_CASE("train_step is deterministic and keeps the shadow gradient-free", "[jepa]") {
  auto cfg = tiny_config();
  auto run = [&]() {
    Rng rng(12);
    auto m = init_model<double>(cfg, rng);
    std::vector<Example<double>> batch{random_example(3, 2, 0, rng), random_example(2, 4, 1, rng)};
    std::vector<Metrics> out;
    for (std::uint64_t s = 0; s < 5; ++s) {
      out.push_back(train_step<double>(m, batch, rng, s));
      CHECK_FALSE(has_gradient_state(m.phi_bar));
    }
    return out;
  };
  const auto a = run(), b = run();
  CHECK(a == b);
  for (const auto& m : a) {
    CHECK(std::isfinite(m.loss_pred));
    CHECK(std::isfinite(m.loss_flow));
    CHECK(std::isfinite(m.grad_norm));
    CHECK(m.ema_tau == cfg.ema_tau);
  }
  std::ostringstream os;
  write_metrics_header(os);
  write_metrics_row(os, a[0]);
  CHECK(os.str().rfind("step,loss_pred,loss_flow,grad_norm,ema_tau\n0,", 0) == 0);
}

TEST_CASE("token cap retains exactly cap tokens during training", "[jepa]") {
  Rng rng(13);
  auto cfg = tiny_config();
  cfg.token_cap = 8;
  auto ex = random_example(5, 4, 0, rng);
  auto in = sample_step_inputs(cfg, ex, rng);
  CHECK(in.kept.size() == 8);
  CHECK(in.plan.size() == 8);
}

TEST_CASE("end-to-end loss passes the gradient check", "[jepa][gradcheck]") {
  Rng rng(14);
  auto cfg = tiny_config();
  cfg.flow_repeats = 2;
  auto m = init_model<double>(cfg, rng);
  // Give every tensor a generic value so no gradient is trivially zero.
  randomize(m.denoiser.weights.back(), rng, 0.5);
  randomize(m.denoiser.biases.back(), rng, 0.5);
  for (auto* p : {&m.phi.out_norm_image, &m.phi.out_norm_text, &m.gamma.out_norm}) {
    for (auto& v : p->value.data()) v = 1.0 + 0.2 * rng.normal();
  }
  m.phi_bar = make_shadow(m.phi);
  auto ex = random_example(3, 3, 1, rng);
  cfg.cond_drop = 0.0;
  cfg.mask_min = cfg.mask_max = 0.6;
  const auto in = sample_step_inputs(cfg, ex, rng);
  REQUIRE_FALSE(in.plan.context.empty());
  auto params = m.trainable();
  auto report = gradient_check([&](Tape<double>& tape) { return step_loss(tape, m, ex, in).total; },
                               std::span<const NamedParameter<double>>(params), 1e-3);
  INFO(report);
  CHECK(report.pass);
}
