#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "djfk/flowmatch.hpp"

using namespace djfk;
using namespace djfk::flow;
using Catch::Approx;

namespace {

// Closed-form optimal velocity E[x - eps | x_t] for data N(m, S) in 2-D.
struct GaussianField {
  double m[2];
  double S[2][2];

  Tensor<double> operator()(const Tensor<double>& x, double t, int) const {
    const double a = t, c = 1.0 - t;
    // St = t^2 S + (1-t)^2 I ; C = t S - (1-t) I
    const double s00 = a * a * S[0][0] + c * c, s01 = a * a * S[0][1], s11 = a * a * S[1][1] + c * c;
    const double det = s00 * s11 - s01 * s01;
    const double i00 = s11 / det, i01 = -s01 / det, i11 = s00 / det;
    const double c00 = a * S[0][0] - c, c01 = a * S[0][1], c11 = a * S[1][1] - c;
    // K = C * St^-1
    const double k00 = c00 * i00 + c01 * i01, k01 = c00 * i01 + c01 * i11;
    const double k10 = c01 * i00 + c11 * i01, k11 = c01 * i01 + c11 * i11;
    Tensor<double> v(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double d0 = x.at(r, 0) - a * m[0], d1 = x.at(r, 1) - a * m[1];
      v.at(r, 0) = m[0] + k00 * d0 + k01 * d1;
      v.at(r, 1) = m[1] + k10 * d0 + k11 * d1;
    }
    return v;
  }
};

}  // namespace

TEST_CASE("make_flow_sample examples", "[flow]") {
  Rng rng(1);
  const auto x = Tensor<double>::vector({1.5, -2.0, 0.25});
  auto s1 = make_flow_sample(x, rng, 1.0);
  CHECK(s1.x_t == x);
  auto s0 = make_flow_sample(x, rng, 0.0);
  CHECK(s0.x_t == s0.eps);
  auto s = make_flow_sample(Tensor<double>::vector({2.0}), Tensor<double>::vector({0.0}), 0.25);
  CHECK(s.x_t[0] == 0.5);
  CHECK(s.v_target[0] == 2.0);
  CHECK_THROWS_AS(make_flow_sample(x, rng, 1.5), ContractError);
  CHECK_THROWS_AS(make_flow_sample(x, rng, -0.1), ContractError);
}

TEST_CASE("interpolation invariants hold exactly", "[flow][property]") {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor<float> x(Shape{8});
    for (auto& v : x.data()) v = static_cast<float>(3.0 * rng.normal());
    const float t = static_cast<float>(rng.uniform());
    auto s = make_flow_sample(x, rng, t);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(s.x_t[i] == t * x[i] + (1.0f - t) * s.eps[i]);
      CHECK(s.v_target[i] == x[i] - s.eps[i]);
    }
  }
}

TEST_CASE("flow_loss examples", "[flow]") {
  Rng rng(3);
  const auto x = Tensor<double>::vector({1, 2, 3, 4});
  auto s = make_flow_sample(x, rng, 0.3);
  CHECK(flow_loss(s.v_target, s) == 0.0);
  auto off = s.v_target;
  for (auto& v : off.data()) v += 1.0;
  CHECK(flow_loss(off, s) == Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(flow_loss(Tensor<double>(Shape{3}), s), ShapeError);

  // batch mean == mean of per-sample losses
  auto s2 = make_flow_sample(x, rng, 0.8);
  auto p2 = s2.v_target;
  p2[0] += 2.0;
  const double per = 0.5 * (flow_loss(off, s) + flow_loss(p2, s2));
  double acc = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    acc += (off[i] - s.v_target[i]) * (off[i] - s.v_target[i]);
    acc += (p2[i] - s2.v_target[i]) * (p2[i] - s2.v_target[i]);
  }
  CHECK(per == Approx(acc / 8.0));
}

TEST_CASE("shift_time examples and monotonicity", "[flow]") {
  for (double t : {0.0, 0.1, 0.5, 0.9, 1.0}) CHECK(shift_time(t, 1.0) == Approx(t));
  for (double s : {0.3, 1.0, 4.5, 10.0}) {
    CHECK(shift_time(0.0, s) == 0.0);
    CHECK(shift_time(1.0, s) == 1.0);
  }
  CHECK(shift_time(0.5, 4.5) == Approx(2.25 / 2.75).epsilon(1e-15));
  CHECK(shift_time(0.5, 4.5) == Approx(0.8182).margin(1e-4));
  for (int i = 1; i < 100; ++i) {
    const double t = i / 100.0;
    CHECK(shift_time(t, 4.5) > shift_time(t - 0.01, 4.5));
    CHECK(shift_time(t, 4.6) > shift_time(t, 4.5));
  }
}

TEST_CASE("cfg_velocity examples", "[flow]") {
  const auto c = Tensor<double>::vector({2.0, -1.0});
  const auto u = Tensor<double>::vector({0.0, 3.0});
  CHECK(cfg_velocity(c, u, 1.0) == c);
  CHECK(cfg_velocity(c, u, 0.0) == u);
  CHECK(cfg_velocity(Tensor<double>::vector({2.0}), Tensor<double>::vector({0.0}), 6.0)[0] == 12.0);
  CHECK_THROWS_AS(cfg_velocity(c, Tensor<double>::vector({1.0}), 2.0), ShapeError);
}

TEST_CASE("euler on a constant field telescopes", "[flow]") {
  const auto c = Tensor<double>::from_rows({{0.7, -1.3, 2.0}});
  for (int steps : {1, 7, 250}) {
    for (double s : {1.0, 4.5}) {
      Rng rng(9);
      auto x = euler_solve<double>([&](const Tensor<double>&, double, int) { return c; }, 0, Shape{1, 3},
                                   SolverConfig{steps, s, 1.0}, rng);
      Rng rng2(9);
      auto eps = standard_normal<double>(Shape{1, 3}, rng2);
      for (std::size_t i = 0; i < 3; ++i) CHECK(x[i] == Approx(eps[i] + c[i]).margin(1e-12));
    }
  }
}

TEST_CASE("euler tracks the point-mass interpolant", "[flow]") {
  const auto mu = Tensor<double>::from_rows({{1.5, -0.5}});
  auto field = [&](const Tensor<double>& x, double t, int) {
    Tensor<double> v(x.shape());
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = (mu[i] - x[i]) / std::max(1.0 - t, 1e-6);
    return v;
  };
  for (int steps : {10, 100, 1000}) {
    Rng rng(4);
    auto x = euler_solve<double>(field, 0, Shape{1, 2}, SolverConfig{steps, 4.5, 1.0}, rng);
    CHECK(max_abs_diff(x, mu) < 1e-9);
  }
}

TEST_CASE("euler solve of the analytic Gaussian field reproduces the covariance", "[flow]") {
  const GaussianField f{{1.0, -2.0}, {{2.0, 0.6}, {0.6, 0.5}}};
  Rng rng(10);
  auto x = euler_solve<double>(f, 0, Shape{10000, 2}, SolverConfig{250, 4.5, 1.0}, rng);
  double m0 = 0, m1 = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    m0 += x.at(r, 0);
    m1 += x.at(r, 1);
  }
  m0 /= 10000.0;
  m1 /= 10000.0;
  double c00 = 0, c01 = 0, c11 = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double a = x.at(r, 0) - m0, b = x.at(r, 1) - m1;
    c00 += a * a;
    c01 += a * b;
    c11 += b * b;
  }
  c00 /= 9999.0;
  c01 /= 9999.0;
  c11 /= 9999.0;
  const double err = std::sqrt((c00 - 2.0) * (c00 - 2.0) + 2 * (c01 - 0.6) * (c01 - 0.6) + (c11 - 0.5) * (c11 - 0.5));
  const double ref = std::sqrt(4.0 + 2 * 0.36 + 0.25);
  CHECK(err / ref < 0.05);
  CHECK(std::abs(m0 - 1.0) < 0.05);
  CHECK(std::abs(m1 + 2.0) < 0.05);
}

TEST_CASE("euler is first order", "[flow][property]") {
  // dx/dt = x cos t has x(1) = x0 exp(sin 1).
  auto field = [](const Tensor<double>& x, double t, int) {
    Tensor<double> v(x.shape());
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = x[i] * std::cos(t);
    return v;
  };
  for (double shift : {1.0, 4.5}) {
    std::vector<double> lx, ly;
    for (int steps : {25, 50, 100, 200}) {
      const auto x0 = Tensor<double>::vector({1.0});
      const auto x = euler_integrate<double>(field, x0, 0, SolverConfig{steps, shift, 1.0});
      lx.push_back(std::log(static_cast<double>(steps)));
      ly.push_back(std::log(std::abs(x[0] - std::exp(std::sin(1.0)))));
    }
    const double mx = (lx[0] + lx[1] + lx[2] + lx[3]) / 4, my = (ly[0] + ly[1] + ly[2] + ly[3]) / 4;
    double sxy = 0, sxx = 0;
    for (int i = 0; i < 4; ++i) {
      sxy += (lx[i] - mx) * (ly[i] - my);
      sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    const double slope = sxy / sxx;
    INFO("shift " << shift << " slope " << slope);
    CHECK(std::abs(slope + 1.0) < 0.2);
  }
}

TEST_CASE("euler solve is deterministic and reports non-finite states", "[flow]") {
  auto field = [](const Tensor<float>& x, float t, int) {
    Tensor<float> v(x.shape());
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = std::sin(x[i]) * t;
    return v;
  };
  Rng a(77), b(77);
  const auto xa = euler_solve<float>(field, 0, Shape{4, 3}, SolverConfig{}, a);
  const auto xb = euler_solve<float>(field, 0, Shape{4, 3}, SolverConfig{}, b);
  CHECK(xa == xb);

  auto blowup = [](const Tensor<double>& x, double, int) {
    Tensor<double> v(x.shape());
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = 1e300 * (1.0 + x[i] * x[i]);
    return v;
  };
  Rng c(1);
  try {
    euler_solve<double>(blowup, 0, Shape{2}, SolverConfig{10, 1.0, 1.0}, c);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}
