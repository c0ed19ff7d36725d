#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

#include "djfk/posenc.hpp"
#include "djfk/rng.hpp"

using namespace djfk;
using namespace djfk::posenc;
using Catch::Approx;

namespace {

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const Tensor<double>& a) { return std::sqrt(dot(a, a)); }

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("theta table follows the base-frequency law", "[posenc]") {
  const auto p = make_rotary(10000.0, 8);
  REQUIRE(p.theta.size() == 4);
  for (std::size_t j = 0; j < 4; ++j) CHECK(p.theta[j] == std::pow(10000.0, -2.0 * static_cast<double>(j) / 8.0));
  for (std::size_t j = 1; j < 4; ++j) CHECK(p.theta[j] < p.theta[j - 1]);
  CHECK_THROWS_AS(make_rotary(10000.0, 7), ConfigError);
}

TEST_CASE("grid_geometry examples", "[posenc]") {
  auto g = grid_geometry(1024, 768, 256);
  CHECK(g.rho == 4.0);
  CHECK(g.b == 128.0);
  g = grid_geometry(256, 256, 256);
  CHECK(g.rho == 1.0);
  CHECK(g.b == 0.0);
  g = grid_geometry(256, 1024, 256);
  CHECK(g.rho == 4.0);
  CHECK(g.b == 384.0);
  CHECK(normalize_position(0, 0, g).u == 96.0);
  CHECK(normalize_position(255, 0, g).u == 159.75);
  CHECK_THROWS_AS(grid_geometry(0, 5, 256), ConfigError);
  CHECK_THROWS_AS(grid_geometry(5, 5, 0), ConfigError);
}

TEST_CASE("normalize_position examples", "[posenc]") {
  auto sq = grid_geometry(256, 256, 256);
  auto p = normalize_position(10, 20, sq);
  CHECK(p.u == 10.0);
  CHECK(p.v == 20.0);
  auto wide = grid_geometry(512, 256, 256);
  p = normalize_position(0, 0, wide);
  CHECK(p.u == 0.0);
  CHECK(p.v == 64.0);
  CHECK_THROWS_AS(normalize_position(512, 0, wide), ContractError);
  CHECK_THROWS_AS(normalize_position(-1, 0, wide), ContractError);
}

TEST_CASE("center pixel maps to grid center up to half a pixel", "[posenc][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const int W = 1 + static_cast<int>(rng.below(600));
    const int H = 1 + static_cast<int>(rng.below(600));
    const int gs = 1 + static_cast<int>(rng.below(300));
    const auto g = grid_geometry(W, H, gs);
    const auto lo = normalize_position(0, 0, g);
    const auto hi = normalize_position(W - 1, H - 1, g);
    const double half_pixel = 0.5 / g.rho;
    CHECK(std::abs((lo.u + hi.u) / 2 - gs / 2.0) <= half_pixel + 1e-9);
    CHECK(std::abs((lo.v + hi.v) / 2 - gs / 2.0) <= half_pixel + 1e-9);
    CHECK(lo.u >= 0.0);
    CHECK(lo.v >= 0.0);
    CHECK(hi.u <= gs);
    CHECK(hi.v <= gs);
  }
}

TEST_CASE("rotation examples", "[posenc]") {
  const auto p = make_rotary(10000.0, 2);
  std::vector<double> x{1.0, 0.0};
  auto y = vope_rotate<double>(x, std::numbers::pi / 2, p);
  CHECK(y[0] == Approx(0.0).margin(1e-15));
  CHECK(y[1] == Approx(1.0));
  const auto p8 = make_rotary(10000.0, 8);
  std::vector<double> z{1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(vope_rotate<double>(z, 0.0, p8) == Tensor<double>(Shape{8}, z));
  CHECK(rope_rotate<double>(z, 0, p8) == Tensor<double>(Shape{8}, z));
  std::vector<double> odd{1, 2, 3};
  CHECK_THROWS_AS(vope_rotate<double>(odd, 1.0, make_rotary(10000.0, 2)), ConfigError);
}

TEST_CASE("rotary invariants under random geometries", "[posenc][property]") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 2 * (1 + static_cast<int>(rng.below(16)));
    const auto params = make_rotary(rng.uniform(10.0, 20000.0), d);
    const auto q = random_vec(rng, static_cast<std::size_t>(d));
    const auto k = random_vec(rng, static_cast<std::size_t>(d));
    const auto g = grid_geometry(1 + static_cast<int>(rng.below(512)), 1 + static_cast<int>(rng.below(512)),
                                 1 + static_cast<int>(rng.below(256)));
    const auto pm = normalize_position(rng.uniform() * g.width * 0.999, 0, g);
    const auto pn = normalize_position(rng.uniform() * g.width * 0.999, 0, g);
    const double shift = rng.uniform(-100.0, 100.0);

    const auto rq = vope_rotate<double>(q, pm.u, params);
    CHECK(std::abs(norm(rq) - norm(Tensor<double>(Shape{q.size()}, q))) < 1e-6);

    const double base = dot(rq, vope_rotate<double>(k, pn.u, params));
    const double shifted = dot(vope_rotate<double>(q, pm.u + shift, params), vope_rotate<double>(k, pn.u + shift, params));
    CHECK(std::abs(base - shifted) < 1e-9 * std::max(1.0, std::abs(base)));
  }
}

TEST_CASE("rope equals vope on the reference grid", "[posenc][property]") {
  Rng rng(12);
  const int gs = 64;
  const auto g = grid_geometry(gs, gs, gs);
  const auto params = make_rotary(10000.0, 16);
  for (int w = 0; w < gs; ++w) {
    const auto x = random_vec(rng, 16);
    const auto a = rope_rotate<double>(x, w, params);
    const auto b = vope_rotate<double>(x, normalize_position(w, 0, g).u, params);
    CHECK(max_abs_diff(a, b) <= 1e-12);
  }
}

TEST_CASE("angles agree across resolutions for the same normalized coordinate", "[posenc][property]") {
  const auto lo = grid_geometry(256, 256, 256);
  const auto hi = grid_geometry(512, 512, 256);
  std::vector<NormalizedPosition> a, b;
  for (int w = 0; w < 256; ++w) {
    a.push_back(normalize_position(w, w / 2, lo));
    b.push_back(normalize_position(2 * w, 2 * (w / 2), hi));
  }
  const auto ta = axial_angles<double>(a, 32, 10000.0);
  const auto tb = axial_angles<double>(b, 32, 10000.0);
  CHECK(max_abs_diff(ta, tb) <= 1e-12);
}

TEST_CASE("ntk_scale examples", "[posenc]") {
  CHECK(ntk_scale(10000.0, 2.0) == 5000.0);
  CHECK(ntk_scale(1234.5, 1.0) == 1234.5);
  CHECK(ntk_scale(10000.0, 4.0) == 2500.0);
  CHECK_THROWS_AS(ntk_scale(10000.0, 0.5), ConfigError);
}

TEST_CASE("decay curves", "[posenc]") {
  const auto params = make_rotary(10000.0, 64);
  std::vector<double> zero{0.0};
  for (auto mode : {DecayMode{DecayKind::rope}, DecayMode{DecayKind::ntk_rope, 1.0, 2.0}, DecayMode{DecayKind::vope, 0.25}}) {
    CHECK(decay_curve(params, zero, mode).at(0).value == Approx(1.0).epsilon(1e-15));
  }

  std::vector<double> dist;
  for (int i = 0; i <= 256; ++i) dist.push_back(i);
  for (double rho : {0.5, 0.25, 2.0}) {
    const auto c = decay_curve(params, dist, {DecayKind::vope, rho});
    std::vector<double> rescaled;
    for (double d : dist) rescaled.push_back(d / rho);
    const auto ref = decay_curve(params, rescaled, {DecayKind::rope});
    for (std::size_t i = 0; i < dist.size(); ++i) CHECK(std::abs(c[i].value - ref[i].value) < 1e-12);
  }

  const auto rope = decay_curve(params, dist, {DecayKind::rope});
  const auto ntk = decay_curve(params, dist, {DecayKind::ntk_rope, 1.0, 2.0});
  double worst = 0.0;
  for (std::size_t i = 1; i < dist.size(); ++i) worst = std::max(worst, std::abs(rope[i].value - ntk[i].value));
  CHECK(worst > 1e-3);

  std::ostringstream os;
  write_decay_csv_header(os);
  write_decay_csv(os, std::span(rope).first(2), DecayMode{DecayKind::rope});
  CHECK(os.str().rfind("distance,value,mode,rho\n0,1,rope,1\n1,", 0) == 0);
}
