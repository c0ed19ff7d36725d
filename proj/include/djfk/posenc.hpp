#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/tensor.hpp"

namespace djfk::posenc {

inline constexpr double kDefaultBase = 10000.0;
inline constexpr int kDefaultGrid = 256;
// Pixels per token: VAE stride 8 times patch size 2.
inline constexpr int kDefaultTokenStride = 16;

/// Rotary frequency table: theta_j = base^(-2(j-1)/dim) for j = 1..dim/2.
struct RotaryParams {
  double base = kDefaultBase;
  int dim = 0;
  std::vector<double> theta;
};

inline RotaryParams make_rotary(double base, int dim) {
  if (!(base > 0.0)) throw ConfigError("posenc.base must be > 0");
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("rotary dim must be a positive even integer, got " + std::to_string(dim));
  RotaryParams p{base, dim, {}};
  p.theta.resize(static_cast<std::size_t>(dim / 2));
  for (int j = 0; j < dim / 2; ++j) p.theta[static_cast<std::size_t>(j)] = std::pow(base, -2.0 * j / dim);
  return p;
}

/// Mapping of a W x H token lattice onto the g x g reference grid.
struct GridGeometry {
  int width = 1;
  int height = 1;
  int grid = kDefaultGrid;
  double rho = 1.0;  // max(W, H) / g
  double b = 0.0;    // |W - H| / 2, applied to the shorter axis

  bool operator==(const GridGeometry&) const = default;
};

inline GridGeometry grid_geometry(int width, int height, int grid = kDefaultGrid) {
  if (width < 1 || height < 1 || grid < 1) {
    throw ConfigError("grid_geometry: dimensions must be >= 1 (W=" + std::to_string(width) + ", H=" + std::to_string(height) +
                      ", g=" + std::to_string(grid) + ")");
  }
  return GridGeometry{width, height, grid, static_cast<double>(std::max(width, height)) / grid,
                      std::abs(width - height) / 2.0};
}

struct NormalizedPosition {
  double u = 0.0;
  double v = 0.0;
};

/// ((w + b)/rho, h/rho) when W <= H, else (w/rho, (h + b)/rho).
inline NormalizedPosition normalize_position(double w, double h, const GridGeometry& g) {
  if (w < 0 || h < 0 || w >= g.width || h >= g.height) {
    throw ContractError("normalize_position: (" + std::to_string(w) + ", " + std::to_string(h) + ") outside " +
                        std::to_string(g.width) + "x" + std::to_string(g.height));
  }
  if (g.width <= g.height) return {(w + g.b) / g.rho, h / g.rho};
  return {w / g.rho, (h + g.b) / g.rho};
}

/// Normalized positions of every lattice point in row-major (h * W + w) order.
inline std::vector<NormalizedPosition> lattice_positions(const GridGeometry& g) {
  std::vector<NormalizedPosition> out;
  out.reserve(static_cast<std::size_t>(g.width) * static_cast<std::size_t>(g.height));
  for (int h = 0; h < g.height; ++h) {
    for (int w = 0; w < g.width; ++w) out.push_back(normalize_position(w, h, g));
  }
  return out;
}

inline int pixels_to_tokens(int pixels, int stride = kDefaultTokenStride) {
  if (stride < 1) throw ConfigError("posenc.stride must be >= 1");
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(pixels) / stride)));
}

template <class T>
Tensor<T> rotate_pairs(std::span<const T> x, double position, const RotaryParams& params) {
  if (x.size() % 2 != 0) throw ConfigError("rotary input dim must be even, got " + std::to_string(x.size()));
  if (x.size() != static_cast<std::size_t>(params.dim)) {
    throw ShapeError("rotary input dim " + std::to_string(x.size()) + " != params dim " + std::to_string(params.dim));
  }
  Tensor<T> out(Shape{x.size()});
  for (std::size_t j = 0; j < x.size() / 2; ++j) {
    const double a = position * params.theta[j];
    const double c = std::cos(a), s = std::sin(a);
    const double x0 = x[2 * j], x1 = x[2 * j + 1];
    out[2 * j] = static_cast<T>(x0 * c - x1 * s);
    out[2 * j + 1] = static_cast<T>(x0 * s + x1 * c);
  }
  return out;
}

/// VoPE: rotate adjacent pairs by u * theta_j, u a normalized coordinate.
template <class T>
Tensor<T> vope_rotate(std::span<const T> x, double u, const RotaryParams& params) {
  return rotate_pairs(x, u, params);
}

/// Standard RoPE at integer position m.
template <class T>
Tensor<T> rope_rotate(std::span<const T> x, long m, const RotaryParams& params) {
  return rotate_pairs(x, static_cast<double>(m), params);
}

/// NTK-aware base rescaling, omega' = omega / factor.
inline double ntk_scale(double base, double extension_factor) {
  if (!(extension_factor >= 1.0)) throw ConfigError("ntk extension factor must be >= 1");
  return base / extension_factor;
}

/// Rotation angles for text tokens: m * theta_j over the full head dim.
template <class T>
Tensor<T> rope_angles(std::span<const int> positions, int head_dim, double base) {
  const auto p = make_rotary(base, head_dim);
  const std::size_t pairs = p.theta.size();
  Tensor<T> out(Shape{positions.size(), pairs});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = 0; j < pairs; ++j) out[i * pairs + j] = static_cast<T>(positions[i] * p.theta[j]);
  }
  return out;
}

/// Axial 2-D VoPE angles: the first half of the pairs rotate by u, the rest by v,
/// each half using its own theta table over head_dim/2 dimensions.
template <class T>
Tensor<T> axial_angles(std::span<const NormalizedPosition> positions, int head_dim, double base) {
  if (head_dim % 4 != 0) throw ConfigError("axial rotary needs head_dim divisible by 4, got " + std::to_string(head_dim));
  const auto p = make_rotary(base, head_dim / 2);
  const std::size_t half = p.theta.size();
  Tensor<T> out(Shape{positions.size(), 2 * half});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      out[i * 2 * half + j] = static_cast<T>(positions[i].u * p.theta[j]);
      out[i * 2 * half + half + j] = static_cast<T>(positions[i].v * p.theta[j]);
    }
  }
  return out;
}

enum class DecayKind { rope, ntk_rope, vope };

struct DecayMode {
  DecayKind kind = DecayKind::rope;
  double rho = 1.0;         // vope only
  double ntk_factor = 2.0;  // ntk_rope only

  std::string name() const {
    switch (kind) {
      case DecayKind::rope: return "rope";
      case DecayKind::ntk_rope: return "ntk_rope";
      case DecayKind::vope: return "vope";
    }
    return "?";
  }
};

struct DecayPoint {
  double distance = 0.0;
  double value = 0.0;
};

/// |sum_j exp(i * delta * theta_j)| / (d/2), with delta/rho for VoPE and the
/// rescaled base for NTK.
inline std::vector<DecayPoint> decay_curve(const RotaryParams& params, std::span<const double> distances, const DecayMode& mode) {
  std::vector<double> theta = params.theta;
  if (mode.kind == DecayKind::ntk_rope) theta = make_rotary(ntk_scale(params.base, mode.ntk_factor), params.dim).theta;
  if (mode.kind == DecayKind::vope && !(mode.rho > 0.0)) throw ConfigError("vope decay curve needs rho > 0");
  std::vector<DecayPoint> out;
  out.reserve(distances.size());
  for (double d : distances) {
    if (d < 0.0) throw ContractError("decay_curve: negative distance");
    const double delta = mode.kind == DecayKind::vope ? d / mode.rho : d;
    std::complex<double> acc{0.0, 0.0};
    for (double t : theta) acc += std::polar(1.0, delta * t);
    out.push_back({d, std::abs(acc) / static_cast<double>(theta.size())});
  }
  return out;
}

inline void write_decay_csv_header(std::ostream& os) { os << "distance,value,mode,rho\n"; }

inline void write_decay_csv(std::ostream& os, std::span<const DecayPoint> curve, const DecayMode& mode) {
  const double rho = mode.kind == DecayKind::vope ? mode.rho : 1.0;
  for (const auto& p : curve) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%s,%.17g\n", p.distance, p.value, mode.name().c_str(), rho);
    os << buf;
  }
}

}  // namespace djfk::posenc
