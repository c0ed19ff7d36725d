#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/posenc.hpp"
#include "djfk/rng.hpp"
#include "djfk/tensor.hpp"

namespace djfk {

inline constexpr std::size_t kDefaultTokenCap = 4096;

/// A W x H lattice of d-dimensional tokens, row-major (h * W + w).
template <class T>
struct TokenGrid {
  posenc::GridGeometry geom;
  Tensor<T> tokens;  // [W * H, d]

  std::size_t size() const { return static_cast<std::size_t>(geom.width) * static_cast<std::size_t>(geom.height); }
  std::size_t token_dim() const { return tokens.cols(); }

  std::vector<posenc::NormalizedPosition> positions() const { return posenc::lattice_positions(geom); }

  void validate() const {
    if (geom.width < 1 || geom.height < 1) throw ShapeError("token grid dimensions must be >= 1");
    if (tokens.rank() != 2 || tokens.rows() != size()) {
      throw ShapeError("token grid " + std::to_string(geom.width) + "x" + std::to_string(geom.height) + " holds tokens of shape " +
                       shape_str(tokens.shape()));
    }
    if (!tokens.all_finite()) throw NumericError("token grid holds non-finite values");
  }

  bool operator==(const TokenGrid&) const = default;
};

/// Indices of a uniform random subset of size min(n, cap), sorted.
inline std::vector<std::size_t> token_drop(std::size_t n, std::size_t cap, Rng& rng) {
  if (cap < 1) throw ConfigError("train.token_cap must be >= 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= cap) return idx;
  // Partial Fisher-Yates: the first `cap` slots become the sample.
  for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
Tensor<T> gather(const Tensor<T>& rows, std::span<const std::size_t> index) {
  const std::size_t c = rows.cols();
  Tensor<T> out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) std::copy_n(rows.row(index[i]).begin(), c, out.row(i).begin());
  return out;
}

template <class E>
std::vector<E> gather(const std::vector<E>& items, std::span<const std::size_t> index) {
  std::vector<E> out;
  out.reserve(index.size());
  for (auto i : index) out.push_back(items.at(i));
  return out;
}

}  // namespace djfk
