#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "djfk/error.hpp"
#include "djfk/grid.hpp"

namespace djfk {

/// Text grid file: a header line, a geometry line, then one line of token
/// values per lattice point in row-major order; values print with %.17g so
/// doubles round-trip exactly.
template <class T>
void write_grid(std::ostream& os, const TokenGrid<T>& g) {
  g.validate();
  char buf[64];
  os << "DJFK-GRID 1\n";
  os << "width " << g.geom.width << " height " << g.geom.height << " grid " << g.geom.grid;
  std::snprintf(buf, sizeof buf, " rho %.17g b %.17g", g.geom.rho, g.geom.b);
  os << buf << " dim " << g.token_dim() << '\n';
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto row = g.tokens.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof buf, j ? " %.17g" : "%.17g", static_cast<double>(row[j]));
      os << buf;
    }
    os << '\n';
  }
}

template <class T>
TokenGrid<T> read_grid(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "DJFK-GRID 1") throw FormatError("not a grid file (bad header)");
  if (!std::getline(is, line)) throw FormatError("grid file: missing geometry line");
  std::istringstream gs(line);
  std::string kw[6];
  TokenGrid<T> g;
  std::size_t dim = 0;
  gs >> kw[0] >> g.geom.width >> kw[1] >> g.geom.height >> kw[2] >> g.geom.grid >> kw[3] >> g.geom.rho >> kw[4] >> g.geom.b >> kw[5] >> dim;
  if (gs.fail() || kw[0] != "width" || kw[1] != "height" || kw[2] != "grid" || kw[3] != "rho" || kw[4] != "b" || kw[5] != "dim") {
    throw FormatError("grid file: bad geometry line '" + line + "'");
  }
  if (g.geom.width < 1 || g.geom.height < 1 || dim < 1) throw FormatError("grid file: dimensions must be >= 1");
  g.tokens = Tensor<T>(Shape{g.size(), dim});
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      double v;
      if (!(is >> v)) throw FormatError("grid file: truncated at token " + std::to_string(i));
      g.tokens.at(i, j) = static_cast<T>(v);
    }
  }
  g.validate();
  return g;
}

/// Binary PPM preview: the first three token channels (repeated if fewer),
/// each min-max scaled over the grid.
template <class T>
void write_ppm(std::ostream& os, const TokenGrid<T>& g) {
  g.validate();
  const std::size_t d = g.token_dim();
  double lo[3], hi[3];
  for (std::size_t c = 0; c < 3; ++c) {
    lo[c] = hi[c] = static_cast<double>(g.tokens.at(0, c % d));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = g.tokens.at(i, c % d);
      lo[c] = std::min(lo[c], v);
      hi[c] = std::max(hi[c], v);
    }
  }
  os << "P6\n" << g.geom.width << ' ' << g.geom.height << "\n255\n";
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double span = hi[c] - lo[c];
      const double f = span > 0 ? (static_cast<double>(g.tokens.at(i, c % d)) - lo[c]) / span : 0.5;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * f))));
    }
  }
}

}  // namespace djfk
