#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/feedback.hpp"
#include "djfk/grid.hpp"
#include "djfk/posenc.hpp"
#include "djfk/rng.hpp"

namespace djfk::synth {

/// P(k) proportional to (k + 1)^(-exponent) for k = 0..values-1.
class Zipf {
 public:
  Zipf() = default;
  Zipf(std::size_t values, double exponent) : exponent_(exponent) {
    if (values < 1) throw ConfigError("zipf law needs at least one value");
    if (!(exponent >= 0.0)) throw ConfigError("zipf exponent must be >= 0");
    cdf_.resize(values);
    double acc = 0.0;
    for (std::size_t k = 0; k < values; ++k) cdf_[k] = (acc += std::pow(static_cast<double>(k + 1), -exponent));
    for (auto& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  std::size_t values() const { return cdf_.size(); }
  double exponent() const { return exponent_; }
  double probability(std::size_t k) const { return k == 0 ? cdf_[0] : cdf_.at(k) - cdf_.at(k - 1); }

  int sample(Rng& rng) const {
    const double u = rng.uniform();
    return static_cast<int>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
  double exponent_ = 1.0;
};

struct AttributeLaw {
  std::string name;
  std::size_t values = 1;
  double exponent = 1.2;
};

struct SynthSpec {
  int classes = 2;
  int token_dim = 8;
  std::vector<std::vector<double>> means;  // [classes][token_dim]
  std::vector<std::vector<double>> field;  // [token_dim][2]: value += field . (u/g - 1/2, v/g - 1/2)
  double sigma = 0.1;                      // per-token noise std
  feedback::TruncNormal long_side{12.0, 4.0, 8.0, 16.0};  // in tokens
  double aspect_min = 0.5;
  double aspect_max = 2.0;
  int grid = 16;    // reference grid used for (u, v)
  int stride = posenc::kDefaultTokenStride;  // pixels per token
  std::vector<AttributeLaw> attributes;

  void validate() const {
    if (classes < 1) throw ConfigError("data.classes must be >= 1");
    if (token_dim < 1) throw ConfigError("data.token_dim must be >= 1");
    if (!(sigma >= 0.0)) throw ConfigError("data.sigma must be >= 0");
    if (means.size() != static_cast<std::size_t>(classes)) throw ConfigError("data: one mean vector per class required");
    for (const auto& m : means) {
      if (m.size() != static_cast<std::size_t>(token_dim)) throw ConfigError("data: class mean has the wrong dimension");
    }
    if (field.size() != static_cast<std::size_t>(token_dim)) throw ConfigError("data: gradient field needs one row per token dim");
    for (const auto& f : field) {
      if (f.size() != 2) throw ConfigError("data: gradient field rows have two coefficients");
    }
    long_side.validate();
    if (long_side.a < 1.0) throw ConfigError("data.long_min must be >= 1 token");
    if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) throw ConfigError("data.aspect_min/max must satisfy 0 < min <= max");
    if (grid < 1) throw ConfigError("data.grid must be >= 1");
    if (stride < 1) throw ConfigError("data.stride must be >= 1");
    for (const auto& a : attributes) {
      if (a.values < 1) throw ConfigError("data attribute '" + a.name + "' needs at least one value");
    }
  }
};

/// Deterministic spec: class means from a fixed stream with scale `spread`,
/// gradient coefficients of magnitude `field_scale`.
inline SynthSpec make_spec(int classes, int token_dim, double sigma, double spread = 1.0, double field_scale = 0.5,
                           std::uint64_t seed = 20240731) {
  SynthSpec s;
  s.classes = classes;
  s.token_dim = token_dim;
  s.sigma = sigma;
  Rng rng(seed);
  for (int c = 0; c < classes; ++c) {
    std::vector<double> m(static_cast<std::size_t>(token_dim));
    for (auto& v : m) v = spread * rng.normal();
    s.means.push_back(std::move(m));
  }
  for (int j = 0; j < token_dim; ++j) s.field.push_back({field_scale * rng.normal(), field_scale * rng.normal()});
  s.validate();
  return s;
}

/// Noise-free token value of class c at a normalized position.
inline std::vector<double> clean_token(const SynthSpec& s, int c, const posenc::NormalizedPosition& p) {
  std::vector<double> v = s.means.at(static_cast<std::size_t>(c));
  const double du = p.u / s.grid - 0.5, dv = p.v / s.grid - 0.5;
  for (std::size_t j = 0; j < v.size(); ++j) v[j] += s.field[j][0] * du + s.field[j][1] * dv;
  return v;
}

template <class T>
struct Sample {
  feedback::DataRecord record;
  TokenGrid<T> grid;
};

/// Metadata only: class, resolution and tags. Consumes the same draws as
/// the first half of gen_record.
inline feedback::DataRecord gen_record_meta(const SynthSpec& s, Rng& rng, const std::vector<Zipf>& laws) {
  feedback::DataRecord r;
  r.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.classes)));
  const int long_tokens = std::max(1, static_cast<int>(std::lround(feedback::trunc_norm_sample(s.long_side, rng))));
  const double aspect = rng.uniform(s.aspect_min, s.aspect_max);  // W / H
  int w = long_tokens, h = long_tokens;
  if (aspect >= 1.0) {
    h = std::max(1, static_cast<int>(std::lround(long_tokens / aspect)));
  } else {
    w = std::max(1, static_cast<int>(std::lround(long_tokens * aspect)));
  }
  r.width = w * s.stride;
  r.height = h * s.stride;
  for (std::size_t i = 0; i < s.attributes.size(); ++i) r.tags.emplace_back(s.attributes[i].name, laws[i].sample(rng));
  return r;
}

inline std::vector<Zipf> make_laws(const SynthSpec& s) {
  std::vector<Zipf> laws;
  for (const auto& a : s.attributes) laws.emplace_back(a.values, a.exponent);
  return laws;
}

/// Tokens at a given token resolution for class c.
template <class T>
TokenGrid<T> render(const SynthSpec& s, int c, int width, int height, Rng& rng) {
  TokenGrid<T> g;
  g.geom = posenc::grid_geometry(width, height, s.grid);
  const auto pos = posenc::lattice_positions(g.geom);
  const auto d = static_cast<std::size_t>(s.token_dim);
  g.tokens = Tensor<T>(Shape{pos.size(), d});
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto v = clean_token(s, c, pos[i]);
    for (std::size_t j = 0; j < d; ++j) g.tokens[i * d + j] = static_cast<T>(v[j] + s.sigma * rng.normal());
  }
  return g;
}

template <class T>
Sample<T> gen_record(const SynthSpec& s, Rng& rng, const std::vector<Zipf>& laws) {
  Sample<T> out;
  out.record = gen_record_meta(s, rng, laws);
  out.grid = render<T>(s, out.record.label, out.record.width / s.stride, out.record.height / s.stride, rng);
  return out;
}

template <class T>
Sample<T> gen_record(const SynthSpec& s, Rng& rng) {
  return gen_record<T>(s, rng, make_laws(s));
}

// ---------------------------------------------------------------------------
// Corpus statistics

struct CorpusStats {
  std::map<int, std::uint64_t> long_side;                         // pixels -> records
  std::map<std::string, std::map<int, std::uint64_t>> attributes;  // name -> value -> records
  std::map<int, std::uint64_t> labels;
  std::uint64_t records = 0;

  CorpusStats& operator+=(const CorpusStats& o) {
    for (const auto& [k, v] : o.long_side) long_side[k] += v;
    for (const auto& [name, table] : o.attributes) {
      for (const auto& [k, v] : table) attributes[name][k] += v;
    }
    for (const auto& [k, v] : o.labels) labels[k] += v;
    records += o.records;
    return *this;
  }

  bool operator==(const CorpusStats&) const = default;
};

inline CorpusStats corpus_stats(std::span<const feedback::DataRecord> records) {
  CorpusStats s;
  for (const auto& r : records) {
    ++s.long_side[r.long_side()];
    for (const auto& [name, value] : r.tags) ++s.attributes[name][value];
    ++s.labels[r.label];
    ++s.records;
  }
  return s;
}

inline void write_corpus_csv(std::ostream& os, const CorpusStats& s) {
  os << "table,key,value,count\n";
  for (const auto& [k, v] : s.long_side) os << "long_side,pixels," << k << ',' << v << '\n';
  for (const auto& [k, v] : s.labels) os << "label,class," << k << ',' << v << '\n';
  for (const auto& [name, table] : s.attributes) {
    for (const auto& [k, v] : table) os << "attribute," << name << ',' << k << ',' << v << '\n';
  }
}

/// Least-squares slope of log(count) against log(rank + 1) over values with
/// at least `min_count` occurrences.
inline double zipf_slope(const std::map<int, std::uint64_t>& table, std::uint64_t min_count = 20) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0, n = 0;
  for (const auto& [k, v] : table) {
    if (v < min_count) continue;
    const double x = std::log(static_cast<double>(k + 1)), y = std::log(static_cast<double>(v));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    n += 1;
  }
  if (n < 2) throw ContractError("zipf_slope needs at least two populated values");
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace djfk::synth
