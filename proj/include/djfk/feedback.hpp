#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

#include "djfk/error.hpp"
#include "djfk/rng.hpp"

namespace djfk::feedback {

// ---------------------------------------------------------------------------
// Truncated normal

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

/// trunc_norm(mu, sigma, a, b): N(mu, sigma^2) restricted to [a, b].
struct TruncNormal {
  double mu = 0.0;
  double sigma = 1.0;
  double a = -1.0;
  double b = 1.0;

  void validate() const {
    if (!(sigma > 0.0)) throw ConfigError("trunc_norm sigma must be > 0");
    if (!(a < b)) throw ConfigError("trunc_norm needs a < b (got a=" + std::to_string(a) + ", b=" + std::to_string(b) + ")");
  }

  double alpha() const { return (a - mu) / sigma; }
  double beta() const { return (b - mu) / sigma; }

  /// Probability mass of the parent normal inside [a, b].
  double mass() const {
    return alpha() >= 0.0 ? normal_sf(alpha()) - normal_sf(beta()) : normal_cdf(beta()) - normal_cdf(alpha());
  }

  double cdf(double x) const {
    if (x <= a) return 0.0;
    if (x >= b) return 1.0;
    const double z = (x - mu) / sigma;
    const double num = alpha() >= 0.0 ? normal_sf(alpha()) - normal_sf(z) : normal_cdf(z) - normal_cdf(alpha());
    return std::clamp(num / mass(), 0.0, 1.0);
  }

  double pdf(double x) const {
    if (x < a || x > b) return 0.0;
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * 3.14159265358979323846) * mass());
  }

  double mean() const {
    const double phi_a = std::exp(-0.5 * alpha() * alpha()), phi_b = std::exp(-0.5 * beta() * beta());
    return mu + sigma * (phi_a - phi_b) / (std::sqrt(2.0 * 3.14159265358979323846) * mass());
  }

  bool operator==(const TruncNormal&) const = default;
};

/// Standard-normal quantile of a probability given either as p (lower tail)
/// or as q = 1 - p (upper tail), whichever is more accurate.
inline double normal_quantile_lower(double p) { return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p); }
inline double normal_quantile_upper(double q) { return std::sqrt(2.0) * boost::math::erfc_inv(2.0 * q); }

/// Rejection from the parent normal; inverse CDF when acceptance < 1%.
inline double trunc_norm_sample(const TruncNormal& d, Rng& rng) {
  d.validate();
  const double z_mass = d.mass();
  if (z_mass >= 0.01) {
    for (;;) {
      const double x = d.mu + d.sigma * rng.normal();
      if (x >= d.a && x <= d.b) return x;
    }
  }
  const double u = rng.uniform();
  double z;
  if (d.alpha() >= 0.0) {
    // Upper tail: work with survival functions to keep precision.
    const double qa = normal_sf(d.alpha()), qb = normal_sf(d.beta());
    z = normal_quantile_upper(std::max(qa - u * (qa - qb), 1e-300));
  } else if (d.beta() <= 0.0) {
    const double pa = normal_cdf(d.alpha()), pb = normal_cdf(d.beta());
    z = normal_quantile_lower(std::max(pa + u * (pb - pa), 1e-300));
  } else {
    const double pa = normal_cdf(d.alpha());
    z = normal_quantile_lower(std::clamp(pa + u * z_mass, 1e-300, 1.0 - 1e-16));
  }
  return std::clamp(d.mu + d.sigma * z, d.a, d.b);
}

// ---------------------------------------------------------------------------
// Records and the transform rule

/// Resolutions are stored in pixels; trunc_norm targets are in kilo-pixels.
inline constexpr double kPixelsPerUnit = 1000.0;

struct DataRecord {
  int width = 1;   // pixels
  int height = 1;  // pixels
  std::vector<std::pair<std::string, int>> tags;  // non-transformable attributes
  int label = -1;                                  // ground-truth class

  int long_side() const { return std::max(width, height); }
  double long_side_units() const { return long_side() / kPixelsPerUnit; }

  bool operator==(const DataRecord&) const = default;
};

/// Downscale-only transform to a long side of round(target * 1000) pixels,
/// aspect preserved. Records already at the target come back unchanged.
inline std::optional<DataRecord> accept_transformable(const DataRecord& r, double target) {
  if (r.width < 1 || r.height < 1) throw ContractError("record dimensions must be >= 1");
  const long want = std::lround(target * kPixelsPerUnit);
  if (want < 1 || r.long_side() < want) return std::nullopt;
  if (r.long_side() == want) return r;
  DataRecord out = r;
  const double k = static_cast<double>(want) / r.long_side();
  if (r.width >= r.height) {
    out.width = static_cast<int>(want);
    out.height = std::max(1, static_cast<int>(std::lround(r.height * k)));
  } else {
    out.height = static_cast<int>(want);
    out.width = std::max(1, static_cast<int>(std::lround(r.width * k)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running statistics

struct AttributeSpec {
  std::string name;
  std::vector<double> target;  // target frequency of each value
};

struct FeedbackConfig {
  std::vector<AttributeSpec> attributes;
  std::size_t window = 10000;
  double discard_prob = 0.5;
  TruncNormal resolution{1.024, 1.0, 0.256, 4.096};
  int bins = 64;

  void validate() const {
    if (window < 1) throw ConfigError("feedback.window must be >= 1");
    if (!(discard_prob >= 0.0 && discard_prob <= 1.0)) throw ConfigError("feedback.discard_prob must be in [0, 1]");
    if (bins < 1) throw ConfigError("feedback.bins must be >= 1");
    resolution.validate();
    for (const auto& a : attributes) {
      if (a.target.empty()) throw ConfigError("feedback target for attribute '" + a.name + "' is empty");
      for (double t : a.target) {
        if (!(t >= 0.0)) throw ConfigError("feedback target for attribute '" + a.name + "' must be >= 0");
      }
    }
  }
};

struct AttributeStats {
  std::string name;
  std::vector<double> target;
  std::vector<std::uint64_t> seen;      // cumulative offers
  std::vector<std::uint64_t> accepted;  // cumulative accepts
  std::vector<std::uint64_t> window;    // accepts inside the sliding window

  bool operator==(const AttributeStats&) const = default;
};

struct Outcome {
  DataRecord record;  // as accepted (transformed) or as offered
  bool accepted = false;
};

class FeedbackState {
 public:
  FeedbackState() = default;

  explicit FeedbackState(const FeedbackConfig& cfg) : window_size_(cfg.window), discard_prob_(cfg.discard_prob), resolution_(cfg.resolution) {
    cfg.validate();
    for (const auto& a : cfg.attributes) {
      index_[a.name] = attrs_.size();
      const std::size_t k = a.target.size();
      attrs_.push_back(AttributeStats{a.name, a.target, std::vector<std::uint64_t>(k), std::vector<std::uint64_t>(k),
                                      std::vector<std::uint64_t>(k)});
    }
    histogram_.assign(static_cast<std::size_t>(cfg.bins), 0);
  }

  std::uint64_t offered() const { return offered_; }
  std::uint64_t accepted() const { return accepted_; }
  std::uint64_t rejected() const { return rejected_; }
  std::size_t window_fill() const { return ring_.size(); }
  const std::vector<AttributeStats>& attributes() const { return attrs_; }
  const AttributeStats& attribute(const std::string& name) const { return attrs_.at(lookup(name)); }
  const std::vector<std::uint64_t>& resolution_histogram() const { return histogram_; }
  const TruncNormal& resolution_target() const { return resolution_; }

  /// Accepted frequency of a value inside the sliding window.
  double window_frequency(const std::string& name, int value) const {
    const auto& a = attrs_.at(lookup(name));
    check_value(a, value);
    return ring_.empty() ? 0.0 : static_cast<double>(a.window[static_cast<std::size_t>(value)]) / static_cast<double>(ring_.size());
  }

  /// Cumulative accepted frequency count(v) / total.
  double frequency(const std::string& name, int value) const {
    const auto& a = attrs_.at(lookup(name));
    check_value(a, value);
    return accepted_ == 0 ? 0.0 : static_cast<double>(a.accepted[static_cast<std::size_t>(value)]) / static_cast<double>(accepted_);
  }

  bool over_target(const DataRecord& r) const {
    for (const auto& [name, value] : r.tags) {
      const auto& a = attrs_[lookup(name)];
      check_value(a, value);
      if (window_frequency(name, value) > a.target[static_cast<std::size_t>(value)]) return true;
    }
    return false;
  }

  /// Keep/discard decision for the non-transformable rule; the state is not
  /// touched. Consumes one uniform draw only when some tag is over target.
  bool decide(const DataRecord& r, Rng& rng) const {
    if (!over_target(r)) return true;
    return !(rng.uniform() < discard_prob_);
  }

  void apply(const Outcome& o) {
    for (const auto& [name, value] : o.record.tags) check_value(attrs_[lookup(name)], value);
    ++offered_;
    for (const auto& [name, value] : o.record.tags) ++attrs_[lookup(name)].seen[static_cast<std::size_t>(value)];
    if (!o.accepted) {
      ++rejected_;
      return;
    }
    ++accepted_;
    std::vector<std::pair<std::size_t, std::size_t>> entry;
    for (const auto& [name, value] : o.record.tags) {
      const std::size_t i = lookup(name);
      ++attrs_[i].accepted[static_cast<std::size_t>(value)];
      ++attrs_[i].window[static_cast<std::size_t>(value)];
      entry.emplace_back(i, static_cast<std::size_t>(value));
    }
    if (ring_.size() < window_size_) {
      ring_.push_back(std::move(entry));
    } else {
      for (const auto& [i, v] : ring_[head_]) --attrs_[i].window[v];
      ring_[head_] = std::move(entry);
      head_ = (head_ + 1) % window_size_;
    }
    if (!histogram_.empty()) ++histogram_[bin_of(o.record.long_side_units())];
  }

  /// Replace target frequencies for one attribute (used by scorers).
  void set_target(const std::string& name, std::vector<double> target) {
    auto& a = attrs_.at(lookup(name));
    if (target.size() != a.target.size()) throw ConfigError("feedback target size mismatch for '" + name + "'");
    a.target = std::move(target);
  }

  std::size_t bin_of(double x) const {
    const double f = (x - resolution_.a) / (resolution_.b - resolution_.a);
    const auto n = static_cast<long>(histogram_.size());
    return static_cast<std::size_t>(std::clamp(static_cast<long>(std::floor(f * static_cast<double>(n))), 0L, n - 1));
  }

  bool operator==(const FeedbackState& o) const {
    return attrs_ == o.attrs_ && offered_ == o.offered_ && accepted_ == o.accepted_ && rejected_ == o.rejected_ &&
           histogram_ == o.histogram_ && window_size_ == o.window_size_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown feedback attribute '" + name + "'");
    return it->second;
  }

  static void check_value(const AttributeStats& a, int value) {
    if (value < 0 || static_cast<std::size_t>(value) >= a.target.size()) {
      throw ConfigError("value " + std::to_string(value) + " out of range for feedback attribute '" + a.name + "'");
    }
  }

  std::vector<AttributeStats> attrs_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> ring_;
  std::size_t head_ = 0;
  std::size_t window_size_ = 10000;
  double discard_prob_ = 0.5;
  TruncNormal resolution_{1.024, 1.0, 0.256, 4.096};
  std::vector<std::uint64_t> histogram_;
  std::uint64_t offered_ = 0;
  std::uint64_t accepted_ = 0;
  std::uint64_t rejected_ = 0;
};

/// Pure update: a new state with every outcome applied in order.
inline FeedbackState update_stats(FeedbackState state, std::span<const Outcome> batch) {
  for (const auto& o : batch) state.apply(o);
  return state;
}

/// Non-transformable rule: discard with probability 1/2 when any tag is over
/// its target frequency. The state records the outcome either way.
inline bool accept_nontransformable(const DataRecord& r, FeedbackState& state, Rng& rng) {
  const bool keep = state.decide(r, rng);
  state.apply(Outcome{r, keep});
  return keep;
}

/// A checkpoint evaluation hook: returns a non-negative weakness score per
/// attribute value; targets are reweighted by (1 + score) and renormalized.
using Scorer = std::function<double(const std::string& attribute, int value)>;

inline void apply_scorer(FeedbackState& state, const Scorer& scorer) {
  for (const auto& a : state.attributes()) {
    std::vector<double> t = a.target;
    double total = 0.0;
    for (std::size_t v = 0; v < t.size(); ++v) {
      const double s = scorer(a.name, static_cast<int>(v));
      if (!(s >= 0.0)) throw ContractError("scorer returned a negative or NaN score for '" + a.name + "'");
      t[v] *= 1.0 + s;
      total += t[v];
    }
    if (total > 0.0) {
      for (auto& x : t) x /= total;
    }
    state.set_target(a.name, std::move(t));
  }
}

// ---------------------------------------------------------------------------
// Metrics

/// (better + same/2) / (better + same + worse).
inline double win_rate(std::uint64_t better, std::uint64_t same, std::uint64_t worse) {
  const std::uint64_t n = better + same + worse;
  if (n == 0) throw ContractError("win_rate needs at least one comparison");
  return (static_cast<double>(better) + 0.5 * static_cast<double>(same)) / static_cast<double>(n);
}

/// Target probability of each of `bins` equal bins on [a, b].
inline std::vector<double> binned_target(const TruncNormal& target, std::size_t bins) {
  std::vector<double> q(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    const double lo = target.a + (target.b - target.a) * static_cast<double>(i) / static_cast<double>(bins);
    const double hi = target.a + (target.b - target.a) * static_cast<double>(i + 1) / static_cast<double>(bins);
    q[i] = target.cdf(hi) - target.cdf(lo);
  }
  return q;
}

inline constexpr double kKlFloor = 1e-12;

/// KL(empirical || q) with both sides floored at 1e-12.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl: histogram sizes differ");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kKlFloor), qi = std::max(q[i], kKlFloor);
    if (p[i] > 0.0) kl += pi * std::log(pi / qi);
  }
  return std::max(kl, 0.0);
}

inline double kl_to_target(std::span<const std::uint64_t> histogram, const TruncNormal& target) {
  std::uint64_t total = 0;
  for (auto c : histogram) total += c;
  if (total == 0) throw ContractError("kl_to_target: empty histogram");
  std::vector<double> p(histogram.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(histogram[i]) / static_cast<double>(total);
  const auto q = binned_target(target, histogram.size());
  return kl_divergence(p, q);
}

/// Kolmogorov-Smirnov statistic of a sample against a CDF.
template <class Cdf>
double ks_statistic(std::vector<double> xs, Cdf&& cdf) {
  if (xs.empty()) throw ContractError("ks_statistic: empty sample");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Snapshots: one `attribute\tvalue\tcount` line per accepted count.

inline void write_snapshot(std::ostream& os, const FeedbackState& s) {
  for (const auto& a : s.attributes()) {
    for (std::size_t v = 0; v < a.accepted.size(); ++v) os << a.name << '\t' << v << '\t' << a.accepted[v] << '\n';
  }
}

struct SnapshotLine {
  std::string attribute;
  int value = 0;
  std::uint64_t count = 0;

  bool operator==(const SnapshotLine&) const = default;
};

inline std::vector<SnapshotLine> read_snapshot(std::istream& is) {
  std::vector<SnapshotLine> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    SnapshotLine s;
    std::string value, count;
    if (!std::getline(ls, s.attribute, '\t') || !std::getline(ls, value, '\t') || !std::getline(ls, count)) {
      throw FormatError("snapshot line " + std::to_string(lineno) + ": expected attribute<TAB>value<TAB>count");
    }
    try {
      s.value = std::stoi(value);
      s.count = std::stoull(count);
    } catch (const std::exception&) {
      throw FormatError("snapshot line " + std::to_string(lineno) + ": bad number");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace djfk::feedback
