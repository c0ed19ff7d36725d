#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "djfk/autodiff.hpp"

namespace djfk {

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;
  bool pass = true;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

inline std::ostream& operator<<(std::ostream& os, const GradCheckReport& r) {
  for (const auto& e : r.entries) {
    os << (e.pass ? "  ok   " : "  FAIL ") << e.name << " (" << e.elements << " elems) max_rel=" << e.max_rel_error
       << " max_abs=" << e.max_abs_error << '\n';
  }
  os << (r.pass ? "PASS" : "FAIL") << " tolerance=" << r.tolerance << " worst=" << r.worst() << '\n';
  return os;
}

// Denominator floor keeps exactly-zero gradients from dividing by zero; the
// central-difference noise at h=1e-5 sits far below it.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares backward() gradients against central differences.
///
/// `model_fn(Tape<double>&)` must return a scalar Var and be deterministic in
/// the parameter values.
template <class F>
GradCheckReport gradient_check(F&& model_fn, std::span<const NamedParameter<double>> params, double tolerance,
                               double h = 1e-5) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const auto& np : params) np.param->zero_grad();
  {
    Tape<double> tape;
    tape.backward(model_fn(tape));
  }
  auto eval = [&]() {
    Tape<double> tape(false, false);
    return model_fn(tape).value().item();
  };
  for (const auto& np : params) {
    GradCheckEntry e;
    e.name = np.name;
    auto& p = *np.param;
    e.elements = p.value.numel();
    const Tensor<double> analytic = p.grad;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double fp = eval();
      p.value[i] = orig - h;
      const double fm = eval();
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[i], numeric));
      e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic[i] - numeric));
    }
    e.pass = e.max_rel_error < tolerance;
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  for (const auto& np : params) np.param->zero_grad();
  return report;
}

}  // namespace djfk
