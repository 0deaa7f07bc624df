#pragma once

// Exact coverage of the naive-style interval K * sigma-hat_{1.M-hat} after
// choosing between M1 = {1} and M2 = {1,2} with a t-test at threshold C.
// Coverage depends on the design only through rho and on beta through zeta.

#include "posi/constants.hpp"
#include "posi/core.hpp"
#include "posi/distributions.hpp"
#include "posi/quadrature.hpp"

#include <boost/math/tools/toms748_solve.hpp>

#include <cmath>
#include <functional>
#include <string>

namespace posi {

struct NestedScenario {
  double rho = 0.0;
  double zeta = 0.0;
  double c_threshold = std::sqrt(2.0);
  Dof r;
  double alpha = 0.05;

  void validate() const {
    if (!(std::abs(rho) < 1.0)) throw Error(ErrorCode::domain, "rho must lie in (-1, 1)");
    if (!(c_threshold > 0.0)) throw Error(ErrorCode::domain, "threshold C must be positive");
    if (!std::isfinite(zeta)) throw Error(ErrorCode::domain, "zeta must be finite");
  }
};

enum class NestedTarget { SelectedModel, FullModel };

inline const char* to_string(NestedTarget t) { return t == NestedTarget::SelectedModel ? "selected" : "full"; }

struct CoverageValue {
  double value = 0.0;
  double abs_err = 0.0;
  NestedTarget target = NestedTarget::SelectedModel;
};

struct QuadratureOptions {
  int inner_nodes = 201;
  int outer_nodes = 200;
  double tail_mass = 1e-12;      // probability of sigma-hat/sigma left outside the outer range
  bool estimate_error = true;    // compare against doubled orders
  double inner_tolerance = 1e-9;
  int max_splits = 8;            // bisection depth for stubborn inner integrals
};

// Phi(x + c) - Phi(x - c), evaluated with upper tails so it keeps relative
// accuracy when both terms are close to one.
inline double delta(double x, double c) {
  const double ax = std::abs(x);
  return dist::normal_sf(ax - c) - dist::normal_sf(ax + c);
}

// 1 - delta(x, c) = Phi(x - c) + Phi(-x - c).
inline double delta_complement(double x, double c) {
  const double ax = std::abs(x);
  return dist::normal_cdf(ax - c) + dist::normal_sf(ax + c);
}

namespace detail {

struct Estimate {
  double value = 0.0;
  double err = 0.0;
};

// Integral over [-a, a] of (1 - delta((zeta + rho z)/s, c/s)) phi(z) dz.
inline double inner_fixed(const GaussLegendre& gl, double lo, double hi, double zeta, double rho, double s, double c) {
  return gl.integrate(
      [&](double z) { return delta_complement((zeta + rho * z) / s, c / s) * dist::normal_pdf(z); }, lo, hi);
}

inline Estimate inner_adaptive(const GaussLegendre& gl, const GaussLegendre& gl2, double lo, double hi, double zeta,
                               double rho, double s, double c, double tol, int depth) {
  const double a = inner_fixed(gl, lo, hi, zeta, rho, s, c);
  const double b = inner_fixed(gl2, lo, hi, zeta, rho, s, c);
  if (std::abs(a - b) <= tol || depth <= 0) return {b, std::abs(a - b)};
  const double mid = 0.5 * (lo + hi);
  const Estimate left = inner_adaptive(gl, gl2, lo, mid, zeta, rho, s, c, 0.5 * tol, depth - 1);
  const Estimate right = inner_adaptive(gl, gl2, mid, hi, zeta, rho, s, c, 0.5 * tol, depth - 1);
  return {left.value + right.value, left.err + right.err};
}

// Conditional coverage given t = sigma-hat / sigma.
inline Estimate conditional_coverage(const NestedScenario& scn, double k, double t, NestedTarget target,
                                     const QuadratureOptions& opts) {
  const double s = std::sqrt(1.0 - scn.rho * scn.rho);
  const double tk = t * k;
  const double tc = t * scn.c_threshold;
  const double select_m1 = delta(scn.zeta, tc);
  Estimate inner;
  const GaussLegendre& gl = GaussLegendre::get(opts.inner_nodes);
  if (opts.estimate_error) {
    const GaussLegendre& gl2 = GaussLegendre::get(2 * opts.inner_nodes);
    inner = inner_adaptive(gl, gl2, -tk, tk, scn.zeta, scn.rho, s, tc, opts.inner_tolerance, opts.max_splits);
    if (inner.err > 1e3 * opts.inner_tolerance) {
      throw Error(ErrorCode::convergence, "inner quadrature did not converge (achieved bound " + std::to_string(inner.err) + ")");
    }
  } else {
    inner.value = inner_fixed(gl, -tk, tk, scn.zeta, scn.rho, s, tc);
  }
  double value = delta(0.0, tk) * select_m1 + inner.value;
  if (target == NestedTarget::FullModel) value += (delta(scn.rho * scn.zeta / s, tk) - delta(0.0, tk)) * select_m1;
  return {value, inner.err};
}

// log density of t = sqrt(chi2_r / r).
inline double log_sigma_ratio_density(double t, double r) {
  return std::log(2.0) + 0.5 * r * std::log(0.5 * r) - std::lgamma(0.5 * r) + (r - 1.0) * std::log(t) - 0.5 * r * t * t;
}

// Central range of t holding all but `tail_mass` of its probability.
inline std::pair<double, double> sigma_ratio_range(Dof r, double tail_mass) {
  if (r.is_known()) return {1.0, 1.0};
  const double rv = r.as_double();
  return {std::sqrt(dist::chi2_quantile(0.5 * tail_mass, rv) / rv), std::sqrt(dist::chi2_quantile(1.0 - 0.5 * tail_mass, rv) / rv)};
}

inline CoverageValue coverage(const NestedScenario& scn, double k, NestedTarget target, const QuadratureOptions& opts) {
  scn.validate();
  if (!(k > 0.0)) throw Error(ErrorCode::domain, "interval constant K must be positive");
  if (scn.r.is_known()) {
    const Estimate e = conditional_coverage(scn, k, 1.0, target, opts);
    return {std::clamp(e.value, 0.0, 1.0), e.err, target};
  }
  const double rv = scn.r.as_double();
  const auto [lo, hi] = sigma_ratio_range(scn.r, opts.tail_mass);
  auto outer = [&](int nodes, double& inner_err) {
    const GaussLegendre& gl = GaussLegendre::get(nodes);
    return gl.integrate(
        [&](double t) {
          const Estimate e = conditional_coverage(scn, k, t, target, opts);
          inner_err = std::max(inner_err, e.err);
          return e.value * std::exp(log_sigma_ratio_density(t, rv));
        },
        lo, hi);
  };
  double inner_err = 0.0;
  const double a = outer(opts.outer_nodes, inner_err);
  if (!opts.estimate_error) return {std::clamp(a, 0.0, 1.0), 0.0, target};
  const double b = outer(2 * opts.outer_nodes, inner_err);
  return {std::clamp(b, 0.0, 1.0), std::abs(a - b) + inner_err + opts.tail_mass, target};
}

}  // namespace detail

// Coverage of beta_{1.M-hat}.
inline CoverageValue coverage_selected(const NestedScenario& scn, double k, const QuadratureOptions& opts = {}) {
  return detail::coverage(scn, k, NestedTarget::SelectedModel, opts);
}

// Coverage of beta_{1.M2}, the coefficient in the larger model.
inline CoverageValue coverage_full(const NestedScenario& scn, double k, const QuadratureOptions& opts = {}) {
  return detail::coverage(scn, k, NestedTarget::FullModel, opts);
}

inline CoverageValue nested_coverage(const NestedScenario& scn, double k, NestedTarget target, const QuadratureOptions& opts = {}) {
  return detail::coverage(scn, k, target, opts);
}

struct MinSearchOptions {
  int grid_points = 2001;
  double margin = 8.0;         // grid upper end is t_max (C + K) + margin
  double golden_tolerance = 1e-9;
  QuadratureOptions quadrature;                            // final certified evaluation
  QuadratureOptions scan{64, 48, 1e-12, false, 1e-9, 8};   // grid scan and golden section
};

struct MinCoverage {
  double zeta_star = 0.0;
  double value = 1.0;
  double abs_err = 0.0;
};

// Minimum over zeta of the coverage. Coverage is even in zeta, so only
// zeta >= 0 is searched: a grid scan followed by golden-section refinement
// around the best grid point, certified with error estimates at the end.
inline MinCoverage min_coverage(double rho, double c_threshold, double k, Dof r, NestedTarget target,
                                const MinSearchOptions& opts = {}) {
  NestedScenario scn{rho, 0.0, c_threshold, r, 0.05};
  scn.validate();
  if (opts.grid_points < 2) throw Error(ErrorCode::domain, "min_coverage needs at least two grid points");
  const QuadratureOptions& fast = opts.scan;
  auto eval = [&](double zeta) {
    scn.zeta = zeta;
    return detail::coverage(scn, k, target, fast).value;
  };
  const double t_max = detail::sigma_ratio_range(r, opts.quadrature.tail_mass).second;
  const double upper = t_max * (c_threshold + k) + opts.margin;
  const double step = upper / (opts.grid_points - 1);
  int best = 0;
  double best_value = 2.0;
  for (int i = 0; i < opts.grid_points; ++i) {
    const double v = eval(step * i);
    if (v < best_value) {
      best_value = v;
      best = i;
    }
  }
  double a = step * std::max(0, best - 1);
  double b = step * std::min(opts.grid_points - 1, best + 1);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = eval(x1);
  double f2 = eval(x2);
  while (b - a > opts.golden_tolerance) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = eval(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = eval(x2);
    }
  }
  double zeta_star = step * best;
  if (std::min(f1, f2) < best_value) zeta_star = f1 <= f2 ? x1 : x2;
  scn.zeta = zeta_star;
  const CoverageValue certified = detail::coverage(scn, k, target, opts.quadrature);
  return {zeta_star, certified.value, certified.abs_err};
}

// Smallest K whose minimal coverage of beta_{1.M-hat} reaches 1 - alpha. The
// minimal coverage is continuous and increasing in K, so a bracketing root
// finder on [K_lo, K_S] applies; the upper bracket end is returned.
inline KConstant k_star_nested(double rho, double c_threshold, double alpha, Dof r, const MinSearchOptions& opts = {},
                               double tolerance = 1e-9) {
  detail::check_alpha(alpha);
  const double lo = 1e-3;
  const double hi = k_scheffe(alpha, 2, r).value;
  auto gap = [&](double k) { return min_coverage(rho, c_threshold, k, r, NestedTarget::SelectedModel, opts).value - (1.0 - alpha); };
  const double g_hi = gap(hi);
  if (g_hi < 0.0) throw Error(ErrorCode::convergence, "k_star bracket failure: Scheffe constant does not reach 1 - alpha");
  const double g_lo = gap(lo);
  if (g_lo >= 0.0) return {KKind::OptimalNested, lo, alpha, r, 0.0};
  std::uintmax_t iterations = 200;
  const auto bracket = boost::math::tools::toms748_solve(gap, lo, hi, g_lo, g_hi,
                                                         [tolerance](double a, double b) { return b - a <= tolerance; }, iterations);
  if (bracket.second - bracket.first > tolerance) throw Error(ErrorCode::convergence, "k_star root finder did not converge");
  return {KKind::OptimalNested, bracket.second, alpha, r, 0.0};
}

}  // namespace posi
