#pragma once

// Normal, chi-square, Student t and F distribution functions.
//
// CDFs are built on the regularized incomplete gamma and beta functions
// (series plus modified-Lentz continued fractions); quantiles invert the
// CDF (or the survival function, for upper-tail accuracy) with a bracketed
// Newton iteration. Absolute accuracy is around 1e-14 over the ranges used here.

#include "posi/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace posi::dist {

namespace detail {

inline constexpr double kEps = 1e-16;
inline constexpr double kTiny = 1e-300;
inline constexpr int kMaxIter = 100000;

// Root of an increasing function on [lo, hi] with g(lo) <= 0 <= g(hi).
// Newton steps are taken when they stay inside the bracket, bisection otherwise.
template <class G, class DG>
double solve_increasing(G&& g, DG&& dg, double lo, double hi, double x0) {
  double x = std::clamp(x0, lo, hi);
  for (int it = 0; it < 500; ++it) {
    const double gx = g(x);
    if (gx == 0.0) return x;
    if (gx < 0.0) lo = x; else hi = x;
    const double d = dg(x);
    double next = (d > 0.0 && std::isfinite(d)) ? x - gx / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-15 * std::max(1.0, std::abs(x)) || hi - lo <= 1e-15 * std::max(1.0, std::abs(x))) {
      return next;
    }
    x = next;
  }
  return x;
}

// Grows hi until g(hi) >= 0.
template <class G>
double bracket_above(G&& g, double start) {
  double hi = std::max(start, 1.0);
  for (int i = 0; i < 2000 && g(hi) < 0.0; ++i) hi *= 2.0;
  return hi;
}

}  // namespace detail

// --- standard normal -------------------------------------------------------

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

// Acklam's rational approximation refined with two Halley steps.
inline double normal_quantile(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::domain, "normal_quantile: p outside [0,1]");
  if (p == 0.0) return -kInf;
  if (p == 1.0) return kInf;

  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int i = 0; i < 2; ++i) {
    // Work in the smaller tail to keep the residual accurate.
    const double e = (x < 0.0) ? normal_cdf(x) - p : (1.0 - p) - normal_sf(x);
    const double u = e / normal_pdf(x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return x;
}

// --- incomplete gamma --------------------------------------------------------

namespace detail {

inline double gamma_prefactor(double a, double x) { return std::exp(-x + a * std::log(x) - std::lgamma(a)); }

inline double gamma_p_series(double a, double x) {
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int n = 0; n < kMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kEps) break;
  }
  return sum * gamma_prefactor(a, x);
}

inline double gamma_q_fraction(double a, double x) {
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return gamma_prefactor(a, x) * h;
}

}  // namespace detail

// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
  if (a <= 0.0) throw Error(ErrorCode::domain, "gamma_p: a must be positive");
  if (x <= 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_fraction(a, x);
}

// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double gamma_q(double a, double x) {
  if (a <= 0.0) throw Error(ErrorCode::domain, "gamma_q: a must be positive");
  if (x <= 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_fraction(a, x);
}

// --- incomplete beta ---------------------------------------------------------

namespace detail {

inline double beta_fraction(double a, double b, double x) {
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m < kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

// log(Gamma(a + b) / Gamma(a)); Stirling differences for large a avoid the
// cancellation of two nearly equal lgamma values.
inline double lgamma_ratio(double a, double b) {
  if (a < 15.0) return std::lgamma(a + b) - std::lgamma(a);
  auto tail = [](double x) {
    const double x2 = 1.0 / (x * x);
    return (1.0 / 12.0 - x2 * (1.0 / 360.0 - x2 * (1.0 / 1260.0 - x2 / 1680.0))) / x;
  };
  return (a - 0.5) * std::log1p(b / a) + b * std::log(a + b) - b + tail(a + b) - tail(a);
}

// log(1 / B(a, b)).
inline double log_inv_beta(double a, double b) {
  return a >= b ? lgamma_ratio(a, b) - std::lgamma(b) : lgamma_ratio(b, a) - std::lgamma(a);
}

inline double beta_front(double a, double b, double x, double y) {
  return std::exp(log_inv_beta(a, b) + a * std::log(x) + b * std::log(y));
}

// I_x(a, b) with y = 1 - x supplied by the caller, so that x close to 1 keeps
// full relative accuracy in y.
inline double beta_inc_xy(double a, double b, double x, double y) {
  if (a <= 0.0 || b <= 0.0) throw Error(ErrorCode::domain, "beta_inc: parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double front = beta_front(a, b, x, y);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_fraction(a, b, x) / a;
  return 1.0 - front * beta_fraction(b, a, y) / b;
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double beta_inc(double a, double b, double x) {
  return detail::beta_inc_xy(a, b, x, 1.0 - x);
}

// 1 - I_x(a, b), evaluated without cancellation in the upper tail.
inline double beta_inc_complement(double a, double b, double x) {
  if (x <= 0.0) return 1.0;
  if (x >= 1.0) return 0.0;
  return beta_inc(b, a, 1.0 - x);
}

// --- chi-square --------------------------------------------------------------

inline double chi2_pdf(double x, double k) {
  if (x <= 0.0) return (x == 0.0 && k == 2.0) ? 0.5 : 0.0;
  const double h = 0.5 * k;
  return std::exp((h - 1.0) * std::log(x) - 0.5 * x - h * std::numbers::ln2 - std::lgamma(h));
}
inline double chi2_cdf(double x, double k) { return gamma_p(0.5 * k, 0.5 * x); }
inline double chi2_sf(double x, double k) { return gamma_q(0.5 * k, 0.5 * x); }

inline double chi2_quantile(double p, double k) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::domain, "chi2_quantile: p outside [0,1]");
  if (k <= 0.0) throw Error(ErrorCode::domain, "chi2_quantile: degrees of freedom must be positive");
  if (p == 0.0) return 0.0;
  if (p == 1.0) return kInf;
  const double q = 1.0 - p;
  auto g = [&](double x) { return p <= 0.5 ? chi2_cdf(x, k) - p : q - chi2_sf(x, k); };
  auto dg = [&](double x) { return chi2_pdf(x, k); };
  // Wilson-Hilferty start.
  const double z = normal_quantile(p);
  const double w = 2.0 / (9.0 * k);
  const double start = std::max(1e-8, k * std::pow(1.0 - w + z * std::sqrt(w), 3));
  const double hi = detail::bracket_above(g, std::max(start, k) * 2.0);
  return detail::solve_increasing(g, dg, 0.0, hi, start);
}

// --- Student t ---------------------------------------------------------------

inline double t_pdf(double t, double r) {
  return std::exp(detail::lgamma_ratio(0.5 * r, 0.5) - 0.5 * std::log(r * std::numbers::pi) -
                  0.5 * (r + 1.0) * std::log1p(t * t / r));
}

// Upper tail P(T > t).
inline double t_sf(double t, double r) {
  const double x = r / (r + t * t);
  const double tail = 0.5 * detail::beta_inc_xy(0.5 * r, 0.5, x, t * t / (r + t * t));
  return t >= 0.0 ? tail : 1.0 - tail;
}
inline double t_cdf(double t, double r) { return t_sf(-t, r); }

inline double t_quantile(double p, double r) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::domain, "t_quantile: p outside [0,1]");
  if (r <= 0.0) throw Error(ErrorCode::domain, "t_quantile: degrees of freedom must be positive");
  if (p == 0.5) return 0.0;
  if (p < 0.5) return -t_quantile(1.0 - p, r);
  if (p == 1.0) return kInf;
  const double q = 1.0 - p;
  auto g = [&](double t) { return q - t_sf(t, r); };
  auto dg = [&](double t) { return t_pdf(t, r); };
  const double start = normal_quantile(p);
  const double hi = detail::bracket_above(g, 2.0 * start + 1.0);
  return detail::solve_increasing(g, dg, 0.0, hi, start);
}

// --- F -----------------------------------------------------------------------

inline double f_pdf(double x, double d1, double d2) {
  if (x <= 0.0) return 0.0;
  return std::exp(0.5 * d1 * std::log(d1 / d2) + (0.5 * d1 - 1.0) * std::log(x) -
                  0.5 * (d1 + d2) * std::log1p(d1 * x / d2) + detail::log_inv_beta(0.5 * d1, 0.5 * d2));
}
inline double f_cdf(double x, double d1, double d2) {
  if (x <= 0.0) return 0.0;
  return detail::beta_inc_xy(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2), d2 / (d1 * x + d2));
}
inline double f_sf(double x, double d1, double d2) {
  if (x <= 0.0) return 1.0;
  return detail::beta_inc_xy(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * x), d1 * x / (d2 + d1 * x));
}

inline double f_quantile(double p, double d1, double d2) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::domain, "f_quantile: p outside [0,1]");
  if (d1 <= 0.0 || d2 <= 0.0) throw Error(ErrorCode::domain, "f_quantile: degrees of freedom must be positive");
  if (p == 0.0) return 0.0;
  if (p == 1.0) return kInf;
  const double q = 1.0 - p;
  auto g = [&](double x) { return p <= 0.5 ? f_cdf(x, d1, d2) - p : q - f_sf(x, d1, d2); };
  auto dg = [&](double x) { return f_pdf(x, d1, d2); };
  const double start = chi2_quantile(p, d1) / d1;
  const double hi = detail::bracket_above(g, 2.0 * start + 1.0);
  return detail::solve_increasing(g, dg, 0.0, hi, start);
}

}  // namespace posi::dist
