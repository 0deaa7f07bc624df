#include "posi/constants.hpp"
#include "posi/design.hpp"
#include "posi/exact_nested.hpp"
#include "posi/selectors.hpp"
#include "support/nested_simulation.hpp"

#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <iostream>
#include <numbers>
#include <random>

using namespace posi;
namespace bm = boost::math;

namespace {

const double kSqrt2 = std::numbers::sqrt2;
const double kN = 1.959963984540054;

double cov(double rho, double zeta, double c, double k, Dof r, NestedTarget t, const QuadratureOptions& q = {}) {
  return nested_coverage({rho, zeta, c, r, 0.05}, k, t, q).value;
}

}  // namespace

TEST(Delta, ClosedForms) {
  const bm::normal z;
  for (double c : {0.3, 1.0, kSqrt2, 3.0}) EXPECT_NEAR(delta(0.0, c), 2.0 * bm::cdf(z, c) - 1.0, 1e-15);
  for (double x : {-2.0, 0.0, 0.7, 9.0}) EXPECT_EQ(delta(x, 0.0), 0.0);
  EXPECT_NEAR(delta(0.0, kN), 0.95, 1e-13);
  // The rounded constant 1.959964 sits 1.5e-8 above the quantile.
  EXPECT_NEAR(delta(0.0, 1.959964), 2.0 * bm::cdf(z, 1.959964) - 1.0, 1e-15);
  EXPECT_NEAR(delta(0.0, 1.959964), 0.95, 2e-9);
  for (double x : {-3.0, 0.4, 2.0, 7.5})
    for (double c : {0.5, 2.0}) {
      EXPECT_NEAR(delta(x, c), bm::cdf(z, x + c) - bm::cdf(z, x - c), 1e-15);
      EXPECT_NEAR(delta(x, c) + delta_complement(x, c), 1.0, 1e-15);
    }
  // Far tail keeps relative accuracy.
  EXPECT_NEAR(delta(30.0, 1.0) / (bm::cdf(bm::complement(z, 29.0)) - bm::cdf(bm::complement(z, 31.0))), 1.0, 1e-10);
}

TEST(Coverage, UncorrelatedRegressorsGiveNominal) {
  for (double zeta : {-3.0, 0.0, 0.5, 2.0, 6.0}) {
    for (auto t : {NestedTarget::SelectedModel, NestedTarget::FullModel}) {
      EXPECT_NEAR(cov(0.0, zeta, kSqrt2, 1.959964, Dof::known(), t), 0.95, 1e-8);
      EXPECT_NEAR(cov(0.0, zeta, kSqrt2, k_naive(0.05, Dof(5)).value, Dof(5), t), 0.95, 1e-8);
    }
  }
}

TEST(Coverage, LargeZetaSelectsTheFullModel) {
  for (double zeta : {-40.0, 40.0})
    EXPECT_NEAR(cov(0.9, zeta, kSqrt2, 1.959964, Dof::known(), NestedTarget::SelectedModel), 0.95, 1e-6);
}

TEST(Coverage, TargetsAgreeWhenRhoZetaIsZero) {
  for (double c : {1.0, kSqrt2, 2.6})
    for (Dof r : {Dof::known(), Dof(3), Dof(20)}) {
      EXPECT_NEAR(cov(0.0, 1.7, c, 2.1, r, NestedTarget::SelectedModel), cov(0.0, 1.7, c, 2.1, r, NestedTarget::FullModel), 1e-10);
      EXPECT_NEAR(cov(0.8, 0.0, c, 2.1, r, NestedTarget::SelectedModel), cov(0.8, 0.0, c, 2.1, r, NestedTarget::FullModel), 1e-10);
    }
}

TEST(Coverage, SignSymmetries) {
  for (double rho : {0.3, 0.9, 0.97})
    for (double zeta : {0.4, 1.3, 3.2})
      for (Dof r : {Dof::known(), Dof(4)})
        for (auto t : {NestedTarget::SelectedModel, NestedTarget::FullModel}) {
          const double v = cov(rho, zeta, kSqrt2, 2.0, r, t);
          EXPECT_NEAR(cov(-rho, -zeta, kSqrt2, 2.0, r, t), v, 1e-10);
          EXPECT_NEAR(cov(rho, -zeta, kSqrt2, 2.0, r, t), v, 1e-10);
          EXPECT_NEAR(cov(-rho, zeta, kSqrt2, 2.0, r, t), v, 1e-10);
        }
}

TEST(Coverage, StableUnderQuadratureDoubling) {
  QuadratureOptions fine;
  fine.inner_nodes = 402;
  fine.outer_nodes = 400;
  for (double rho : {0.5, 0.95})
    for (Dof r : {Dof::known(), Dof(3), Dof(20)})
      for (auto t : {NestedTarget::SelectedModel, NestedTarget::FullModel}) {
        const CoverageValue v = nested_coverage({rho, 1.1, kSqrt2, r, 0.05}, 2.2, t);
        EXPECT_LE(v.abs_err, 1e-6);
        EXPECT_NEAR(v.value, nested_coverage({rho, 1.1, kSqrt2, r, 0.05}, 2.2, t, fine).value, 1e-8);
      }
}

// Exact coverage against direct simulation of the data-generating process.
TEST(Coverage, MatchesDirectSimulation) {
  std::mt19937_64 pick(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cs[] = {kSqrt2, std::sqrt(std::log(10.0)), std::sqrt(std::log(1000.0))};
  const int rs[] = {3, 20, 0};
  for (int i = 0; i < 6; ++i) {
    const double rho = -0.99 + 1.98 * u(pick);
    const double zeta = -5.0 + 10.0 * u(pick);
    const double c = cs[i % 3];
    const double k = 1.0 + 2.0 * u(pick);
    const int r = rs[i % 3];
    const Dof dof = r > 0 ? Dof(r) : Dof::known();
    for (bool full : {false, true}) {
      const auto sim = oracle::simulate_nested(rho, zeta, c, k, r, full, 200000, 100 + i);
      const double exact = cov(rho, zeta, c, k, dof, full ? NestedTarget::FullModel : NestedTarget::SelectedModel);
      EXPECT_NEAR(exact, sim.rate, 3.0 * sim.se + 1e-12)
          << "rho=" << rho << " zeta=" << zeta << " C=" << c << " K=" << k << " r=" << r << " full=" << full;
    }
  }
}

// P(M2 chosen) = 1 - E[Delta(zeta, C sigma-hat / sigma)], checked against
// the library's selector on simulated data.
TEST(Coverage, SelectionFrequencyIdentity) {
  const double rho = 0.6, zeta = 1.2, c = kSqrt2;
  const int r = 5;
  const bm::chi_squared chi(r);
  const double p_m1 = bm::quadrature::gauss_kronrod<double, 61>::integrate(
      [&](double w) { return delta(zeta, c * std::sqrt(w / r)) * bm::pdf(chi, w); }, 0.0, 200.0, 10, 1e-13);
  const auto sim = oracle::simulate_nested(rho, zeta, c, 2.0, r, false, 400000, 9);
  EXPECT_NEAR(sim.m2_rate, 1.0 - p_m1, 3.0 * std::sqrt(p_m1 * (1 - p_m1) / 400000));

  const Design d = nested_design(rho, 2 + r, 3);
  const Selector sel(d, NestedTTest{c});
  const double s = std::sqrt(1.0 - rho * rho);
  const Vector mu = d.x() * (Vector(2) << 0.4, zeta / s).finished();
  std::mt19937_64 gen(5);
  std::normal_distribution<double> z;
  const int reps = 200000;
  int m2 = 0;
  Vector y(2 + r);
  for (int i = 0; i < reps; ++i) {
    for (int j = 0; j < y.size(); ++j) y[j] = mu[j] + z(gen);
    Observation obs = Observation::make(d, y, 1.0);
    obs.sigma_hat = std::sqrt(obs.rss_full / r);
    if (sel(obs).size() == 2) ++m2;
  }
  EXPECT_NEAR(double(m2) / reps, 1.0 - p_m1, 3.0 * std::sqrt(p_m1 * (1 - p_m1) / reps));
}

TEST(MinCoverage, UncorrelatedCase) {
  for (double k : {1.0, 1.959964, 2.5}) {
    const MinCoverage m = min_coverage(0.0, kSqrt2, k, Dof::known(), NestedTarget::SelectedModel);
    EXPECT_NEAR(m.value, 2.0 * bm::cdf(bm::normal(), k) - 1.0, 1e-9);
  }
}

TEST(MinCoverage, NeverAboveRandomProbes) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(-12.0, 12.0);
  for (double rho : {0.5, 0.9})
    for (auto t : {NestedTarget::SelectedModel, NestedTarget::FullModel}) {
      const MinCoverage m = min_coverage(rho, kSqrt2, 2.0, Dof::known(), t);
      EXPECT_LE(m.abs_err, 1e-6);
      for (int i = 0; i < 100; ++i) EXPECT_LE(m.value, cov(rho, u(gen), kSqrt2, 2.0, Dof::known(), t) + 1e-9);
    }
}

TEST(MinCoverage, HeadlineValues) {
  const double rho = 0.9;
  const Dof inf = Dof::known();
  EXPECT_NEAR(min_coverage(rho, kSqrt2, kN, inf, NestedTarget::SelectedModel).value, 0.91, 0.01);
  EXPECT_NEAR(min_coverage(rho, kSqrt2, kN, inf, NestedTarget::FullModel).value, 0.56, 0.01);
  const Design d = nested_design(rho);
  const auto u = ModelCache::enumerate_protected_models(d);
  const double kp = k_posi_planar(posi_family(d, u, KKind::Posi), KKind::Posi, 0.05, inf).value;
  EXPECT_NEAR(min_coverage(rho, kSqrt2, kp, inf, NestedTarget::SelectedModel).value, 0.96, 0.01);
  EXPECT_NEAR(min_coverage(rho, kSqrt2, kp, inf, NestedTarget::FullModel).value, 0.62, 0.01);
}

TEST(MinCoverage, ScheffeIsValid) {
  for (Dof r : {Dof::known(), Dof(10)}) {
    MinSearchOptions opts;
    if (!r.is_known()) opts.grid_points = 201;
    const double ks = k_scheffe(0.05, 2, r).value;
    for (double rho : {0.2, 0.7, 0.95})
      for (double c : {kSqrt2, std::sqrt(std::log(1000.0))})
        EXPECT_GE(min_coverage(rho, c, ks, r, NestedTarget::SelectedModel, opts).value, 0.95);
  }
}

// Known variance as the r -> infinity limit: r = 200 stays within 0.005.
TEST(MinCoverage, LargeDegreesOfFreedomApproachKnownVariance) {
  double worst = 0.0;
  for (double rho : {0.0, 0.5, 0.9, 0.99})
    for (double zeta : {0.0, 1.0, 2.0, 4.0}) {
      const double a = cov(rho, zeta, kSqrt2, kN, Dof(200), NestedTarget::SelectedModel);
      const double b = cov(rho, zeta, kSqrt2, kN, Dof::known(), NestedTarget::SelectedModel);
      worst = std::max(worst, std::abs(a - b));
    }
  std::cout << "max |coverage(r=200) - coverage(r=inf)| = " << worst << "\n";
  EXPECT_LE(worst, 0.005);
}

TEST(KStar, UncorrelatedIsNaive) {
  EXPECT_NEAR(k_star_nested(0.0, kSqrt2, 0.05, Dof::known()).value, kN, 1e-5);
}

TEST(KStar, HeadlineScenario) {
  const Design d = nested_design(0.9);
  const auto u = ModelCache::enumerate_protected_models(d);
  const KConstant ks = k_star_nested(0.9, kSqrt2, 0.05, Dof::known());
  const double kp1 = k_posi_planar(posi_family(d, u, KKind::Posi1), KKind::Posi1, 0.05, Dof::known()).value;
  EXPECT_GT(ks.value, kN);
  EXPECT_LT(ks.value, kp1);
  const MinCoverage m = min_coverage(0.9, kSqrt2, ks.value, Dof::known(), NestedTarget::SelectedModel);
  EXPECT_NEAR(m.value, 0.95, 1e-5);
  // Simulation at the least-favorable zeta.
  const auto sim = oracle::simulate_nested(0.9, m.zeta_star, kSqrt2, ks.value, 0, false, 1000000, 41);
  EXPECT_NEAR(sim.rate, 0.95, 3.0 * sim.se);
}

double zeta_zero_coverage(double rho, double c, double k) {
  const bm::normal nd;
  const double s = std::sqrt(1.0 - rho * rho);
  auto f = [&](double t) {
    return bm::pdf(nd, t) * (bm::cdf(nd, (k + rho * t) / s) - bm::cdf(nd, (-k + rho * t) / s));
  };
  const double sel = 2.0 * bm::quadrature::gauss_kronrod<double, 61>::integrate(f, c, kInf, 15, 1e-14);
  return (1.0 - 2.0 * bm::cdf(bm::complement(nd, c))) * (2.0 * bm::cdf(nd, k) - 1.0) + sel;
}

TEST(KStar, DecreasingInThresholdAtModerateCorrelation) {
  for (double rho : {0.5, 0.7, 0.8}) {
    double prev = kInf;
    for (double c : {kSqrt2, std::sqrt(std::log(10.0)), std::sqrt(std::log(100.0)), std::sqrt(std::log(1000.0))}) {
      const double k = k_star_nested(rho, c, 0.05, Dof::known(), {}, 1e-7).value;
      EXPECT_LE(k, prev + 1e-6) << "rho=" << rho << " C=" << c;
      prev = k;
    }
  }
}

TEST(KStar, ThresholdDependenceAtHighCorrelation) {
  const double c10 = std::sqrt(std::log(10.0));
  const double k2 = k_star_nested(0.9, kSqrt2, 0.05, Dof::known(), {}, 1e-7).value;
  const double k10 = k_star_nested(0.9, c10, 0.05, Dof::known(), {}, 1e-7).value;
  const double k100 = k_star_nested(0.9, std::sqrt(std::log(100.0)), 0.05, Dof::known(), {}, 1e-7).value;
  const double k1000 = k_star_nested(0.9, std::sqrt(std::log(1000.0)), 0.05, Dof::known(), {}, 1e-7).value;
  EXPECT_NEAR(k2, 2.2014608, 1e-6);
  EXPECT_NEAR(k10, 2.2028812, 1e-6);
  EXPECT_LT(k100, k10);
  EXPECT_LT(k1000, k100);
  EXPECT_NEAR(zeta_zero_coverage(0.9, kSqrt2, k2), 0.95, 1e-7);
  EXPECT_LT(zeta_zero_coverage(0.9, c10, k2), 0.9499);
  EXPECT_NEAR(zeta_zero_coverage(0.9, c10, k10), 0.95, 1e-7);
}

TEST(Coverage, DomainErrors) {
  EXPECT_THROW(nested_coverage({1.0, 0.0, 1.0, Dof::known(), 0.05}, 2.0, NestedTarget::SelectedModel), Error);
  EXPECT_THROW(nested_coverage({0.5, 0.0, -1.0, Dof::known(), 0.05}, 2.0, NestedTarget::SelectedModel), Error);
  EXPECT_THROW(k_star_nested(0.5, kSqrt2, 1.5, Dof::known()), Error);
}
