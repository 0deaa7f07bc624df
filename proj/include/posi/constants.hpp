#pragma once

// Interval half-width multipliers: naive, Scheffe, and the Monte Carlo PoSI
// family (K_P, K_P1 and the all-subsets K_P').

#include "posi/core.hpp"
#include "posi/design.hpp"
#include "posi/distributions.hpp"
#include "posi/parallel.hpp"
#include "posi/quadrature.hpp"
#include "posi/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace posi {

enum class KKind { Naive, Scheffe, Posi, Posi1, PosiAllSubsets, OptimalNested };

inline const char* to_string(KKind k) {
  switch (k) {
    case KKind::Naive: return "naive";
    case KKind::Scheffe: return "scheffe";
    case KKind::Posi: return "posi";
    case KKind::Posi1: return "posi1";
    case KKind::PosiAllSubsets: return "posi_all";
    case KKind::OptimalNested: return "kstar";
  }
  return "unknown";
}

inline KKind parse_kkind(const std::string& s) {
  if (s == "naive" || s == "N") return KKind::Naive;
  if (s == "scheffe" || s == "S") return KKind::Scheffe;
  if (s == "posi" || s == "P") return KKind::Posi;
  if (s == "posi1" || s == "P1") return KKind::Posi1;
  if (s == "posi_all" || s == "posi-all" || s == "posi'" || s == "P'") return KKind::PosiAllSubsets;
  if (s == "kstar" || s == "optimal" || s == "*") return KKind::OptimalNested;
  throw Error(ErrorCode::parse, "unknown constant kind '" + s + "'");
}

struct KConstant {
  KKind kind = KKind::Naive;
  double value = 0.0;
  double alpha = 0.05;
  Dof r;
  double mc_se = 0.0;
};

namespace detail {

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorCode::domain, "alpha must lie in (0, 1)");
}

}  // namespace detail

inline KConstant k_naive(double alpha, Dof r) {
  detail::check_alpha(alpha);
  const double v = r.is_known() ? dist::normal_quantile(1.0 - alpha / 2.0) : dist::t_quantile(1.0 - alpha / 2.0, r.as_double());
  return {KKind::Naive, v, alpha, r, 0.0};
}

inline KConstant k_scheffe(double alpha, int s, Dof r) {
  detail::check_alpha(alpha);
  if (s < 1) throw Error(ErrorCode::domain, "Scheffe rank s must be >= 1");
  const double v = r.is_known() ? std::sqrt(dist::chi2_quantile(1.0 - alpha, s))
                                : std::sqrt(s * dist::f_quantile(1.0 - alpha, s, r.as_double()));
  return {KKind::Scheffe, v, alpha, r, 0.0};
}

// --- coordinate families -----------------------------------------------------------

// Unit directions (in z-coordinates of the column space) of the statistics
// beta-hat_{j.M}; one column per (j, M) pair.
class CoordinateFamily {
 public:
  static constexpr std::size_t kDefaultBudget = std::size_t{1} << 20;

  CoordinateFamily() = default;
  explicit CoordinateFamily(Matrix directions, bool deduplicate = true) : dirs_(std::move(directions)) {
    if (dirs_.cols() == 0) throw Error(ErrorCode::domain, "coordinate family is empty");
    for (Eigen::Index k = 0; k < dirs_.cols(); ++k) {
      const double norm = dirs_.col(k).norm();
      if (!(norm > 0.0)) throw Error(ErrorCode::domain, "coordinate family contains a zero direction");
      dirs_.col(k) /= norm;
    }
    if (deduplicate) dedup();
  }

  // (j, M) for every j in M and M in `universe`, or only j = protected when
  // `protected_only`.
  static CoordinateFamily from_universe(const Design& design, std::span<const ModelId> universe, bool protected_only,
                                        std::size_t budget = kDefaultBudget) {
    if (universe.empty()) throw Error(ErrorCode::domain, "universe is empty");
    std::size_t count = 0;
    for (const auto& m : universe) count += protected_only ? 1 : static_cast<std::size_t>(m.size());
    check_budget(count, budget);
    const int prot = design.protected_index();
    Matrix dirs(design.p(), static_cast<Eigen::Index>(count));
    Eigen::Index k = 0;
    for (const auto& m : universe) {
      design.check_model(m);
      const ModelGeometry g = ModelGeometry::build(design, m);
      if (protected_only) {
        if (!m.contains(prot)) throw Error(ErrorCode::domain, "model " + m.str() + " lacks the protected column");
        dirs.col(k++) = g.direction(prot);
      } else {
        for (int j : m.members()) dirs.col(k++) = g.direction(j);
      }
    }
    return CoordinateFamily(std::move(dirs));
  }

  // (j, M) over every nonempty full-rank subset M of the columns.
  static CoordinateFamily all_subsets(const Design& design, std::size_t budget = kDefaultBudget) {
    const int p = static_cast<int>(design.p());
    if (p >= 40) throw Error(ErrorCode::budget, "all-subsets family over p=" + std::to_string(p) + " columns exceeds the budget");
    const std::size_t count = static_cast<std::size_t>(p) << (p - 1);
    check_budget(count, budget);
    Matrix dirs(p, static_cast<Eigen::Index>(count));
    Eigen::Index k = 0;
    for (std::uint64_t mask = 1; mask < (std::uint64_t{1} << p); ++mask) {
      const ModelId m = ModelId::from_mask(mask);
      if (m.size() > design.n()) continue;
      try {
        const ModelGeometry g = ModelGeometry::build(design, m);
        for (int j : m.members()) dirs.col(k++) = g.direction(j);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::rank) throw;
      }
    }
    return CoordinateFamily(dirs.leftCols(k));
  }

  Eigen::Index dimension() const { return dirs_.rows(); }
  Eigen::Index size() const { return dirs_.cols(); }
  const Matrix& directions() const { return dirs_; }

 private:
  static void check_budget(std::size_t count, std::size_t budget) {
    if (count > budget) {
      throw Error(ErrorCode::budget, "coordinate family has " + std::to_string(count) + " directions, above the budget of " +
                                         std::to_string(budget));
    }
  }

  // Merge directions that agree up to sign within 1e-12.
  void dedup() {
    std::vector<Vector> v;
    v.reserve(dirs_.cols());
    for (Eigen::Index k = 0; k < dirs_.cols(); ++k) {
      Vector d = dirs_.col(k);
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (std::abs(d[i]) > 1e-12) {
          if (d[i] < 0.0) d = -d;
          break;
        }
      }
      v.push_back(std::move(d));
    }
    std::sort(v.begin(), v.end(), [](const Vector& a, const Vector& b) {
      return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
    });
    std::vector<Vector> kept;
    for (auto& d : v) {
      bool dup = false;
      for (auto it = kept.rbegin(); it != kept.rend(); ++it) {
        if (((*it) - d).cwiseAbs().maxCoeff() <= 1e-12) {
          dup = true;
          break;
        }
        // Sorted order: once the leading coordinate differs by more than the
        // tolerance, no earlier vector can match.
        if (d[0] - (*it)[0] > 1e-12) break;
      }
      if (!dup) kept.push_back(std::move(d));
    }
    dirs_.resize(dirs_.rows(), static_cast<Eigen::Index>(kept.size()));
    for (std::size_t k = 0; k < kept.size(); ++k) dirs_.col(static_cast<Eigen::Index>(k)) = kept[k];
  }

  Matrix dirs_;
};

struct PosiOptions {
  std::size_t draws = 200000;
  std::uint64_t seed = 1;
  int threads = 0;
  std::size_t budget = CoordinateFamily::kDefaultBudget;
};

// Draws of max_k |d_k' g| / sqrt(chi2_r / r) with g standard normal in the
// column space. Draw i depends only on (seed, i / kBlock), never on threads.
inline std::vector<double> max_t_sample(const CoordinateFamily& family, Dof r, std::size_t draws, std::uint64_t seed,
                                        int threads = 0) {
  constexpr std::size_t kBlock = 1024;
  constexpr Eigen::Index kChunk = 4096;
  const Eigen::Index s = family.dimension();
  const Matrix& dirs = family.directions();
  std::vector<double> out(draws);
  const std::size_t blocks = (draws + kBlock - 1) / kBlock;
  parallel_for(blocks, threads, [&](std::size_t b) {
    const std::size_t begin = b * kBlock;
    const std::size_t count = std::min(kBlock, draws - begin);
    Draws rng(substream(seed, {0x6d617874ULL, b}));
    Matrix g(s, static_cast<Eigen::Index>(count));
    Vector ratio(static_cast<Eigen::Index>(count));
    for (std::size_t i = 0; i < count; ++i) {
      rng.fill_normal(g.col(static_cast<Eigen::Index>(i)));
      ratio[static_cast<Eigen::Index>(i)] = rng.sigma_ratio(r);
    }
    Vector best = Vector::Zero(static_cast<Eigen::Index>(count));
    for (Eigen::Index c0 = 0; c0 < dirs.cols(); c0 += kChunk) {
      const Eigen::Index w = std::min(kChunk, dirs.cols() - c0);
      const Matrix proj = dirs.middleCols(c0, w).transpose() * g;
      best = best.cwiseMax(proj.cwiseAbs().colwise().maxCoeff().transpose());
    }
    for (std::size_t i = 0; i < count; ++i) out[begin + i] = best[static_cast<Eigen::Index>(i)] / ratio[static_cast<Eigen::Index>(i)];
  });
  return out;
}

// Empirical (1 - alpha)-quantile as the ceil((1-alpha) N)-th order statistic,
// with a standard error from the order statistics one binomial SD either side.
inline KConstant k_from_sample(std::vector<double> sample, KKind kind, double alpha, Dof r) {
  detail::check_alpha(alpha);
  const std::size_t n = sample.size();
  if (n == 0) throw Error(ErrorCode::domain, "empty max-|t| sample");
  std::sort(sample.begin(), sample.end());
  const double q = 1.0 - alpha;
  const double pos = q * double(n);
  const double nearest = std::round(pos);
  std::size_t k = static_cast<std::size_t>(std::abs(pos - nearest) < 1e-9 * double(n) ? nearest : std::ceil(pos));
  k = std::clamp<std::size_t>(k, 1, n);
  const auto d = static_cast<std::size_t>(std::ceil(std::sqrt(double(n) * q * alpha)));
  const std::size_t lo = k > d ? k - d : 1;
  const std::size_t hi = std::min(n, k + d);
  KConstant out{kind, sample[k - 1], alpha, r, 0.5 * (sample[hi - 1] - sample[lo - 1])};
  return out;
}

inline CoordinateFamily posi_family(const Design& design, std::span<const ModelId> universe, KKind kind,
                                    std::size_t budget = CoordinateFamily::kDefaultBudget) {
  switch (kind) {
    case KKind::Posi: return CoordinateFamily::from_universe(design, universe, false, budget);
    case KKind::Posi1: return CoordinateFamily::from_universe(design, universe, true, budget);
    case KKind::PosiAllSubsets: return CoordinateFamily::all_subsets(design, budget);
    default: throw Error(ErrorCode::usage, std::string("k_posi does not compute kind ") + to_string(kind));
  }
}

// Exact P(max_k |d_k' g| <= K t) for a family in a two-dimensional column
// space. In polar coordinates the event is |g| <= K t / h(theta) with
// h(theta) = max_k |d_k' u(theta)|, so the probability is an angular average
// of the chi-square(2) CDF; h is smooth between the angles where two
// directions tie, and each such piece is integrated by Gauss-Legendre.
inline double planar_simultaneous_coverage(const CoordinateFamily& family, double k, Dof r) {
  if (family.dimension() != 2) throw Error(ErrorCode::usage, "planar coverage needs a two-dimensional column space");
  if (!(k > 0.0)) return 0.0;
  const Matrix& d = family.directions();
  std::vector<double> cuts{0.0, std::numbers::pi};
  auto add_normal_angle = [&](double x, double y) {
    if (std::hypot(x, y) < 1e-14) return;
    double angle = std::atan2(x, -y);  // direction orthogonal to (x, y)
    angle = std::fmod(angle + 2.0 * std::numbers::pi, std::numbers::pi);
    cuts.push_back(angle);
  };
  for (Eigen::Index a = 0; a < d.cols(); ++a) {
    add_normal_angle(d(0, a), d(1, a));  // |d_a' u| vanishes here
    for (Eigen::Index b = a + 1; b < d.cols(); ++b) {
      add_normal_angle(d(0, a) - d(0, b), d(1, a) - d(1, b));
      add_normal_angle(d(0, a) + d(0, b), d(1, a) + d(1, b));
    }
  }
  std::sort(cuts.begin(), cuts.end());
  const GaussLegendre& gl = GaussLegendre::get(48);
  auto miss = [&](double theta) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    double h = 0.0;
    for (Eigen::Index a = 0; a < d.cols(); ++a) h = std::max(h, std::abs(d(0, a) * c + d(1, a) * s));
    const double radius2 = (k / h) * (k / h);
    return r.is_known() ? std::exp(-0.5 * radius2) : std::pow(1.0 + radius2 / r.as_double(), -0.5 * r.as_double());
  };
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    if (cuts[i + 1] - cuts[i] > 0.0) total += gl.integrate(miss, cuts[i], cuts[i + 1]);
  }
  return 1.0 - total / std::numbers::pi;
}

// Root of planar_simultaneous_coverage(K) = 1 - alpha.
inline KConstant k_posi_planar(const CoordinateFamily& family, KKind kind, double alpha, Dof r) {
  detail::check_alpha(alpha);
  double lo = 0.0;
  double hi = 1.0;
  while (planar_simultaneous_coverage(family, hi, r) < 1.0 - alpha) {
    hi *= 2.0;
    if (hi > 1e6) throw Error(ErrorCode::convergence, "planar PoSI constant could not be bracketed");
  }
  while (hi - lo > 1e-12 * hi) {
    const double mid = 0.5 * (lo + hi);
    (planar_simultaneous_coverage(family, mid, r) >= 1.0 - alpha ? hi : lo) = mid;
  }
  return {kind, hi, alpha, r, 0.0};
}

// K_P, K_P1 (universe given) or K_P' (universe ignored: all nonempty subsets).
inline KConstant k_posi(const Design& design, std::span<const ModelId> universe, KKind kind, double alpha, Dof r,
                        const PosiOptions& opts = {}) {
  detail::check_alpha(alpha);
  if (opts.draws == 0) throw Error(ErrorCode::domain, "k_posi needs at least one draw");
  design.require_full_rank();
  const CoordinateFamily family = posi_family(design, universe, kind, opts.budget);
  return k_from_sample(max_t_sample(family, r, opts.draws, opts.seed, opts.threads), kind, alpha, r);
}

}  // namespace posi
