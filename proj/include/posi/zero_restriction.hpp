#pragma once

// Two-model universe {M0, M1}, M1 containing the protected column and M0 not.
// The interval is the naive one from M1 when M1 is chosen and the single
// point {0} when M0 is chosen; the target is beta_{1.M1} or 0 respectively.

#include "posi/constants.hpp"
#include "posi/core.hpp"
#include "posi/design.hpp"
#include "posi/mc_search.hpp"
#include "posi/parallel.hpp"
#include "posi/random.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace posi {

struct ZeroRestrictedInterval {
  enum class Kind { Standard, PointZero };
  Kind kind = Kind::PointZero;
  double center = 0.0;
  double halfwidth = 0.0;

  static ZeroRestrictedInterval standard(double center, double halfwidth) {
    if (!(halfwidth > 0.0)) throw Error(ErrorCode::domain, "interval halfwidth must be positive");
    return {Kind::Standard, center, halfwidth};
  }
  static ZeroRestrictedInterval point_zero() { return {}; }

  bool contains(double v) const { return kind == Kind::PointZero ? v == 0.0 : std::abs(v - center) <= halfwidth; }
};

struct TwoModelUniverse {
  ModelId m0;
  ModelId m1;

  void validate(const Design& design) const {
    const int prot = design.protected_index();
    if (!m1.contains(prot)) throw Error(ErrorCode::domain, "M1 must contain the protected column");
    if (m0.contains(prot)) throw Error(ErrorCode::domain, "M0 must not contain the protected column");
    design.check_model(m0);
    design.check_model(m1);
  }

  // M1 = full model, M0 = full model without the protected column.
  static TwoModelUniverse nested_default(const Design& design) {
    if (design.p() < 2) throw Error(ErrorCode::domain, "the two-model universe needs p >= 2");
    const ModelId full = design.full_model();
    return {full.without(design.protected_index()), full};
  }
};

inline ZeroRestrictedInterval zero_restriction_interval(const SubmodelFit& fit1, const ModelId& selected, const TwoModelUniverse& u,
                                                        const KConstant& k_n, int protected_index) {
  if (selected == u.m0) return ZeroRestrictedInterval::point_zero();
  if (!(selected == u.m1)) throw Error(ErrorCode::selector, "selected model " + selected.str() + " is outside {M0, M1}");
  if (!(fit1.model == u.m1)) throw Error(ErrorCode::usage, "fit must be of M1");
  return ZeroRestrictedInterval::standard(fit1.coefficient(protected_index), k_n.value * fit1.sigma_of(protected_index));
}

// Two-model rule: picks M1 when true.
using TwoModelRule = std::function<bool(const Observation&)>;

// Adapts a rule returning a ModelId; anything other than M0 or M1 is an error.
inline TwoModelRule two_model_rule(const TwoModelUniverse& u, std::function<ModelId(const Observation&)> pick) {
  return [u, pick = std::move(pick)](const Observation& obs) {
    const ModelId m = pick(obs);
    if (m == u.m1) return true;
    if (m == u.m0) return false;
    throw Error(ErrorCode::selector, "selector returned " + m.str() + ", outside {" + u.m0.str() + ", " + u.m1.str() + "}");
  };
}

// M1 iff v'y > threshold.
struct ThresholdRule {
  Vector v;
  double threshold = 0.0;
  bool operator()(const Observation& obs) const { return v.dot(obs.y) > threshold; }
};

// Random rules for the validity sweep: v uniform on the unit sphere of R^n,
// threshold standard normal scaled by `threshold_scale`.
inline std::vector<ThresholdRule> random_threshold_rules(Eigen::Index n, std::size_t count, std::uint64_t seed,
                                                         double threshold_scale = 1.0) {
  std::vector<ThresholdRule> out;
  for (std::size_t i = 0; i < count; ++i) {
    Draws d(substream(seed, {0x72756c65ULL, i}));
    ThresholdRule rule;
    rule.v.resize(n);
    d.fill_normal(rule.v);
    rule.v /= rule.v.norm();
    rule.threshold = threshold_scale * d.normal();
    out.push_back(std::move(rule));
  }
  return out;
}

// Per-replication events, exposed for the decomposition identity.
struct ZeroRestrictionEvents {
  bool selected_m1 = false;
  bool m1_interval_covers = false;  // beta_{1.M1} inside the M1 interval
  bool covered = false;             // b_{M-hat} inside I_{M-hat}
};

class ZeroRestrictionEngine {
 public:
  ZeroRestrictionEngine(Design design, TwoModelUniverse universe, KConstant k_n)
      : design_(std::move(design)), universe_(universe), k_(k_n) {
    universe_.validate(design_);
    const Design& d = design_;
    if (!k_.r.is_known() && k_.r.value() != d.n() - d.p()) {
      throw Error(ErrorCode::usage, "unknown-variance mode needs r = n - p = " + std::to_string(d.n() - d.p()));
    }
    const std::vector<ModelId> models{universe_.m1};
    cache_ = ModelCache(design_, models);
  }

  const Design& design() const { return design_; }
  const TwoModelUniverse& universe() const { return universe_; }

  ZeroRestrictionEvents replicate(const Vector& mu, const Vector& z_mu, double sigma, const TwoModelRule& rule, Draws& rng) const {
    const Design& d = design_;
    Vector u(d.n());
    rng.fill_normal(u);
    Observation obs = Observation::make(d, mu + sigma * u, sigma);
    if (!k_.r.is_known()) obs.sigma_hat = std::sqrt(obs.rss_full / double(d.n() - d.p()));
    const int prot = d.protected_index();
    const ModelGeometry& g = cache_[universe_.m1];
    const int pos = universe_.m1.position(prot);
    const double estimate = g.coef_map.row(pos).dot(obs.z);
    const double halfwidth = k_.value * obs.sigma_hat * g.unit_se[pos];
    const double target_m1 = g.coef_map.row(pos).dot(z_mu);

    ZeroRestrictionEvents ev;
    ev.selected_m1 = rule(obs);
    ev.m1_interval_covers = ZeroRestrictedInterval::standard(estimate, halfwidth).contains(target_m1);
    const ZeroRestrictedInterval interval =
        ev.selected_m1 ? ZeroRestrictedInterval::standard(estimate, halfwidth) : ZeroRestrictedInterval::point_zero();
    ev.covered = interval.contains(ev.selected_m1 ? target_m1 : 0.0);
    return ev;
  }

  CoverageEstimate estimate(const Vector& beta, double sigma, const TwoModelRule& rule, std::size_t reps, std::uint64_t seed,
                            int threads = 1) const {
    const Design& d = design_;
    if (beta.size() != d.p()) throw Error(ErrorCode::domain, "beta has the wrong length");
    if (!(sigma > 0.0)) throw Error(ErrorCode::domain, "sigma must be positive");
    const Vector mu = d.x() * beta;
    const Vector z_mu = d.r_factor() * beta;
    constexpr std::size_t kBlock = 256;
    const std::size_t blocks = (reps + kBlock - 1) / kBlock;
    std::vector<std::size_t> partial(blocks, 0);
    parallel_for(blocks, threads, [&](std::size_t b) {
      const std::size_t end = std::min(reps, (b + 1) * kBlock);
      for (std::size_t i = b * kBlock; i < end; ++i) {
        Draws rng(substream(seed, {i}));
        if (replicate(mu, z_mu, sigma, rule, rng).covered) ++partial[b];
      }
    });
    std::size_t covered = 0;
    for (auto c : partial) covered += c;
    return CoverageEstimate::from_counts(covered, reps, beta, CoverageTarget::SelectedModel);
  }

 private:
  Design design_;
  TwoModelUniverse universe_;
  KConstant k_;
  ModelCache cache_;
};

// Coverage of b_{M-hat} by I_{M-hat} under an arbitrary two-model rule, with
// the naive constant K_N(alpha, r).
inline CoverageEstimate validate_zero_restriction(const Design& design, const TwoModelUniverse& universe, const TwoModelRule& rule,
                                                  double alpha, Dof r, const Vector& beta, double sigma, std::size_t replications,
                                                  std::uint64_t seed, int threads = 1) {
  const ZeroRestrictionEngine engine(design, universe, k_naive(alpha, r));
  return engine.estimate(beta, sigma, rule, replications, seed, threads);
}

}  // namespace posi
