#pragma once

// Monte Carlo coverage of post-selection intervals and the staged stochastic
// search for parameters with low coverage.

#include "posi/constants.hpp"
#include "posi/core.hpp"
#include "posi/design.hpp"
#include "posi/parallel.hpp"
#include "posi/random.hpp"
#include "posi/selectors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace posi {

enum class CoverageTarget { SelectedModel, FullParameter };

inline const char* to_string(CoverageTarget t) { return t == CoverageTarget::SelectedModel ? "selected" : "full"; }

inline CoverageTarget parse_target(const std::string& s) {
  if (s == "selected" || s == "selected-model" || s == "beta_M") return CoverageTarget::SelectedModel;
  if (s == "full" || s == "full-parameter" || s == "beta") return CoverageTarget::FullParameter;
  throw Error(ErrorCode::parse, "unknown coverage target '" + s + "'");
}

struct CoverageEstimate {
  double rate = 0.0;
  std::size_t replications = 0;
  std::size_t covered = 0;
  double se = 0.0;
  Vector beta;
  CoverageTarget target = CoverageTarget::SelectedModel;

  static CoverageEstimate from_counts(std::size_t covered, std::size_t reps, Vector beta, CoverageTarget target) {
    CoverageEstimate e;
    e.covered = covered;
    e.replications = reps;
    e.rate = reps == 0 ? 0.0 : double(covered) / double(reps);
    e.se = reps == 0 ? 0.0 : std::sqrt(e.rate * (1.0 - e.rate) / double(reps));
    e.beta = std::move(beta);
    e.target = target;
    return e;
  }
};

// One interval to assess: constant K and what it should cover.
struct Criterion {
  KConstant k;
  CoverageTarget target = CoverageTarget::SelectedModel;
};

struct Stage {
  std::size_t candidates = 0;
  std::size_t replications = 0;
};

struct SearchPlan {
  std::vector<Stage> stages{{10000, 100}, {1000, 1000}, {1, 500000}};
  std::uint64_t seed = 1;
  double sigma = 1.0;

  void validate() const {
    if (stages.empty()) throw Error(ErrorCode::usage, "search plan has no stages");
    if (!(sigma > 0.0)) throw Error(ErrorCode::domain, "search sigma must be positive");
    for (std::size_t s = 0; s < stages.size(); ++s) {
      if (stages[s].candidates == 0 || stages[s].replications == 0) {
        throw Error(ErrorCode::domain, "search stage " + std::to_string(s + 1) + " needs positive counts");
      }
      if (s > 0 && !(stages[s].candidates < stages[s - 1].candidates)) {
        throw Error(ErrorCode::domain, "search plan candidate counts must strictly decrease");
      }
      if (s > 0 && !(stages[s].replications > stages[s - 1].replications)) {
        throw Error(ErrorCode::domain, "search plan replication counts must strictly increase");
      }
    }
  }

  // "10000x100,1000x1000,1x500000"
  static std::vector<Stage> parse_stages(const std::string& text) {
    std::vector<Stage> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto x = item.find('x');
      if (x == std::string::npos) throw Error(ErrorCode::parse, "invalid stage '" + item + "' (expected CANDIDATESxREPS)");
      try {
        out.push_back({std::stoull(item.substr(0, x)), std::stoull(item.substr(x + 1))});
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::parse, "invalid stage '" + item + "'");
      }
    }
    if (out.empty()) throw Error(ErrorCode::parse, "empty stage plan");
    return out;
  }

  static std::string format_stages(const std::vector<Stage>& stages) {
    std::string s;
    for (const auto& st : stages) {
      if (!s.empty()) s += ",";
      s += std::to_string(st.candidates) + "x" + std::to_string(st.replications);
    }
    return s;
  }

  // `count` stages from (first_candidates, first_reps) to (1, final_reps),
  // geometric in between.
  static std::vector<Stage> geometric(std::size_t count, std::size_t first_candidates, std::size_t first_reps,
                                      std::size_t final_reps) {
    if (count < 1) throw Error(ErrorCode::domain, "geometric plan needs at least one stage");
    if (count == 1) return {{first_candidates, final_reps}};
    std::vector<Stage> out;
    for (std::size_t s = 0; s < count; ++s) {
      const double f = double(s) / double(count - 1);
      const auto c = static_cast<std::size_t>(std::llround(std::pow(double(first_candidates), 1.0 - f)));
      const auto r = static_cast<std::size_t>(std::llround(double(first_reps) * std::pow(double(final_reps) / first_reps, f)));
      out.push_back({std::max<std::size_t>(c, 1), r});
    }
    return out;
  }
};

// beta with X beta = Q g, g standard Gaussian in the column space.
// Candidate i depends only on (seed, i).
inline std::vector<Vector> draw_beta_candidates(const Design& design, std::size_t count, std::uint64_t seed) {
  const Matrix& r = design.r_factor();
  std::vector<Vector> out;
  out.reserve(count);
  Vector g(design.p());
  for (std::size_t i = 0; i < count; ++i) {
    Draws d(substream(seed, {0x62657461ULL, i}));
    d.fill_normal(g);
    out.push_back(r.triangularView<Eigen::Upper>().solve(g));
  }
  return out;
}

// Replication engine for one selector. sigma-hat comes from the full-model
// residuals (finite r, which must equal n - p) or equals sigma (known variance).
class CoverageEngine {
 public:
  CoverageEngine(const Selector& selector, Dof r) : selector_(&selector), r_(r) {
    const Design& d = selector.design();
    if (!r.is_known() && r.value() != d.n() - d.p()) {
      throw Error(ErrorCode::usage, "unknown-variance mode needs r = n - p = " + std::to_string(d.n() - d.p()) + ", got r = " +
                                        r.str());
    }
  }

  const Selector& selector() const { return *selector_; }
  Dof dof() const { return r_; }

  // Number of covered replications per criterion. Replication i uses the
  // substream (seed, i) whatever the thread count.
  std::vector<std::size_t> covered_counts(const Vector& beta, double sigma, std::span<const Criterion> criteria,
                                          std::size_t reps, std::uint64_t seed, int threads = 1) const {
    const Design& d = selector_->design();
    if (beta.size() != d.p()) throw Error(ErrorCode::domain, "beta has the wrong length");
    if (!(sigma > 0.0)) throw Error(ErrorCode::domain, "sigma must be positive");
    for (const auto& c : criteria) {
      if (!(c.k.r == r_)) throw Error(ErrorCode::usage, "criterion constant has a different variance mode than the engine");
    }
    const Vector mu = d.x() * beta;
    const Vector z_mu = d.r_factor() * beta;
    const int prot = d.protected_index();
    const double df = double(d.n() - d.p());
    constexpr std::size_t kBlock = 256;
    const std::size_t blocks = (reps + kBlock - 1) / kBlock;
    std::vector<std::vector<std::size_t>> partial(blocks, std::vector<std::size_t>(criteria.size(), 0));
    parallel_for(blocks, threads, [&](std::size_t b) {
      Vector u(d.n());
      const std::size_t end = std::min(reps, (b + 1) * kBlock);
      for (std::size_t i = b * kBlock; i < end; ++i) {
        try {
          Draws rng(substream(seed, {i}));
          rng.fill_normal(u);
          Vector y = mu + sigma * u;
          Observation obs = Observation::make(d, std::move(y), sigma);
          if (!r_.is_known()) obs.sigma_hat = std::sqrt(obs.rss_full / df);
          const ModelId m = (*selector_)(obs, rng.bits());
          const ModelGeometry& g = selector_->cache()[m];
          const int pos = m.position(prot);
          if (pos < 0) throw Error(ErrorCode::selector, "selected model " + m.str() + " lacks the protected column");
          const auto row = g.coef_map.row(pos);
          const double estimate = row.dot(obs.z);
          const double se = obs.sigma_hat * g.unit_se[pos];
          double selected_target = 0.0;
          bool have_selected = false;
          for (std::size_t c = 0; c < criteria.size(); ++c) {
            double target;
            if (criteria[c].target == CoverageTarget::FullParameter) {
              target = beta[prot];
            } else {
              if (!have_selected) {
                selected_target = row.dot(z_mu);
                have_selected = true;
              }
              target = selected_target;
            }
            if (std::abs(estimate - target) <= criteria[c].k.value * se) ++partial[b][c];
          }
        } catch (const Error& e) {
          throw Error(e.code(), std::string(e.what()) + " (replication " + std::to_string(i) + ")");
        }
      }
    });
    std::vector<std::size_t> total(criteria.size(), 0);
    for (const auto& p : partial)
      for (std::size_t c = 0; c < p.size(); ++c) total[c] += p[c];
    return total;
  }

  std::vector<CoverageEstimate> estimate(const Vector& beta, double sigma, std::span<const Criterion> criteria, std::size_t reps,
                                         std::uint64_t seed, int threads = 1) const {
    const auto counts = covered_counts(beta, sigma, criteria, reps, seed, threads);
    std::vector<CoverageEstimate> out;
    for (std::size_t c = 0; c < criteria.size(); ++c) out.push_back(CoverageEstimate::from_counts(counts[c], reps, beta, criteria[c].target));
    return out;
  }

 private:
  const Selector* selector_;
  Dof r_;
};

inline CoverageEstimate estimate_coverage(const Selector& selector, const KConstant& k, const Vector& beta, double sigma,
                                          CoverageTarget target, std::size_t replications, std::uint64_t seed, int threads = 1) {
  const CoverageEngine engine(selector, k.r);
  const Criterion c{k, target};
  return engine.estimate(beta, sigma, std::span<const Criterion>(&c, 1), replications, seed, threads).front();
}

inline CoverageEstimate estimate_coverage(const Design& design, const SelectorSpec& spec, const KConstant& k, const Vector& beta,
                                          double sigma, CoverageTarget target, std::size_t replications, std::uint64_t seed,
                                          int threads = 1) {
  const Selector selector(design, spec);
  return estimate_coverage(selector, k, beta, sigma, target, replications, seed, threads);
}

struct SearchResult {
  Criterion criterion;
  std::size_t candidate = 0;  // index into draw_beta_candidates(design, stage-1 count, seed)
  CoverageEstimate estimate;
  std::vector<double> stage_minima;  // lowest rate seen at each stage
};

namespace detail {

inline std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage, std::size_t candidate) {
  return substream(seed, {0x7374616765ULL, stage, candidate})();
}

inline std::uint64_t double_bits(double v) { return std::bit_cast<std::uint64_t>(v); }

inline std::string search_signature(const Selector& selector, std::span<const Criterion> criteria, const SearchPlan& plan) {
  std::ostringstream s;
  s << selector.name() << "|" << SearchPlan::format_stages(plan.stages) << "|" << plan.seed << "|" << double_bits(plan.sigma) << "|"
    << selector.design().n() << "x" << selector.design().p();
  std::uint64_t h = 0;
  const Matrix& x = selector.design().x();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    std::uint64_t v = double_bits(x.data()[i]) ^ h;
    h = splitmix64(v);
  }
  s << "|" << h;
  for (const auto& c : criteria) s << "|" << to_string(c.k.kind) << ":" << double_bits(c.k.value) << ":" << to_string(c.target);
  return s.str();
}

inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write '" + tmp + "'");
    out << content;
    if (!out) throw Error(ErrorCode::io, "write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

}  // namespace detail

// Staged search run jointly for several criteria: stage 1 evaluates every
// candidate once for all criteria; later stages re-estimate, per criterion,
// the lowest-rate survivors at higher replication counts. Cover events at
// (stage, candidate, replication) are shared, so the result for a criterion
// is the same whether it is searched alone or with others.
inline std::vector<SearchResult> staged_min_search(const Selector& selector, std::span<const Criterion> criteria,
                                                   const SearchPlan& plan, int threads = 0,
                                                   const std::string& checkpoint_path = {}) {
  plan.validate();
  if (criteria.empty()) throw Error(ErrorCode::usage, "staged search needs at least one criterion");
  const Dof r = criteria.front().k.r;
  const CoverageEngine engine(selector, r);
  const std::size_t nc = criteria.size();
  const auto candidates = draw_beta_candidates(selector.design(), plan.stages.front().candidates, plan.seed);
  const std::string signature = detail::search_signature(selector, criteria, plan);

  using nlohmann::json;
  json checkpoint = {{"signature", signature}, {"stages", json::array()}};
  if (!checkpoint_path.empty() && std::filesystem::exists(checkpoint_path)) {
    std::ifstream in(checkpoint_path);
    json loaded;
    try {
      in >> loaded;
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, "unreadable checkpoint '" + checkpoint_path + "': " + e.what());
    }
    if (loaded.value("signature", std::string{}) == signature) checkpoint = std::move(loaded);
  }

  std::vector<std::vector<std::size_t>> survivors(nc);
  for (auto& s : survivors) {
    s.resize(candidates.size());
    std::iota(s.begin(), s.end(), std::size_t{0});
  }
  std::vector<SearchResult> results(nc);
  for (std::size_t c = 0; c < nc; ++c) results[c].criterion = criteria[c];

  for (std::size_t s = 0; s < plan.stages.size(); ++s) {
    const std::size_t reps = plan.stages[s].replications;
    std::vector<std::size_t> pool;
    for (const auto& v : survivors) pool.insert(pool.end(), v.begin(), v.end());
    std::sort(pool.begin(), pool.end());
    pool.erase(std::unique(pool.begin(), pool.end()), pool.end());

    // counts[i][c]: covered replications of candidate pool[i] for criterion c.
    std::vector<std::vector<std::size_t>> counts(pool.size());
    const bool resumed = s < checkpoint["stages"].size();
    if (resumed) {
      const json& st = checkpoint["stages"][s];
      if (st["pool"].get<std::vector<std::size_t>>() != pool) throw Error(ErrorCode::parse, "checkpoint does not match the search state");
      counts = st["counts"].get<std::vector<std::vector<std::size_t>>>();
    } else {
      const bool across_candidates = pool.size() > 1;
      parallel_for(pool.size(), across_candidates ? threads : 1, [&](std::size_t i) {
        counts[i] = engine.covered_counts(candidates[pool[i]], plan.sigma, criteria, reps, detail::stage_seed(plan.seed, s, pool[i]),
                                          across_candidates ? 1 : threads);
      });
      if (!checkpoint_path.empty()) {
        checkpoint["stages"].push_back({{"stage", s}, {"replications", reps}, {"pool", pool}, {"counts", counts}});
        detail::write_file_atomic(checkpoint_path, checkpoint.dump(1));
      }
    }

    const std::size_t keep = s + 1 < plan.stages.size() ? plan.stages[s + 1].candidates : 1;
    for (std::size_t c = 0; c < nc; ++c) {
      std::vector<std::pair<std::size_t, std::size_t>> ranked;  // (covered, candidate)
      for (std::size_t id : survivors[c]) {
        const auto it = std::lower_bound(pool.begin(), pool.end(), id);
        ranked.emplace_back(counts[static_cast<std::size_t>(it - pool.begin())][c], id);
      }
      std::sort(ranked.begin(), ranked.end());
      results[c].stage_minima.push_back(double(ranked.front().first) / double(reps));
      survivors[c].clear();
      for (std::size_t i = 0; i < std::min(keep, ranked.size()); ++i) survivors[c].push_back(ranked[i].second);
      if (s + 1 == plan.stages.size()) {
        results[c].candidate = ranked.front().second;
        results[c].estimate =
            CoverageEstimate::from_counts(ranked.front().first, reps, candidates[ranked.front().second], criteria[c].target);
      }
    }
  }
  return results;
}

inline SearchResult staged_min_search(const Selector& selector, const KConstant& k, CoverageTarget target, const SearchPlan& plan,
                                      int threads = 0, const std::string& checkpoint_path = {}) {
  const Criterion c{k, target};
  return staged_min_search(selector, std::span<const Criterion>(&c, 1), plan, threads, checkpoint_path).front();
}

}  // namespace posi
