#pragma once

// Subcommand runners: build designs and selectors from a RunConfig, compute,
// and render CSV with '#'-prefixed config header lines.

#include "posi/config.hpp"
#include "posi/constants.hpp"
#include "posi/core.hpp"
#include "posi/design.hpp"
#include "posi/exact_nested.hpp"
#include "posi/mc_search.hpp"
#include "posi/parallel.hpp"
#include "posi/selectors.hpp"
#include "posi/zero_restriction.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace posi {

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    if (row.size() != columns.size()) throw Error(ErrorCode::usage, "CSV row width does not match the header");
    rows.push_back(std::move(row));
  }
};

inline std::string fmt(double v) { return format_number(v); }

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

// "FROM:TO:COUNT" -> COUNT evenly spaced values (inclusive).
inline std::vector<double> parse_grid(const std::string& text) {
  const auto parts = split_list(text, ':');
  if (parts.size() != 3) throw Error(ErrorCode::parse, "grid '" + text + "' must be FROM:TO:COUNT");
  const double from = detail::parse_double("grid", parts[0]);
  const double to = detail::parse_double("grid", parts[1]);
  const long count = detail::parse_integer<long>("grid", parts[2]);
  if (count < 1) throw Error(ErrorCode::parse, "grid '" + text + "' needs a positive count");
  std::vector<double> out;
  for (long i = 0; i < count; ++i) out.push_back(count == 1 ? from : from + (to - from) * double(i) / double(count - 1));
  return out;
}

inline Matrix parse_gram_literal(const std::string& text) {
  const auto rows = split_list(text, ';');
  if (rows.empty()) throw Error(ErrorCode::parse, "empty gram literal");
  Matrix g(rows.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto cells = split_list(rows[i], ',');
    if (cells.size() != rows.size()) throw Error(ErrorCode::parse, "gram literal must be square");
    for (std::size_t j = 0; j < cells.size(); ++j) g(i, j) = detail::parse_double("gram", cells[j]);
  }
  return g;
}

inline Eigen::Index resolve_rows(const RunConfig& cfg, int p) {
  if (cfg.n > 0) return cfg.n;
  return cfg.r.is_known() ? std::max(p, 30) : p + cfg.r.value();
}

inline Design build_design(const RunConfig& cfg) {
  const int prot = cfg.protected_column - 1;
  Design d = [&]() -> Design {
    if (cfg.design == "nested") {
      const Eigen::Index n = resolve_rows(cfg, 2);
      return nested_design(cfg.rho, n, n > 2 ? std::optional<std::uint64_t>(cfg.embed_seed) : std::nullopt);
    }
    if (cfg.design == "orthogonal") {
      const Eigen::Index n = resolve_rows(cfg, cfg.p);
      return build_design_from_gram(Matrix::Identity(cfg.p, cfg.p), n, cfg.embed_seed);
    }
    if (cfg.design == "exchangeable") return exchangeable_design(cfg.p, cfg.a, resolve_rows(cfg, cfg.p), cfg.embed_seed);
    if (cfg.design == "equicorrelated") {
      const double c = cfg.equicorr ? *cfg.equicorr : std::sqrt(0.8 / (cfg.p - 1));
      return equicorrelated_design(cfg.p, c, resolve_rows(cfg, cfg.p), cfg.embed_seed);
    }
    if (cfg.design == "csv") {
      if (cfg.csv.empty()) throw Error(ErrorCode::usage, "design=csv needs --csv PATH");
      return load_design_csv(cfg.csv);
    }
    if (cfg.design == "gram") {
      const Matrix g = parse_gram_literal(cfg.gram);
      return build_design_from_gram(g, resolve_rows(cfg, static_cast<int>(g.rows())), cfg.embed_seed);
    }
    throw Error(ErrorCode::parse, "unknown design '" + cfg.design + "'");
  }();
  if (prot < 0 || prot >= d.p()) throw Error(ErrorCode::domain, "protected column " + std::to_string(cfg.protected_column) + " out of range");
  d = d.with_protected(prot);
  d.require_full_rank();
  return d;
}

inline std::string render_csv(const RunConfig& cfg, const CsvTable& table) {
  std::ostringstream out;
  out << "# posi " << cfg.command << "\n";
  std::istringstream header(serialize_config(cfg, true));
  std::string line;
  while (std::getline(header, line)) out << "#" << (line.empty() ? "" : " ") << line << "\n";
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
  out << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  return out.str();
}

inline void emit(const RunConfig& cfg, const std::string& content) {
  if (cfg.out.empty() || cfg.out == "-") {
    std::cout << content;
    std::cout.flush();
    return;
  }
  detail::write_file_atomic(cfg.out, content);
}

// --- constants ------------------------------------------------------------------

inline std::vector<KKind> parse_kinds(const std::string& text) {
  std::vector<KKind> out;
  for (const auto& s : split_list(text)) out.push_back(parse_kkind(s));
  if (out.empty()) throw Error(ErrorCode::parse, "no constant kinds given");
  return out;
}

inline std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  for (const auto& s : split_list(text)) {
    const double v = parse_real_expression(s);
    if (!(v > 0.0)) throw Error(ErrorCode::domain, "thresholds must be positive");
    out.push_back(v);
  }
  if (out.empty()) throw Error(ErrorCode::parse, "no thresholds given");
  return out;
}

// Constant of a kind for a design whose candidate universe is every model
// containing the protected column. Monte Carlo kinds share the seed, so the
// nested families give ordered constants on the same sample.
inline KConstant compute_constant(const Design& design, KKind kind, const RunConfig& cfg) {
  switch (kind) {
    case KKind::Naive: return k_naive(cfg.alpha, cfg.r);
    case KKind::Scheffe: return k_scheffe(cfg.alpha, design.rank(), cfg.r);
    case KKind::Posi:
    case KKind::Posi1:
    case KKind::PosiAllSubsets: {
      const auto universe = ModelCache::enumerate_protected_models(design);
      PosiOptions opts;
      opts.draws = cfg.draws;
      opts.seed = cfg.seed;
      opts.threads = cfg.threads;
      opts.budget = cfg.budget;
      return k_posi(design, universe, kind, cfg.alpha, cfg.r, opts);
    }
    case KKind::OptimalNested: break;
  }
  throw Error(ErrorCode::usage, "the optimal constant is only defined for the two-model nested setting");
}

inline CsvTable run_constants(const RunConfig& cfg) {
  const Design design = build_design(cfg);
  CsvTable t;
  t.columns = {"kind", "value", "mc_se", "alpha", "r", "c_threshold"};
  const std::string kinds = cfg.kinds.empty() ? "naive,posi1,posi,posi_all,scheffe" : cfg.kinds;
  for (KKind kind : parse_kinds(kinds)) {
    if (kind == KKind::OptimalNested) {
      if (design.p() != 2) throw Error(ErrorCode::usage, "kstar needs a design with p = 2");
      const double rho = rho_two_model(design);
      for (double c : parse_thresholds(cfg.c)) {
        const KConstant k = k_star_nested(rho, c, cfg.alpha, cfg.r);
        t.add({to_string(k.kind), fmt(k.value), fmt(k.mc_se), fmt(k.alpha), k.r.str(), fmt(c)});
      }
      continue;
    }
    const KConstant k = compute_constant(design, kind, cfg);
    t.add({to_string(k.kind), fmt(k.value), fmt(k.mc_se), fmt(k.alpha), k.r.str(), ""});
  }
  return t;
}

// --- exact ------------------------------------------------------------------------

// Constants of the two-model nested setting, evaluated exactly (the column
// space is two-dimensional, so the PoSI probabilities are planar integrals).
inline KConstant nested_constant(double rho, KKind kind, double c_threshold, double alpha, Dof r) {
  switch (kind) {
    case KKind::Naive: return k_naive(alpha, r);
    case KKind::Scheffe: return k_scheffe(alpha, 2, r);
    case KKind::Posi:
    case KKind::Posi1: {
      const Design d = nested_design(rho);
      const std::vector<ModelId> universe{ModelId::from_members({0}), ModelId::from_members({0, 1})};
      return k_posi_planar(CoordinateFamily::from_universe(d, universe, kind == KKind::Posi1), kind, alpha, r);
    }
    case KKind::PosiAllSubsets: return k_posi_planar(CoordinateFamily::all_subsets(nested_design(rho)), kind, alpha, r);
    case KKind::OptimalNested: return k_star_nested(rho, c_threshold, alpha, r);
  }
  throw Error(ErrorCode::usage, "unknown constant kind");
}

inline CsvTable run_exact(const RunConfig& cfg) {
  CsvTable t;
  t.columns = {"figure", "target", "rho", "zeta", "c_threshold", "k_kind", "k_value", "coverage"};
  const auto thresholds = parse_thresholds(cfg.c);
  if (cfg.figure == 1) {
    const auto kinds = parse_kinds(cfg.kinds.empty() ? "naive,posi1,posi,scheffe" : cfg.kinds);
    const auto zetas = parse_grid(cfg.zeta_grid);
    const double c = thresholds.front();
    struct Job {
      NestedTarget target;
      KConstant k;
      double zeta;
    };
    std::vector<Job> jobs;
    for (NestedTarget target : {NestedTarget::SelectedModel, NestedTarget::FullModel}) {
      for (KKind kind : kinds) {
        const KConstant k = nested_constant(cfg.rho, kind, c, cfg.alpha, cfg.r);
        for (double z : zetas) jobs.push_back({target, k, z});
      }
    }
    std::vector<double> values(jobs.size());
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
      const NestedScenario scn{cfg.rho, jobs[i].zeta, c, cfg.r, cfg.alpha};
      values[i] = nested_coverage(scn, jobs[i].k.value, jobs[i].target).value;
    });
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      t.add({"1", to_string(jobs[i].target), fmt(cfg.rho), fmt(jobs[i].zeta), fmt(c), to_string(jobs[i].k.kind), fmt(jobs[i].k.value),
             fmt(values[i])});
    }
    return t;
  }
  if (cfg.figure == 2 || cfg.figure == 3) {
    const auto kinds = parse_kinds(cfg.kinds.empty() ? "naive,posi1,posi,scheffe,kstar" : cfg.kinds);
    const auto rhos = parse_grid(cfg.rho_grid);
    struct Job {
      double rho;
      double c;
      KKind kind;
      bool per_threshold;
    };
    std::vector<Job> jobs;
    for (double rho : rhos) {
      for (KKind kind : kinds) {
        // Figure 3 lists C-independent constants once per rho.
        const bool per_c = cfg.figure == 2 || kind == KKind::OptimalNested;
        if (per_c) {
          for (double c : thresholds) jobs.push_back({rho, c, kind, true});
        } else {
          jobs.push_back({rho, thresholds.front(), kind, false});
        }
      }
    }
    std::vector<KConstant> ks(jobs.size());
    std::vector<double> mins(jobs.size(), 0.0);
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
      ks[i] = nested_constant(jobs[i].rho, jobs[i].kind, jobs[i].c, cfg.alpha, cfg.r);
      if (jobs[i].per_threshold) mins[i] = min_coverage(jobs[i].rho, jobs[i].c, ks[i].value, cfg.r, NestedTarget::SelectedModel).value;
    });
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      t.add({std::to_string(cfg.figure), "selected", fmt(jobs[i].rho), "", jobs[i].per_threshold ? fmt(jobs[i].c) : "",
             to_string(jobs[i].kind), fmt(ks[i].value), jobs[i].per_threshold ? fmt(mins[i]) : ""});
    }
    return t;
  }
  throw Error(ErrorCode::usage, "figure must be 1, 2 or 3");
}

// --- search -------------------------------------------------------------------------

inline std::string quote_vector(const Vector& v) {
  std::string s = "\"[";
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s + "]\"";
}

inline CsvTable run_search(const RunConfig& cfg) {
  const Design design = build_design(cfg);
  SearchPlan plan;
  plan.stages = SearchPlan::parse_stages(cfg.stages);
  plan.seed = cfg.seed;
  plan.sigma = cfg.sigma;
  plan.validate();
  const auto kinds = parse_kinds(cfg.kinds.empty() ? "naive,posi1,posi_all" : cfg.kinds);
  std::vector<CoverageTarget> targets;
  for (const auto& s : split_list(cfg.targets)) targets.push_back(parse_target(s));
  if (targets.empty()) throw Error(ErrorCode::parse, "no coverage targets given");
  std::vector<KConstant> constants;
  for (KKind kind : kinds) constants.push_back(compute_constant(design, kind, cfg));

  CsvTable t;
  t.columns = {"design", "selector", "k_kind", "k_value", "k_mc_se", "target", "rate", "se", "replications", "beta_min"};
  if (cfg.timing) t.columns.push_back("wall_seconds");
  const auto selectors = split_list(cfg.selector);
  if (selectors.empty()) throw Error(ErrorCode::parse, "no selectors given");
  for (std::size_t si = 0; si < selectors.size(); ++si) {
    const Selector selector(design, parse_selector(selectors[si], design.n()));
    std::vector<Criterion> criteria;
    for (CoverageTarget target : targets)
      for (const auto& k : constants) criteria.push_back({k, target});
    const auto start = std::chrono::steady_clock::now();
    const std::string checkpoint = cfg.checkpoint.empty() ? std::string{} : cfg.checkpoint + "." + std::to_string(si + 1);
    const auto results = staged_min_search(selector, criteria, plan, cfg.threads, checkpoint);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& res : results) {
      std::vector<std::string> row{cfg.design,
                                   selector.name(),
                                   to_string(res.criterion.k.kind),
                                   fmt(res.criterion.k.value),
                                   fmt(res.criterion.k.mc_se),
                                   to_string(res.criterion.target),
                                   fmt(res.estimate.rate),
                                   fmt(res.estimate.se),
                                   std::to_string(res.estimate.replications),
                                   quote_vector(res.estimate.beta)};
      if (cfg.timing) row.push_back(fmt(seconds));
      t.add(std::move(row));
    }
  }
  return t;
}

// --- validate-appendix -------------------------------------------------------------------

struct AppendixPoint {
  Vector beta;
  double sigma = 1.0;
};

// Parameter points spread over several orders of magnitude of |beta| / sigma.
inline std::vector<AppendixPoint> appendix_points(const Design& design, std::size_t count, std::uint64_t seed) {
  const auto betas = draw_beta_candidates(design, count, seed);
  std::vector<AppendixPoint> out;
  for (std::size_t i = 0; i < count; ++i) {
    Draws d(substream(seed, {0x706f696e74ULL, i}));
    const double scale = std::pow(3.0, d.normal());
    const double sigma = std::exp(0.5 * d.normal());
    out.push_back({betas[i] * scale * sigma, sigma});
  }
  return out;
}

inline CsvTable run_validate_appendix(const RunConfig& cfg) {
  const Design design = build_design(cfg);
  const TwoModelUniverse universe = TwoModelUniverse::nested_default(design);
  const KConstant k = k_naive(cfg.alpha, cfg.r);
  const ZeroRestrictionEngine engine(design, universe, k);
  const int prot = design.protected_index();
  const ModelGeometry g1 = ModelGeometry::build(design, universe.m1);
  const int pos = universe.m1.position(prot);

  std::vector<std::pair<std::string, TwoModelRule>> rules;
  rules.emplace_back("always_m0", [](const Observation&) { return false; });
  rules.emplace_back("always_m1", [](const Observation&) { return true; });
  rules.emplace_back("t_above_3", [g1, pos](const Observation& obs) {
    return std::abs(g1.coef_map.row(pos).dot(obs.z)) / (obs.sigma_hat * g1.unit_se[pos]) > 3.0;
  });
  const auto random_rules = random_threshold_rules(design.n(), cfg.rules, cfg.seed);
  for (std::size_t i = 0; i < random_rules.size(); ++i) rules.emplace_back("threshold_" + std::to_string(i + 1), random_rules[i]);

  const auto points = appendix_points(design, cfg.points, cfg.seed);
  CsvTable t;
  t.columns = {"selector_id", "point", "sigma", "rate", "se", "replications", "lower_bound", "pass"};
  for (std::size_t ri = 0; ri < rules.size(); ++ri) {
    for (std::size_t pi = 0; pi < points.size(); ++pi) {
      const std::uint64_t seed = substream(cfg.seed, {0x61707078ULL, ri, pi})();
      const CoverageEstimate e = engine.estimate(points[pi].beta, points[pi].sigma, rules[ri].second, cfg.replications, seed, cfg.threads);
      const double bound = 1.0 - cfg.alpha - 3.0 * e.se;
      t.add({rules[ri].first, std::to_string(pi + 1), fmt(points[pi].sigma), fmt(e.rate), fmt(e.se), std::to_string(e.replications),
             fmt(bound), e.rate >= bound ? "pass" : "fail"});
    }
  }
  return t;
}

inline CsvTable run(const RunConfig& cfg) {
  if (cfg.command == "constants") return run_constants(cfg);
  if (cfg.command == "exact") return run_exact(cfg);
  if (cfg.command == "search") return run_search(cfg);
  if (cfg.command == "validate-appendix") return run_validate_appendix(cfg);
  throw Error(ErrorCode::usage, "unknown command '" + cfg.command + "'");
}

}  // namespace posi
