#include "posi/constants.hpp"
#include "posi/design.hpp"
#include "posi/exact_nested.hpp"
#include "posi/mc_search.hpp"
#include "posi/selectors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

using namespace posi;

namespace {

const double kSqrt2 = std::numbers::sqrt2;

Vector nested_beta(double rho, double beta1, double zeta) {
  return (Vector(2) << beta1, zeta / std::sqrt(1.0 - rho * rho)).finished();
}

double zeta_of(double rho, const Vector& beta) { return beta[1] * std::sqrt(1.0 - rho * rho); }

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST(Candidates, CovarianceIsColumnSpaceProjection) {
  Matrix x(6, 3);
  x << 1, 2, 0, 0.5, -1, 1, 2, 0, 3, -1, 1, 1, 0, 2, -2, 1, 1, 0.5;
  const Design d(x);
  const std::size_t count = 100000;
  const auto betas = draw_beta_candidates(d, count, 4);
  Matrix cov = Matrix::Zero(6, 6);
  for (const auto& b : betas) {
    const Vector mu = x * b;
    cov += mu * mu.transpose();
  }
  cov /= double(count);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector ev = eig.eigenvalues();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(ev[i], 0.0, 0.05);
  for (int i = 3; i < 6; ++i) EXPECT_NEAR(ev[i], 1.0, 0.05);
  const Matrix proj = d.basis() * d.basis().transpose();
  EXPECT_LE((cov - proj).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Candidates, OrthonormalDesignGivesStandardGaussian) {
  const Design d(random_orthonormal(8, 4, 3));
  const auto betas = draw_beta_candidates(d, 50000, 9);
  Vector mean = Vector::Zero(4);
  Matrix second = Matrix::Zero(4, 4);
  for (const auto& b : betas) {
    mean += b;
    second += b * b.transpose();
  }
  mean /= 50000.0;
  second /= 50000.0;
  EXPECT_LE(mean.cwiseAbs().maxCoeff(), 0.03);
  EXPECT_LE((second - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Candidates, DeterministicAndPrefixStable) {
  const Design d = exchangeable_design(4, 10.0, 12, 2);
  const auto a = draw_beta_candidates(d, 20, 77);
  const auto b = draw_beta_candidates(d, 20, 77);
  const auto c = draw_beta_candidates(d, 5, 77);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(a[i], b[i]);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i], c[i]);
  EXPECT_NE(a[0], draw_beta_candidates(d, 1, 78)[0]);
}

TEST(Estimate, StandardErrorMatchesRate) {
  const auto e = CoverageEstimate::from_counts(940, 1000, Vector::Zero(2), CoverageTarget::SelectedModel);
  EXPECT_DOUBLE_EQ(e.rate, 0.94);
  EXPECT_DOUBLE_EQ(e.se, std::sqrt(0.94 * 0.06 / 1000));
}

TEST(Estimate, FixedModelNaiveIsNominal) {
  const Design d = exchangeable_design(4, 10.0, 24, 5);
  const Dof r(20);
  const Vector beta = (Vector(4) << 0.3, -1.0, 2.0, 0.5).finished();
  const auto e = estimate_coverage(d, FixedModel{ModelId::parse("1+3")}, k_naive(0.05, r), beta, 1.0, CoverageTarget::SelectedModel,
                                   200000, 11);
  EXPECT_NEAR(e.rate, 0.95, 3.0 * e.se);
  const auto known = estimate_coverage(d, FixedModel{ModelId::parse("1+2+4")}, k_naive(0.05, Dof::known()), beta, 1.0,
                                       CoverageTarget::SelectedModel, 200000, 12);
  EXPECT_NEAR(known.rate, 0.95, 3.0 * known.se);
}

TEST(Estimate, NestedMatchesExactEngine) {
  const double rho = 0.9;
  const Design d = nested_design(rho);
  for (double zeta : {0.0, 1.5}) {
    const Vector beta = nested_beta(rho, 0.7, zeta);
    for (auto [target, nt] : {std::pair{CoverageTarget::SelectedModel, NestedTarget::SelectedModel},
                              std::pair{CoverageTarget::FullParameter, NestedTarget::FullModel}}) {
      const auto e =
          estimate_coverage(d, NestedTTest{kSqrt2}, k_naive(0.05, Dof::known()), beta, 1.0, target, 200000, 21);
      const double exact = nested_coverage({rho, zeta, kSqrt2, Dof::known(), 0.05}, 1.959963984540054, nt).value;
      EXPECT_NEAR(e.rate, exact, 3.0 * e.se) << "zeta=" << zeta << " target=" << to_string(target);
    }
  }
}

TEST(Estimate, NestedUnknownVarianceMatchesExactEngine) {
  const double rho = -0.6;
  const Design d = nested_design(rho, 7, 3);
  const Dof r(5);
  const Vector beta = nested_beta(rho, 0.0, 0.8);
  const auto e = estimate_coverage(d, NestedTTest{kSqrt2}, k_naive(0.05, r), beta, 1.0, CoverageTarget::SelectedModel, 200000, 5);
  const double exact = nested_coverage({rho, 0.8, kSqrt2, r, 0.05}, k_naive(0.05, r).value, NestedTarget::SelectedModel).value;
  EXPECT_NEAR(e.rate, exact, 3.0 * e.se);
}

// At beta = 0 every submodel target is 0, so the SPAR variant covers exactly
// when the simultaneous event behind K_P1 holds.
TEST(Estimate, SparVariantIsTightForPosi1) {
  for (double rho : {0.5, 0.9}) {
    const Design d = nested_design(rho);
    const auto u = ModelCache::enumerate_protected_models(d);
    const KConstant k = k_posi_planar(posi_family(d, u, KKind::Posi1), KKind::Posi1, 0.05, Dof::known());
    const auto e = estimate_coverage(d, SparVariant{u}, k, Vector::Zero(2), 1.0, CoverageTarget::SelectedModel, 200000, 8);
    EXPECT_NEAR(e.rate, 0.95, 3.0 * e.se) << "rho=" << rho;
  }
}

TEST(Estimate, ThreadCountDoesNotChangeCounts) {
  const Design d = exchangeable_design(4, 10.0, 24, 5);
  const Selector sel(d, Stepwise{2.0});
  const CoverageEngine engine(sel, Dof(20));
  const Criterion cs[] = {{k_naive(0.05, Dof(20)), CoverageTarget::SelectedModel},
                          {k_naive(0.05, Dof(20)), CoverageTarget::FullParameter}};
  const Vector beta = (Vector(4) << 0.0, 0.2, -0.1, 0.3).finished();
  const auto a = engine.covered_counts(beta, 1.0, cs, 3000, 99, 1);
  EXPECT_EQ(a, engine.covered_counts(beta, 1.0, cs, 3000, 99, 3));
  EXPECT_EQ(a, engine.covered_counts(beta, 1.0, cs, 3000, 99, 8));
}

TEST(Estimate, ScaleEquivariance) {
  const Design d = exchangeable_design(4, 10.0, 24, 6);
  const Criterion cs[] = {{k_naive(0.05, Dof(20)), CoverageTarget::SelectedModel},
                          {k_scheffe(0.05, 4, Dof(20)), CoverageTarget::FullParameter}};
  const Vector beta = (Vector(4) << 0.1, 0.25, -0.3, 0.05).finished();
  for (const SelectorSpec& spec : std::vector<SelectorSpec>{Stepwise{2.0}, Stepwise{std::log(24.0)}, LassoCV{}}) {
    const Selector sel(d, spec);
    const CoverageEngine engine(sel, Dof(20));
    const auto base = engine.covered_counts(beta, 1.0, cs, 2000, 3);
    for (double lambda : {0.5, 2.0, 8.0}) EXPECT_EQ(engine.covered_counts(lambda * beta, lambda, cs, 2000, 3), base) << describe(spec);
  }
}

TEST(Estimate, Errors) {
  const Design d = exchangeable_design(3, 10.0, 10, 1);
  const Selector sel(d, Stepwise{2.0});
  EXPECT_THROW(CoverageEngine(sel, Dof(5)), Error);
  const CoverageEngine engine(sel, Dof(7));
  const Criterion wrong{k_naive(0.05, Dof::known()), CoverageTarget::SelectedModel};
  EXPECT_THROW(engine.covered_counts(Vector::Zero(3), 1.0, std::span<const Criterion>(&wrong, 1), 10, 1), Error);
  const Criterion ok{k_naive(0.05, Dof(7)), CoverageTarget::SelectedModel};
  EXPECT_THROW(engine.covered_counts(Vector::Zero(2), 1.0, std::span<const Criterion>(&ok, 1), 10, 1), Error);
  EXPECT_THROW(engine.covered_counts(Vector::Zero(3), 0.0, std::span<const Criterion>(&ok, 1), 10, 1), Error);

  Custom bad{"drops-protected", [](const Observation&, std::uint64_t) { return ModelId::parse("2"); }, {ModelId::parse("1+2+3")}};
  const Selector bad_sel(d, bad);
  try {
    estimate_coverage(bad_sel, k_naive(0.05, Dof(7)), Vector::Zero(3), 1.0, CoverageTarget::SelectedModel, 10, 1);
    FAIL() << "expected a selector error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("replication"), std::string::npos);
  }
}

TEST(Plan, ValidationAndParsing) {
  SearchPlan plan;
  EXPECT_NO_THROW(plan.validate());
  EXPECT_EQ(SearchPlan::format_stages(plan.stages), "10000x100,1000x1000,1x500000");
  plan.stages = SearchPlan::parse_stages("1000x100,100x1000,1x100000");
  EXPECT_EQ(plan.stages.size(), 3u);
  EXPECT_EQ(plan.stages[1].candidates, 100u);
  EXPECT_EQ(plan.stages[2].replications, 100000u);
  EXPECT_THROW(SearchPlan::parse_stages("100-100"), Error);
  EXPECT_THROW(SearchPlan::parse_stages("ax100"), Error);
  EXPECT_THROW(SearchPlan::parse_stages(""), Error);

  SearchPlan bad;
  bad.stages = {};
  EXPECT_THROW(bad.validate(), Error);
  bad.stages = {{100, 100}, {100, 1000}};
  EXPECT_THROW(bad.validate(), Error);
  bad.stages = {{100, 100}, {10, 100}};
  EXPECT_THROW(bad.validate(), Error);
  bad.stages = {{100, 0}};
  EXPECT_THROW(bad.validate(), Error);
  bad.stages = {{100, 100}};
  bad.sigma = -1.0;
  EXPECT_THROW(bad.validate(), Error);

  const auto g = SearchPlan::geometric(3, 10000, 100, 500000);
  EXPECT_EQ(SearchPlan::format_stages(g), "10000x100,100x7071,1x500000");
  SearchPlan gp;
  gp.stages = g;
  EXPECT_NO_THROW(gp.validate());
}

// Stage-1 probes span a range of zeta; the final estimate is bracketed by the
// exact minimum below and by the exact coverage of the best probe above.
TEST(StagedSearch, BracketedByExactEngine) {
  const double rho = 0.9;
  const Design d = nested_design(rho);
  const Selector sel(d, NestedTTest{kSqrt2});
  const KConstant k = k_naive(0.05, Dof::known());
  SearchPlan plan;
  plan.stages = {{100, 100}, {10, 1000}, {1, 100000}};
  plan.seed = 31;
  const SearchResult res = staged_min_search(sel, k, CoverageTarget::SelectedModel, plan, 1);
  const double se = res.estimate.se;
  EXPECT_EQ(res.estimate.replications, 100000u);
  ASSERT_EQ(res.stage_minima.size(), 3u);

  const double exact_min = min_coverage(rho, kSqrt2, k.value, Dof::known(), NestedTarget::SelectedModel).value;
  double probed_min = 1.0;
  for (const auto& b : draw_beta_candidates(d, 100, plan.seed)) {
    probed_min = std::min(probed_min, nested_coverage({rho, zeta_of(rho, b), kSqrt2, Dof::known(), 0.05}, k.value,
                                                      NestedTarget::SelectedModel)
                                          .value);
  }
  std::printf("exact min %.5f, probed min %.5f, search %.5f (se %.5f)\n", exact_min, probed_min, res.estimate.rate, se);
  EXPECT_GE(res.estimate.rate, exact_min - 3.0 * se);
  EXPECT_LE(res.estimate.rate, probed_min + 3.0 * se);
  const double at_final = nested_coverage({rho, zeta_of(rho, res.estimate.beta), kSqrt2, Dof::known(), 0.05}, k.value,
                                          NestedTarget::SelectedModel)
                              .value;
  EXPECT_NEAR(res.estimate.rate, at_final, 3.0 * se);
}

TEST(StagedSearch, Deterministic) {
  const Design d = exchangeable_design(4, 10.0, 24, 5);
  const Selector sel(d, Stepwise{std::log(24.0)});
  const Criterion cs[] = {{k_naive(0.05, Dof(20)), CoverageTarget::SelectedModel},
                          {k_naive(0.05, Dof(20)), CoverageTarget::FullParameter}};
  SearchPlan plan;
  plan.stages = {{40, 50}, {6, 400}, {1, 3000}};
  plan.seed = 5;
  const auto a = staged_min_search(sel, cs, plan, 1);
  const auto b = staged_min_search(sel, cs, plan, 1);
  const auto c = staged_min_search(sel, cs, plan, 4);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].candidate, b[i].candidate);
    EXPECT_EQ(a[i].estimate.beta, b[i].estimate.beta);
    EXPECT_EQ(a[i].estimate.covered, b[i].estimate.covered);
    EXPECT_EQ(a[i].candidate, c[i].candidate);
    EXPECT_EQ(a[i].estimate.covered, c[i].estimate.covered);
    EXPECT_EQ(a[i].stage_minima, c[i].stage_minima);
  }
  // A criterion searched alone gives the same answer as in the joint run.
  const auto solo = staged_min_search(sel, cs[1].k, cs[1].target, plan, 1);
  EXPECT_EQ(solo.candidate, a[1].candidate);
  EXPECT_EQ(solo.estimate.covered, a[1].estimate.covered);
}

TEST(StagedSearch, CheckpointResume) {
  const Design d = exchangeable_design(3, 10.0, 13, 2);
  const Selector sel(d, Stepwise{2.0});
  const KConstant k = k_naive(0.05, Dof(10));
  SearchPlan plan;
  plan.stages = {{30, 50}, {5, 300}, {1, 2000}};
  const std::string path = temp_path("posi_checkpoint_test.json");
  std::filesystem::remove(path);
  const auto fresh = staged_min_search(sel, k, CoverageTarget::SelectedModel, plan, 1);
  const auto first = staged_min_search(sel, k, CoverageTarget::SelectedModel, plan, 1, path);
  ASSERT_TRUE(std::filesystem::exists(path));
  EXPECT_EQ(first.candidate, fresh.candidate);
  EXPECT_EQ(first.estimate.covered, fresh.estimate.covered);

  // Keep only the first stage, as if interrupted, then resume.
  nlohmann::json j;
  {
    std::ifstream in(path);
    in >> j;
  }
  ASSERT_EQ(j["stages"].size(), 3u);
  j["stages"].erase(1);
  j["stages"].erase(1);
  {
    std::ofstream out(path);
    out << j.dump();
  }
  const auto resumed = staged_min_search(sel, k, CoverageTarget::SelectedModel, plan, 1, path);
  EXPECT_EQ(resumed.candidate, fresh.candidate);
  EXPECT_EQ(resumed.estimate.covered, fresh.estimate.covered);
  EXPECT_EQ(resumed.stage_minima, fresh.stage_minima);

  // A checkpoint from another plan is ignored.
  SearchPlan other = plan;
  other.seed = 2;
  const auto o1 = staged_min_search(sel, k, CoverageTarget::SelectedModel, other, 1, path);
  const auto o2 = staged_min_search(sel, k, CoverageTarget::SelectedModel, other, 1);
  EXPECT_EQ(o1.estimate.covered, o2.estimate.covered);

  {
    std::ofstream out(path);
    out << "{not json";
  }
  EXPECT_THROW(staged_min_search(sel, k, CoverageTarget::SelectedModel, plan, 1, path), Error);
  std::filesystem::remove(path);
}

TEST(StagedSearch, Errors) {
  const Design d = exchangeable_design(3, 10.0, 13, 2);
  const Selector sel(d, Stepwise{2.0});
  SearchPlan plan;
  plan.stages = {};
  EXPECT_THROW(staged_min_search(sel, k_naive(0.05, Dof(10)), CoverageTarget::SelectedModel, plan), Error);
  plan.stages = {{2, 10}};
  EXPECT_THROW(staged_min_search(sel, std::span<const Criterion>{}, plan), Error);
}

// Simultaneous constants stay valid for every selector.
TEST(StagedSearch, ValiditySuite) {
  const Design d = exchangeable_design(4, 10.0, 24, 5);
  const Dof r(20);
  const auto u = ModelCache::enumerate_protected_models(d);
  PosiOptions opts;
  opts.draws = 100000;
  opts.seed = 17;
  const Criterion cs[] = {{k_posi(d, u, KKind::Posi, 0.05, r, opts), CoverageTarget::SelectedModel},
                          {k_posi(d, u, KKind::PosiAllSubsets, 0.05, r, opts), CoverageTarget::SelectedModel},
                          {k_scheffe(0.05, 4, r), CoverageTarget::SelectedModel}};
  SearchPlan plan;
  plan.stages = {{60, 100}, {6, 1000}, {1, 20000}};
  plan.seed = 3;
  for (const SelectorSpec& spec : std::vector<SelectorSpec>{Stepwise{2.0}, Stepwise{std::log(24.0)}, LassoCV{}, SparVariant{}}) {
    const Selector sel(d, spec);
    for (const auto& res : staged_min_search(sel, cs, plan, 0)) {
      EXPECT_GE(res.estimate.rate, 0.95 - 3.0 * res.estimate.se)
          << describe(spec) << " " << to_string(res.criterion.k.kind) << " " << to_string(res.criterion.target);
    }
  }
}

TEST(StagedSearch, FullParameterUnderCoverageWitness) {
  const double rho = 0.9;
  const Design d = nested_design(rho, 22, 4);
  const Dof r(20);
  const Selector sel(d, Stepwise{std::log(22.0)});
  SearchPlan plan;
  plan.stages = {{200, 100}, {20, 1000}, {1, 20000}};
  plan.seed = 6;
  const auto res = staged_min_search(sel, k_naive(0.05, r), CoverageTarget::FullParameter, plan, 0);
  EXPECT_LT(res.estimate.rate, 0.95 - 10.0 * res.estimate.se);

  const Design eq = equicorrelated_design(4, std::sqrt(0.8 / 3.0), 24, 5);
  const Selector eq_sel(eq, Stepwise{std::log(24.0)});
  const auto eq_res = staged_min_search(eq_sel, k_naive(0.05, r), CoverageTarget::FullParameter, plan, 0);
  EXPECT_LT(eq_res.estimate.rate, 0.95 - 10.0 * eq_res.estimate.se);
}
