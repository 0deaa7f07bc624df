#pragma once

// Model selection procedures. Each maps an observation (y, z = Q'y, sigma-hat)
// to a ModelId from a fixed universe whose least-squares geometry is cached.

#include "posi/core.hpp"
#include "posi/design.hpp"
#include "posi/lasso.hpp"
#include "posi/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace posi {

struct NestedTTest {
  double c_threshold;
};
struct Stepwise {
  double penalty;
};
// Fraction: the penalty is indexed by the L1 norm of the standardized
// coefficients as a fraction of the least-squares norm, on an equispaced grid
// over [0, 1]. Lambda: log-spaced lambda grid down to lambda_min_ratio.
enum class LassoPenaltyGrid { Fraction, Lambda };

struct LassoCV {
  int folds = 10;
  int grid_size = 100;
  LassoPenaltyGrid grid = LassoPenaltyGrid::Fraction;
  double lambda_min_ratio = 1e-3;
};
struct SparVariant {
  std::vector<ModelId> universe;  // empty: every model containing the protected column
};
struct FixedModel {
  ModelId model;
};
struct Custom {
  std::string name;
  std::function<ModelId(const Observation&, std::uint64_t seed)> rule;
  std::vector<ModelId> universe;  // empty: every model containing the protected column
};

using SelectorSpec = std::variant<NestedTTest, Stepwise, LassoCV, SparVariant, FixedModel, Custom>;

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Short stable label, also accepted back by parse_selector (except Custom).
inline std::string describe(const SelectorSpec& spec) {
  struct Visitor {
    std::string operator()(const NestedTTest& s) const { return "nested:" + format_number(s.c_threshold); }
    std::string operator()(const Stepwise& s) const { return "stepwise:" + format_number(s.penalty); }
    std::string operator()(const LassoCV& s) const {
      return "lasso:" + std::to_string(s.folds) + ":" + std::to_string(s.grid_size) +
             (s.grid == LassoPenaltyGrid::Lambda ? ":lambda" : "");
    }
    std::string operator()(const SparVariant&) const { return "spar"; }
    std::string operator()(const FixedModel& s) const {
      std::string members;
      for (int j : s.model.members()) members += (members.empty() ? "" : "+") + std::to_string(j + 1);
      return "fixed:" + members;
    }
    std::string operator()(const Custom& s) const { return "custom:" + s.name; }
  };
  return std::visit(Visitor{}, spec);
}

// Accepts positive reals and the forms sqrt2, sqrt(2), sqrtlog10, sqrt(log(10)), log30.
inline double parse_real_expression(std::string s) {
  std::erase_if(s, [](char c) { return c == ' ' || c == '(' || c == ')'; });
  auto bad = [&] { return Error(ErrorCode::parse, "invalid number '" + s + "'"); };
  if (s.empty()) throw bad();
  auto plain = [&](const std::string& t) -> double {
    if (t.starts_with("log")) {
      return std::log(std::stod(t.substr(3)));
    }
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return v;
  };
  try {
    if (s.starts_with("sqrt")) return std::sqrt(plain(s.substr(4)));
    return plain(s);
  } catch (const std::logic_error&) {
    throw bad();
  }
}

// "aic", "bic", "stepwise:<penalty>", "nested:<C>", "lasso[:folds[:grid]]",
// "spar", "fixed:1+2" (1-based members). `n` resolves the BIC penalty log(n).
inline SelectorSpec parse_selector(const std::string& text, Eigen::Index n) {
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? std::string{} : text.substr(colon + 1);
  if (head == "aic") return Stepwise{2.0};
  if (head == "bic") return Stepwise{std::log(double(n))};
  if (head == "stepwise") return Stepwise{parse_real_expression(rest)};
  if (head == "nested") return NestedTTest{parse_real_expression(rest.empty() ? "sqrt2" : rest)};
  if (head == "lasso" || head == "lasso-cv") {
    LassoCV spec;
    std::vector<std::string> parts;
    for (std::size_t at = 0; !rest.empty() && at <= rest.size();) {
      const auto end = std::min(rest.find(':', at), rest.size());
      parts.push_back(rest.substr(at, end - at));
      at = end + 1;
    }
    auto integer = [&](const std::string& t) {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(t, &used);
      } catch (const std::logic_error&) {
        used = 0;
      }
      if (used == 0 || used != t.size()) throw Error(ErrorCode::parse, "invalid lasso selector '" + text + "'");
      return v;
    };
    if (parts.size() > 3) throw Error(ErrorCode::parse, "invalid lasso selector '" + text + "'");
    if (parts.size() > 0) spec.folds = integer(parts[0]);
    if (parts.size() > 1) spec.grid_size = integer(parts[1]);
    if (parts.size() > 2) {
      if (parts[2] == "lambda") {
        spec.grid = LassoPenaltyGrid::Lambda;
      } else if (parts[2] != "fraction") {
        throw Error(ErrorCode::parse, "invalid lasso selector '" + text + "'");
      }
    }
    return spec;
  }
  if (head == "spar") return SparVariant{};
  if (head == "fixed") return FixedModel{ModelId::parse(rest)};
  throw Error(ErrorCode::parse, "unknown selector '" + text + "'");
}

namespace detail {

// Everything select_lasso_cv needs that depends only on the design.
struct LassoCvContext {
  std::vector<int> free_columns;  // design columns other than the protected one
  Matrix xt;                      // n x (p-1), the non-protected columns
  Matrix gram;                    // xt' xt
  Vector protected_col;
  double protected_norm2 = 0.0;

  explicit LassoCvContext(const Design& d) {
    const int prot = d.protected_index();
    for (int j = 0; j < d.p(); ++j)
      if (j != prot) free_columns.push_back(j);
    xt = select_columns(d.x(), free_columns);
    gram = xt.transpose() * xt;
    protected_col = d.x().col(prot);
    protected_norm2 = protected_col.squaredNorm();
  }
};

inline std::vector<int> fold_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto gen = substream(seed, {0x666f6c6473ULL});
  // Fisher-Yates with a rejection-free multiply-shift draw.
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>((static_cast<unsigned __int128>(gen()) * i) >> 64);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

inline ModelId lasso_cv_select(const Design& design, const LassoCvContext& ctx, const Vector& y, const LassoCV& spec,
                               std::uint64_t seed) {
  const int prot = design.protected_index();
  const ModelId base = ModelId::from_members({prot});
  if (spec.folds < 2) throw Error(ErrorCode::domain, "lasso cross-validation needs at least 2 folds");
  if (spec.grid_size < 1) throw Error(ErrorCode::domain, "lasso penalty grid needs at least one value");
  const Eigen::Index n = design.n();
  if (n < spec.folds) {
    throw Error(ErrorCode::domain, "lasso cross-validation: fewer rows (" + std::to_string(n) + ") than folds (" +
                                       std::to_string(spec.folds) + ")");
  }
  if (ctx.free_columns.empty()) return base;

  const Vector yt = y - ctx.protected_col * (ctx.protected_col.dot(y) / ctx.protected_norm2);
  if (!(yt.norm() > 1e-12 * y.norm())) return base;

  const double dn = double(n);
  const Vector scale = lasso_column_scales(ctx.xt);
  Vector inv = Vector::Zero(scale.size());
  for (Eigen::Index j = 0; j < inv.size(); ++j) inv[j] = scale[j] > 0.0 ? 1.0 / scale[j] : 0.0;
  const Vector xty = ctx.xt.transpose() * yt;
  const Vector c_full = inv.asDiagonal() * (xty / dn);
  const double lmax = c_full.cwiseAbs().maxCoeff();
  if (!(lmax > 0.0)) return base;
  const bool by_fraction = spec.grid == LassoPenaltyGrid::Fraction;
  const Vector lambdas = by_fraction ? Vector() : lambda_grid(lmax, spec.grid_size, spec.lambda_min_ratio);
  Vector fractions = Vector::Zero(spec.grid_size);
  if (by_fraction && spec.grid_size > 1) fractions = Vector::LinSpaced(spec.grid_size, 0.0, 1.0);
  const Eigen::Index grid = spec.grid_size;
  const LassoOptions opts;

  // Coefficients on the standardized scale, one column per grid value.
  auto fit = [&](const Matrix& h, const Vector& c, Eigen::Index last) -> Matrix {
    if (!by_fraction) return lasso_path_covariance(h, c, lambdas, opts, last);
    const LassoKnots knots = lasso_knots_covariance(h, c);
    Matrix out = Matrix::Zero(h.rows(), grid);
    for (Eigen::Index l = 0; l < grid && (last < 0 || l <= last); ++l) out.col(l) = knots.at_fraction(fractions[l]);
    return out;
  };

  // Folds: fold k holds the rows perm[i] with i % folds == k.
  const auto perm = fold_permutation(static_cast<std::size_t>(n), seed);
  Vector cv_error = Vector::Zero(grid);
  for (int k = 0; k < spec.folds; ++k) {
    std::vector<int> test;
    for (std::size_t i = k; i < perm.size(); i += spec.folds) test.push_back(perm[i]);
    const double n_test = double(test.size());
    const double n_train = dn - n_test;
    Matrix x_test(test.size(), ctx.xt.cols());
    Vector y_test(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      x_test.row(i) = ctx.xt.row(test[i]);
      y_test[i] = yt[test[i]];
    }
    const Matrix g_train = ctx.gram - x_test.transpose() * x_test;
    const Vector c_train = xty - x_test.transpose() * y_test;
    // Standardize with the training rows' own column norms.
    Vector s_inv = Vector::Zero(g_train.rows());
    for (Eigen::Index j = 0; j < s_inv.size(); ++j) {
      const double s2 = g_train(j, j) / n_train;
      s_inv[j] = s2 > 0.0 ? 1.0 / std::sqrt(s2) : 0.0;
    }
    const Matrix h = s_inv.asDiagonal() * (g_train / n_train) * s_inv.asDiagonal();
    const Vector c = s_inv.asDiagonal() * (c_train / n_train);
    const Matrix path = s_inv.asDiagonal() * fit(h, c, -1);
    const Matrix resid = (x_test * path).colwise() - y_test;
    cv_error += resid.colwise().squaredNorm().transpose() / n_test;
  }
  cv_error /= double(spec.folds);

  Eigen::Index best = 0;
  for (Eigen::Index l = 1; l < grid; ++l)
    if (cv_error[l] < cv_error[best]) best = l;

  const Matrix h = inv.asDiagonal() * (ctx.gram / dn) * inv.asDiagonal();
  const Matrix path = fit(h, c_full, best);
  ModelId out = base;
  for (Eigen::Index j = 0; j < path.rows(); ++j)
    if (path(j, best) != 0.0) out = out.with(ctx.free_columns[j]);
  return out;
}

}  // namespace detail

// A selector bound to a design, with the geometry of every model it can return.
// Copies the design, so it does not depend on the caller's Design lifetime.
class Selector {
 public:
  Selector(Design design, SelectorSpec spec) : design_(std::move(design)), spec_(std::move(spec)) {
    design_.require_full_rank();
    const int prot = design_.protected_index();
    std::vector<ModelId> universe;
    if (auto* s = std::get_if<NestedTTest>(&spec_)) {
      if (design_.p() != 2) throw Error(ErrorCode::usage, "the nested t-test selector needs a design with p = 2");
      if (!(s->c_threshold > 0.0)) throw Error(ErrorCode::domain, "nested threshold C must be positive");
      universe = {ModelId::from_members({prot}), ModelId::from_members({0, 1})};
    } else if (auto* s = std::get_if<Stepwise>(&spec_)) {
      if (!(s->penalty >= 0.0)) throw Error(ErrorCode::domain, "stepwise penalty must be nonnegative");
      universe = ModelCache::enumerate_protected_models(design_);
    } else if (std::holds_alternative<LassoCV>(spec_)) {
      universe = ModelCache::enumerate_protected_models(design_);
      lasso_ = std::make_shared<detail::LassoCvContext>(design_);
    } else if (auto* s = std::get_if<SparVariant>(&spec_)) {
      if (s->universe.empty()) s->universe = ModelCache::enumerate_protected_models(design_);
      std::sort(s->universe.begin(), s->universe.end());
      s->universe.erase(std::unique(s->universe.begin(), s->universe.end()), s->universe.end());
      universe = s->universe;
    } else if (auto* s = std::get_if<FixedModel>(&spec_)) {
      universe = {s->model};
    } else if (auto* s = std::get_if<Custom>(&spec_)) {
      if (!s->rule) throw Error(ErrorCode::usage, "custom selector has no rule");
      universe = s->universe.empty() ? ModelCache::enumerate_protected_models(design_) : s->universe;
    }
    for (const auto& m : universe) {
      design_.check_model(m);
      if (!m.contains(prot) && !std::holds_alternative<Custom>(spec_)) {
        throw Error(ErrorCode::selector, "model " + m.str() + " does not contain the protected column");
      }
    }
    cache_ = ModelCache(design_, universe);
  }

  const Design& design() const { return design_; }
  const SelectorSpec& spec() const { return spec_; }
  const ModelCache& cache() const { return cache_; }
  std::string name() const { return describe(spec_); }

  // `seed` feeds randomized procedures (cross-validation folds); others ignore it.
  ModelId operator()(const Observation& obs, std::uint64_t seed = 0) const {
    const int prot = design_.protected_index();
    if (auto* s = std::get_if<NestedTTest>(&spec_)) {
      const ModelId m2 = ModelId::from_members({0, 1});
      const ModelGeometry& g = cache_[m2];
      const int other = 1 - prot;
      const int pos = m2.position(other);
      const double stat = std::abs(g.coef_map.row(pos).dot(obs.z)) / (obs.sigma_hat * g.unit_se[pos]);
      return stat > s->c_threshold ? m2 : ModelId::from_members({prot});
    }
    if (auto* s = std::get_if<Stepwise>(&spec_)) return stepwise(obs, s->penalty);
    if (auto* s = std::get_if<LassoCV>(&spec_)) return detail::lasso_cv_select(design_, *lasso_, obs.y, *s, seed);
    if (auto* s = std::get_if<SparVariant>(&spec_)) {
      ModelId best;
      double best_stat = -1.0;
      for (const auto& m : s->universe) {
        const ModelGeometry& g = cache_[m];
        const int pos = m.position(prot);
        const double stat = std::abs(g.coef_map.row(pos).dot(obs.z)) / (obs.sigma_hat * g.unit_se[pos]);
        if (stat > best_stat) {
          best_stat = stat;
          best = m;
        }
      }
      return best;
    }
    if (auto* s = std::get_if<FixedModel>(&spec_)) return s->model;
    const auto& custom = std::get<Custom>(spec_);
    const ModelId m = custom.rule(obs, seed);
    if (!cache_.contains(m)) throw Error(ErrorCode::selector, "selector '" + custom.name + "' returned " + m.str() + " outside its universe");
    return m;
  }

  double stepwise_objective(const Observation& obs, const ModelId& m, double penalty) const {
    const double n = double(design_.n());
    return n * std::log(obs.rss(cache_[m]) / n) + penalty * m.size();
  }

 private:
  ModelId stepwise(const Observation& obs, double penalty) const {
    const int prot = design_.protected_index();
    ModelId current = design_.full_model();
    double value = stepwise_objective(obs, current, penalty);
    for (;;) {
      ModelId best = current;
      double best_value = value;
      for (int j = 0; j < design_.p(); ++j) {
        if (j == prot) continue;
        const ModelId next = current.contains(j) ? current.without(j) : current.with(j);
        const double v = stepwise_objective(obs, next, penalty);
        if (v < best_value) {
          best_value = v;
          best = next;
        }
      }
      if (best == current) return current;
      current = best;
      value = best_value;
    }
  }

  Design design_;
  SelectorSpec spec_;
  ModelCache cache_;
  std::shared_ptr<const detail::LassoCvContext> lasso_;
};

// --- one-shot convenience wrappers ----------------------------------------------

inline ModelId select_nested(const Design& design, const Vector& y, double sigma_hat, double c_threshold) {
  const Selector sel(design, NestedTTest{c_threshold});
  return sel(Observation::make(design, y, sigma_hat));
}

inline ModelId select_stepwise(const Design& design, const Vector& y, double sigma_hat, double penalty) {
  const Selector sel(design, Stepwise{penalty});
  return sel(Observation::make(design, y, sigma_hat));
}

inline ModelId select_lasso_cv(const Design& design, const Vector& y, int folds, std::uint64_t seed) {
  LassoCV spec;
  spec.folds = folds;
  if (y.size() != design.n()) throw Error(ErrorCode::domain, "response length does not match design rows");
  const detail::LassoCvContext ctx(design);
  return detail::lasso_cv_select(design, ctx, y, spec, seed);
}

inline ModelId select_spar_variant(const Design& design, const Vector& y, double sigma_hat,
                                   std::vector<ModelId> universe = {}) {
  const Selector sel(design, SparVariant{std::move(universe)});
  return sel(Observation::make(design, y, sigma_hat));
}

}  // namespace posi
