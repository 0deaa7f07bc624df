#pragma once

// LASSO over a descending lambda grid by exact path following with cyclic
// coordinate descent as fallback, run in covariance form so that
// cross-validation folds can reuse Gram matrices instead of touching rows again.

#include "posi/core.hpp"

#include <cmath>
#include <vector>
#include <string>

namespace posi {

struct LassoOptions {
  bool standardize = true;        // scale columns to ||x_j||^2 = n before fitting
  double kkt_tolerance = 1e-9;    // stop once every KKT condition holds to this
  int max_sweeps = 100000;
};

struct LassoPath {
  Vector lambdas;
  Matrix coefficients;  // p x L, on the original column scale
};

namespace detail {

inline double soft_threshold(double x, double lambda) {
  if (x > lambda) return x - lambda;
  if (x < -lambda) return x + lambda;
  return 0.0;
}

// Largest KKT violation of 0.5 b'Hb - c'b + lambda |b|_1 given gradient g = c - Hb.
inline double kkt_violation(const Vector& b, const Vector& g, double lambda) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    const double v = b[j] != 0.0 ? std::abs(g[j] - std::copysign(lambda, b[j])) : std::max(0.0, std::abs(g[j]) - lambda);
    worst = std::max(worst, v);
  }
  return worst;
}

// On a fixed support A with signs s the minimizer is linear in lambda:
// b_A = u - lambda v with u = H_AA^{-1} c_A and v = H_AA^{-1} s_A, and the
// gradient is g = gu + lambda gv. A piece stays valid over the lambda range
// where signs hold and every inactive |g_j| stays below lambda.
struct LinearPiece {
  std::vector<Eigen::Index> active;
  Vector u, v, gu, gv;
  bool valid = false;

  // Builds the piece for the support and signs of `current`; false when
  // H_AA is singular.
  bool build(const Matrix& h, const Vector& c, const Vector& current) {
    active.clear();
    for (Eigen::Index j = 0; j < current.size(); ++j)
      if (current[j] != 0.0) active.push_back(j);
    const auto k = static_cast<Eigen::Index>(active.size());
    const Eigen::Index p = current.size();
    u = Vector::Zero(p);
    v = Vector::Zero(p);
    if (k > 0) {
      Matrix haa(k, k);
      Vector ca(k);
      Vector sa(k);
      for (Eigen::Index a = 0; a < k; ++a) {
        ca[a] = c[active[a]];
        sa[a] = current[active[a]] > 0.0 ? 1.0 : -1.0;
        for (Eigen::Index b = 0; b < k; ++b) haa(a, b) = h(active[a], active[b]);
      }
      Eigen::LLT<Matrix> llt(haa);
      if (llt.info() != Eigen::Success) return valid = false;
      const Vector ua = llt.solve(ca);
      const Vector va = llt.solve(sa);
      for (Eigen::Index a = 0; a < k; ++a) {
        u[active[a]] = ua[a];
        v[active[a]] = va[a];
      }
    }
    gu = c - h * u;
    gv = h * v;
    return valid = true;
  }

  // b and g at lambda; false when the sign pattern does not hold there.
  bool evaluate(double lambda, const Vector& signs_from, Vector& b, Vector& g) const {
    b = u - lambda * v;
    g = gu + lambda * gv;
    for (Eigen::Index j : active)
      if (b[j] == 0.0 || std::signbit(b[j]) != std::signbit(signs_from[j])) return false;
    return true;
  }
};

}  // namespace detail

namespace detail {

// Largest lambda in (to, at] where the support of `piece` changes; `to` when
// none. An event already due at or above `at` fires at `at`. Sets `hit` to
// the coordinate (or -1) and `sign` to its new sign (0 when it leaves).
inline double next_event(const Matrix& h, const LinearPiece& piece, const Vector& signs, double at, double to, Eigen::Index& hit,
                         double& sign) {
  double next = to;
  hit = -1;
  auto consider = [&](double when, Eigen::Index j, double s) {
    when = std::min(when, at);
    if (when > next) {
      next = when;
      hit = j;
      sign = s;
    }
  };
  for (Eigen::Index j = 0; j < signs.size(); ++j) {
    if (signs[j] != 0.0) {
      if (signs[j] * piece.v[j] < 0.0) consider(piece.u[j] / piece.v[j], j, 0.0);
    } else if (h(j, j) > 0.0) {
      for (double s : {1.0, -1.0})
        if (s * piece.gv[j] < 1.0) consider(s * piece.gu[j] / (1.0 - s * piece.gv[j]), j, s);
    }
  }
  return next;
}

// Follows the piecewise-linear solution from a piece valid at `from` down to
// `to`, switching support at each breakpoint. False when a step fails
// (singular support or too many breakpoints); the caller then falls back.
inline bool follow_pieces(const Matrix& h, const Vector& c, LinearPiece& piece, Vector& signs, double from, double to) {
  double lambda = from;
  for (Eigen::Index step = 0; step < 50 * h.rows() + 50; ++step) {
    Eigen::Index hit = -1;
    double sign = 0.0;
    const double next = next_event(h, piece, signs, lambda, to, hit, sign);
    if (hit < 0) return true;
    signs[hit] = sign;
    if (!piece.build(h, c, signs)) return false;
    lambda = next;
  }
  return false;
}

}  // namespace detail

// Solves min_b 0.5 b'Hb - c'b + lambda |b|_1 along `lambdas` with warm starts.
// H = X'X/n and c = X'y/n on whatever scale the caller chose. Columns with
// H_jj == 0 keep a zero coefficient. Stops early after column `last`.
//
// Between grid values the solution is followed exactly along its linear
// pieces. Whenever that fails to satisfy every KKT condition, cyclic
// coordinate descent runs from the previous solution; after every sweep the
// support and signs of the iterate are tried in an exact solve.
inline Matrix lasso_path_covariance(const Matrix& h, const Vector& c, const Vector& lambdas, const LassoOptions& opts = {},
                                    Eigen::Index last = -1) {
  const Eigen::Index p = h.rows();
  const Eigen::Index count = last < 0 ? lambdas.size() : std::min(last + 1, lambdas.size());
  Matrix out = Matrix::Zero(p, lambdas.size());
  Vector b = Vector::Zero(p);
  Vector g = c;
  Vector tb(p);
  Vector tg(p);
  Vector piece_signs = Vector::Zero(p);
  detail::LinearPiece piece;
  piece.build(h, c, piece_signs);
  double piece_lambda = c.cwiseAbs().maxCoeff();
  for (Eigen::Index l = 0; l < count; ++l) {
    const double lambda = lambdas[l];
    if (piece.valid) {
      detail::LinearPiece walk = piece;
      Vector walk_signs = piece_signs;
      if (lambda >= piece_lambda ||
          detail::follow_pieces(h, c, walk, walk_signs, piece_lambda, lambda)) {
        if (walk.evaluate(lambda, walk_signs, tb, tg) && detail::kkt_violation(tb, tg, lambda) <= opts.kkt_tolerance) {
          piece = std::move(walk);
          piece_signs = walk_signs;
          piece_lambda = std::min(piece_lambda, lambda);
          b = tb;
          g = tg;
          out.col(l) = b;
          continue;
        }
      }
    }
    for (int sweep = 0;; ++sweep) {
      if (detail::kkt_violation(b, g, lambda) <= opts.kkt_tolerance) break;
      detail::LinearPiece trial;
      if (sweep > 0 && trial.build(h, c, b) && trial.evaluate(lambda, b, tb, tg) &&
          detail::kkt_violation(tb, tg, lambda) <= opts.kkt_tolerance) {
        piece = std::move(trial);
        piece_signs = b;
        piece_lambda = lambda;
        b = tb;
        g = tg;
        break;
      }
      if (sweep >= opts.max_sweeps) {
        throw Error(ErrorCode::convergence, "lasso coordinate descent did not converge at lambda index " +
                                                std::to_string(l) + " (lambda=" + std::to_string(lambda) + ")");
      }
      for (Eigen::Index j = 0; j < p; ++j) {
        const double hjj = h(j, j);
        if (hjj <= 0.0) continue;
        const double old = b[j];
        const double fresh = detail::soft_threshold(g[j] + hjj * old, lambda) / hjj;
        if (fresh != old) {
          b[j] = fresh;
          g.noalias() -= h.col(j) * (fresh - old);
        }
      }
      // Refresh the gradient so rounding does not accumulate.
      g.noalias() = c - h * b;
    }
    out.col(l) = b;
  }
  return out;
}

// Breakpoints of the whole LASSO path for 0.5 b'Hb - c'b + lambda |b|_1,
// from lambda_max (b = 0) down to lambda = 0 (least squares). Between
// consecutive knots the solution is linear in lambda. H must be positive definite.
struct LassoKnots {
  std::vector<double> lambdas;
  std::vector<Vector> coefficients;

  // Solution whose L1 norm is `fraction` of the least-squares L1 norm.
  Vector at_fraction(double fraction) const {
    const double target = fraction * coefficients.back().lpNorm<1>();
    for (std::size_t k = 1; k < coefficients.size(); ++k) {
      const double a = coefficients[k - 1].lpNorm<1>();
      const double b = coefficients[k].lpNorm<1>();
      if (target <= b) {
        const double t = b > a ? (target - a) / (b - a) : 1.0;
        return coefficients[k - 1] + t * (coefficients[k] - coefficients[k - 1]);
      }
    }
    return coefficients.back();
  }
};

inline LassoKnots lasso_knots_covariance(const Matrix& h, const Vector& c) {
  const Eigen::Index p = h.rows();
  LassoKnots out;
  Vector signs = Vector::Zero(p);
  detail::LinearPiece piece;
  piece.build(h, c, signs);
  double lambda = c.cwiseAbs().maxCoeff();
  out.lambdas.push_back(lambda);
  out.coefficients.push_back(Vector::Zero(p));
  if (!(lambda > 0.0)) return out;
  for (Eigen::Index step = 0; step < 50 * p + 50; ++step) {
    Eigen::Index hit = -1;
    double sign = 0.0;
    const double next = detail::next_event(h, piece, signs, lambda, 0.0, hit, sign);
    if (next < lambda) {
      out.lambdas.push_back(next);
      out.coefficients.push_back(piece.u - next * piece.v);
    }
    if (hit < 0) return out;
    signs[hit] = sign;
    if (!piece.build(h, c, signs)) throw Error(ErrorCode::rank, "lasso path: singular active set at lambda=" + std::to_string(next));
    lambda = next;
  }
  throw Error(ErrorCode::convergence, "lasso path: too many breakpoints");
}

// Column scales s_j = ||x_j|| / sqrt(n); zero columns get scale 0.
inline Vector lasso_column_scales(const Matrix& x) { return x.colwise().norm().transpose() / std::sqrt(double(x.rows())); }

inline double lasso_lambda_max(const Matrix& x, const Vector& y, bool standardize = true) {
  Vector scores = x.transpose() * y / double(x.rows());
  if (standardize) {
    const Vector s = lasso_column_scales(x);
    for (Eigen::Index j = 0; j < scores.size(); ++j) scores[j] = s[j] > 0.0 ? (1.0 / s[j]) * scores[j] : 0.0;
  }
  return scores.cwiseAbs().maxCoeff();
}

// `size` log-spaced values from lambda_max down to lambda_max * min_ratio.
inline Vector lambda_grid(double lambda_max, int size, double min_ratio = 1e-3) {
  if (size < 1) throw Error(ErrorCode::domain, "lambda grid needs at least one value");
  if (!(lambda_max > 0.0)) throw Error(ErrorCode::domain, "lambda_max must be positive");
  Vector grid(size);
  if (size == 1) {
    grid[0] = lambda_max;
    return grid;
  }
  const double step = std::log(min_ratio) / (size - 1);
  for (int i = 0; i < size; ++i) grid[i] = lambda_max * std::exp(step * i);
  return grid;
}

// For each lambda, the minimizer of (1/(2n))||y - X b||^2 + lambda ||b||_1.
// With standardization the penalty applies to coefficients of the rescaled
// columns x_j / s_j; returned coefficients are mapped back to the original scale.
inline LassoPath lasso_path(const Matrix& x, const Vector& y, const Vector& lambdas, const LassoOptions& opts = {}) {
  if (x.rows() != y.size()) throw Error(ErrorCode::domain, "lasso_path: x and y disagree on the number of rows");
  for (Eigen::Index l = 0; l < lambdas.size(); ++l) {
    if (!(lambdas[l] > 0.0)) throw Error(ErrorCode::domain, "lasso_path: lambdas must be positive");
    if (l > 0 && !(lambdas[l] < lambdas[l - 1])) throw Error(ErrorCode::domain, "lasso_path: lambdas must be strictly descending");
  }
  const double n = double(x.rows());
  Vector scale = Vector::Ones(x.cols());
  if (opts.standardize) scale = lasso_column_scales(x);
  Vector inv = Vector::Zero(x.cols());
  for (Eigen::Index j = 0; j < inv.size(); ++j) inv[j] = scale[j] > 0.0 ? 1.0 / scale[j] : 0.0;

  const Matrix h = inv.asDiagonal() * (x.transpose() * x / n) * inv.asDiagonal();
  const Vector c = inv.asDiagonal() * (x.transpose() * y / n);
  LassoPath path;
  path.lambdas = lambdas;
  path.coefficients = inv.asDiagonal() * lasso_path_covariance(h, c, lambdas, opts);
  return path;
}

}  // namespace posi
