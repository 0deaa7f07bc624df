#pragma once

// Fixed regressor matrices, submodel least-squares geometry and the
// projection quantities (beta_M, sigma-hat_{j.M}, rho) used everywhere else.

#include "posi/core.hpp"
#include "posi/random.hpp"

#include <charconv>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace posi {

inline constexpr double kRankTolerance = 1e-10;

namespace detail {

// True when every |R_ii| exceeds kRankTolerance times the largest one.
inline bool triangular_full_rank(const Matrix& r) {
  const Eigen::Index k = std::min(r.rows(), r.cols());
  if (k == 0) return false;
  const double largest = r.diagonal().head(k).cwiseAbs().maxCoeff();
  if (!(largest > 0.0)) return false;
  return r.diagonal().head(k).cwiseAbs().minCoeff() >= kRankTolerance * largest;
}

inline Matrix select_columns(const Matrix& x, const std::vector<int>& cols) {
  Matrix out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = x.col(cols[k]);
  return out;
}

}  // namespace detail

class Design {
 public:
  explicit Design(Matrix x, int protected_index = 0, std::vector<std::string> labels = {})
      : x_(std::move(x)), protected_(protected_index), labels_(std::move(labels)) {
    if (x_.rows() < 1 || x_.cols() < 1) throw Error(ErrorCode::domain, "design needs n >= 1 and p >= 1");
    if (x_.cols() > ModelId::kMaxColumns) {
      throw Error(ErrorCode::domain, "designs are limited to " + std::to_string(ModelId::kMaxColumns) + " columns");
    }
    if (protected_ < 0 || protected_ >= x_.cols()) {
      throw Error(ErrorCode::domain, "protected column " + std::to_string(protected_ + 1) + " out of range");
    }
    if (!labels_.empty() && static_cast<Eigen::Index>(labels_.size()) != x_.cols()) {
      throw Error(ErrorCode::parse, "column label count does not match the number of columns");
    }
    gram_ = x_.transpose() * x_;

    Eigen::ColPivHouseholderQR<Matrix> piv(x_);
    piv.setThreshold(kRankTolerance);
    rank_ = static_cast<int>(piv.rank());

    if (x_.rows() >= x_.cols()) {
      Eigen::HouseholderQR<Matrix> qr(x_);
      Matrix r = qr.matrixQR().topRows(x_.cols()).triangularView<Eigen::Upper>();
      if (detail::triangular_full_rank(r)) {
        Matrix q = qr.householderQ() * Matrix::Identity(x_.rows(), x_.cols());
        // Positive diagonal makes R the (unique) Cholesky factor of the Gram.
        for (Eigen::Index j = 0; j < r.rows(); ++j) {
          if (r(j, j) < 0.0) {
            r.row(j) *= -1.0;
            q.col(j) *= -1.0;
          }
        }
        basis_ = std::move(q);
        r_ = std::move(r);
      }
    }
  }

  Eigen::Index n() const { return x_.rows(); }
  Eigen::Index p() const { return x_.cols(); }
  const Matrix& x() const { return x_; }
  const Matrix& gram() const { return gram_; }
  int protected_index() const { return protected_; }
  const std::vector<std::string>& labels() const { return labels_; }
  int rank() const { return rank_; }
  bool full_rank() const { return basis_.has_value(); }

  Design with_protected(int j) const { return Design(x_, j, labels_); }

  ModelId full_model() const {
    return ModelId::from_mask(p() == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << p()) - 1);
  }

  // Registration check: members in range, 1 <= |M| <= n, X_M of full column rank.
  void check_model(const ModelId& m) const {
    if (m.empty()) throw Error(ErrorCode::domain, "model must be nonempty");
    const auto members = m.members();
    if (members.back() >= p()) throw Error(ErrorCode::domain, "model " + m.str() + " references a column beyond p");
    if (static_cast<Eigen::Index>(members.size()) > n()) {
      throw Error(ErrorCode::rank, "model " + m.str() + " has more columns than observations");
    }
    Eigen::HouseholderQR<Matrix> qr(detail::select_columns(x_, members));
    Matrix r = qr.matrixQR().topRows(static_cast<Eigen::Index>(members.size())).triangularView<Eigen::Upper>();
    if (!detail::triangular_full_rank(r)) throw Error(ErrorCode::rank, "model " + m.str() + " is rank deficient");
  }

  void require_full_rank() const {
    if (!full_rank()) check_model(full_model());
  }

  // Orthonormal basis Q (n x p) of the column space with X = Q R.
  const Matrix& basis() const {
    require_full_rank();
    return *basis_;
  }
  // Upper-triangular R (p x p) with positive diagonal, R'R = X'X.
  const Matrix& r_factor() const {
    require_full_rank();
    return *r_;
  }

 private:
  Matrix x_;
  int protected_;
  std::vector<std::string> labels_;
  Matrix gram_;
  int rank_ = 0;
  std::optional<Matrix> basis_;
  std::optional<Matrix> r_;
};

// --- construction --------------------------------------------------------------

// n x p matrix with orthonormal columns (Gram-Schmidt of i.i.d. Gaussian columns).
inline Matrix random_orthonormal(Eigen::Index n, Eigen::Index p, std::uint64_t seed) {
  if (n < p) throw Error(ErrorCode::domain, "orthonormal embedding needs n >= p");
  Draws draws(substream(seed, {0x6f7274686fULL}));
  Matrix g(n, p);
  for (Eigen::Index j = 0; j < p; ++j) draws.fill_normal(g.col(j));
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    if (qr.matrixQR()(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q;
}

// Design whose Gram matrix is `gram`. Without an embedding seed the Cholesky
// factor is padded with zero rows; with one it is rotated into n-space by a
// random orthonormal embedding.
inline Design build_design_from_gram(const Matrix& gram, Eigen::Index n, std::optional<std::uint64_t> embed_seed = {},
                                     int protected_index = 0) {
  if (gram.rows() != gram.cols() || gram.rows() < 1) throw Error(ErrorCode::domain, "gram must be square and nonempty");
  if (!gram.isApprox(gram.transpose(), 1e-12)) throw Error(ErrorCode::domain, "gram not symmetric");
  const Eigen::Index p = gram.rows();
  if (n < p) throw Error(ErrorCode::domain, "need n >= p (n=" + std::to_string(n) + ", p=" + std::to_string(p) + ")");
  Eigen::LLT<Matrix> llt(gram);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::domain, "gram not positive definite");
  const Matrix upper = llt.matrixU();
  Matrix x = Matrix::Zero(n, p);
  if (embed_seed) {
    x = random_orthonormal(n, p, *embed_seed) * upper;
  } else {
    x.topRows(p) = upper;
  }
  return Design(std::move(x), protected_index);
}

// Columns e_j + a * 1_p in p-space, embedded orthonormally into n-space.
inline Design exchangeable_design(int p, double a, Eigen::Index n, std::uint64_t embed_seed = 1) {
  if (p < 2) throw Error(ErrorCode::domain, "exchangeable design needs p >= 2");
  if (n < p) throw Error(ErrorCode::domain, "exchangeable design needs n >= p");
  // det(I + a 11') = 1 + p a
  if (std::abs(1.0 + p * a) < 1e-12) throw Error(ErrorCode::domain, "exchangeable design is singular for a = -1/p");
  Matrix core = Matrix::Identity(p, p) + Matrix::Constant(p, p, a);
  return Design(random_orthonormal(n, p, embed_seed) * core);
}

// Columns 2..p orthonormal; column 1 has unit norm and correlation c with each of them.
inline Design equicorrelated_design(int p, double c, Eigen::Index n, std::uint64_t embed_seed = 1) {
  if (p < 2) throw Error(ErrorCode::domain, "equicorrelated design needs p >= 2");
  if (!((p - 1) * c * c < 1.0)) {
    throw Error(ErrorCode::domain, "equicorrelation c must satisfy (p-1) c^2 < 1 for a positive definite gram");
  }
  Matrix gram = Matrix::Identity(p, p);
  gram.row(0).tail(p - 1).setConstant(c);
  gram.col(0).tail(p - 1).setConstant(c);
  return build_design_from_gram(gram, n, embed_seed);
}

// Two-column design whose columns have inner-product correlation rho.
inline Design nested_design(double rho, Eigen::Index n = 2, std::optional<std::uint64_t> embed_seed = {}) {
  if (!(std::abs(rho) < 1.0)) throw Error(ErrorCode::domain, "rho must lie in (-1, 1)");
  Matrix gram(2, 2);
  gram << 1.0, rho, rho, 1.0;
  return build_design_from_gram(gram, n, embed_seed);
}

// Comma-separated numeric file; a first row with any non-numeric cell is a header.
inline Design load_design_csv(const std::string& path, int protected_index = 0) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open design file '" + path + "'");

  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t\r\"");
      const auto e = cell.find_last_not_of(" \t\r\"");
      cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  auto to_number = [](const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
  };

  std::vector<std::string> labels;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line);
    std::vector<double> values(cells.size());
    bool numeric = true;
    for (std::size_t k = 0; k < cells.size(); ++k) numeric = numeric && to_number(cells[k], values[k]);

    if (rows.empty() && labels.empty() && !numeric) {
      labels = cells;
      width = cells.size();
      continue;
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw Error(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": expected " + std::to_string(width) +
                                        " cells, found " + std::to_string(cells.size()));
    }
    if (!numeric) {
      for (std::size_t k = 0; k < cells.size(); ++k) {
        double v;
        if (!to_number(cells[k], v)) {
          throw Error(ErrorCode::parse, path + ":" + std::to_string(line_no) + ": non-numeric cell '" + cells[k] +
                                            "' in column " + std::to_string(k + 1));
        }
      }
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw Error(ErrorCode::parse, path + ": no data rows");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto p = static_cast<Eigen::Index>(width);
  if (n < p) throw Error(ErrorCode::parse, path + ": fewer rows (" + std::to_string(n) + ") than columns");
  Matrix x(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return Design(std::move(x), protected_index, std::move(labels));
}

// --- submodel fits -------------------------------------------------------------

struct SubmodelFit {
  ModelId model;
  Vector beta_hat;     // indexed by position in model.members()
  Vector sigma_hat_j;  // sigma-hat * sqrt([(X_M'X_M)^{-1}]_jj)
  double rss = 0.0;

  double coefficient(int column) const { return beta_hat[model.position(column)]; }
  double sigma_of(int column) const { return sigma_hat_j[model.position(column)]; }
};

// Least-squares fit of y on X_M through a Householder QR of X_M.
inline SubmodelFit fit_submodel(const Design& design, const Vector& y, const ModelId& m, double sigma_hat) {
  if (y.size() != design.n()) throw Error(ErrorCode::domain, "response length does not match design rows");
  if (!(sigma_hat > 0.0)) throw Error(ErrorCode::domain, "sigma_hat must be positive");
  design.check_model(m);
  const Matrix xm = detail::select_columns(design.x(), m.members());
  Eigen::HouseholderQR<Matrix> qr(xm);
  const Eigen::Index k = xm.cols();
  const Matrix r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const Vector qty = (qr.householderQ().transpose() * y).head(k);
  SubmodelFit fit;
  fit.model = m;
  fit.beta_hat = r.triangularView<Eigen::Upper>().solve(qty);
  const Matrix r_inv = r.triangularView<Eigen::Upper>().solve(Matrix::Identity(k, k));
  fit.sigma_hat_j = sigma_hat * r_inv.rowwise().norm();
  fit.rss = (y - xm * fit.beta_hat).squaredNorm();
  return fit;
}

// beta_M = (X_M'X_M)^{-1} X_M' mu.
inline Vector target_coefficients(const Design& design, const Vector& mu, const ModelId& m) {
  return fit_submodel(design, mu, m, 1.0).beta_hat;
}

// rho = -[(X'X)^{-1}]_12 / sqrt([(X'X)^{-1}]_11 [(X'X)^{-1}]_22) for a two-column design.
inline double rho_two_model(const Design& design) {
  if (design.p() != 2) throw Error(ErrorCode::usage, "rho_two_model needs a design with p = 2");
  design.require_full_rank();
  const Matrix inv = design.gram().inverse();
  return -inv(0, 1) / std::sqrt(inv(0, 0) * inv(1, 1));
}

// --- cached geometry for Monte Carlo loops ----------------------------------------

// Least-squares quantities of one submodel expressed in the coordinates
// z = Q'y of the design's column space.
struct ModelGeometry {
  ModelId model;
  Matrix coef_map;   // |M| x p, beta-hat_M = coef_map * z
  Matrix projector;  // |M| x p with orthonormal rows, ||P_M y||^2 = ||projector * z||^2
  Vector unit_se;    // sqrt([(X_M'X_M)^{-1}]_jj)

  static ModelGeometry build(const Design& design, const ModelId& m) {
    if (m.empty() || m.members().back() >= design.p()) throw Error(ErrorCode::domain, "model " + m.str() + " out of range");
    const Matrix& r = design.r_factor();
    const Matrix rm = detail::select_columns(r, m.members());
    Eigen::HouseholderQR<Matrix> qr(rm);
    const Eigen::Index k = rm.cols();
    const Matrix t = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    if (!detail::triangular_full_rank(t)) throw Error(ErrorCode::rank, "model " + m.str() + " is rank deficient");
    const Matrix qm = qr.householderQ() * Matrix::Identity(rm.rows(), k);
    const Matrix t_inv = t.triangularView<Eigen::Upper>().solve(Matrix::Identity(k, k));
    ModelGeometry g;
    g.model = m;
    g.projector = qm.transpose();
    g.coef_map = t_inv * g.projector;
    g.unit_se = t_inv.rowwise().norm();
    return g;
  }

  // Unit vector (in z-coordinates) of the contrast defining beta-hat_{j.M}.
  Vector direction(int column) const {
    const int pos = model.position(column);
    Vector v = coef_map.row(pos).transpose();
    return v / v.norm();
  }
};

// Immutable table of ModelGeometry, safe to share across threads.
class ModelCache {
 public:
  ModelCache() = default;
  ModelCache(const Design& design, std::span<const ModelId> models) {
    design.require_full_rank();
    for (const auto& m : models) {
      if (!table_.contains(m.mask())) table_.emplace(m.mask(), ModelGeometry::build(design, m));
    }
  }

  // Every model that contains the protected column (2^(p-1) of them).
  static ModelCache protected_models(const Design& design, int max_free_columns = 20) {
    const int free = static_cast<int>(design.p()) - 1;
    if (free > max_free_columns) {
      throw Error(ErrorCode::budget, "enumerating 2^" + std::to_string(free) + " submodels exceeds the budget");
    }
    return ModelCache(design, enumerate_protected_models(design));
  }

  static std::vector<ModelId> enumerate_protected_models(const Design& design) {
    const int p = static_cast<int>(design.p());
    const int prot = design.protected_index();
    std::vector<int> free;
    for (int j = 0; j < p; ++j)
      if (j != prot) free.push_back(j);
    std::vector<ModelId> out;
    const std::uint64_t count = std::uint64_t{1} << free.size();
    out.reserve(count);
    for (std::uint64_t s = 0; s < count; ++s) {
      std::uint64_t mask = std::uint64_t{1} << prot;
      for (std::size_t k = 0; k < free.size(); ++k)
        if ((s >> k) & 1u) mask |= std::uint64_t{1} << free[k];
      out.push_back(ModelId::from_mask(mask));
    }
    return out;
  }

  bool contains(const ModelId& m) const { return table_.contains(m.mask()); }
  const ModelGeometry& operator[](const ModelId& m) const {
    auto it = table_.find(m.mask());
    if (it == table_.end()) throw Error(ErrorCode::selector, "model " + m.str() + " is not in the registered universe");
    return it->second;
  }
  std::size_t size() const { return table_.size(); }

 private:
  std::unordered_map<std::uint64_t, ModelGeometry> table_;
};

// One data set y seen through the design's column space.
struct Observation {
  Vector y;
  Vector z;  // Q'y
  double rss_full = 0.0;
  double sigma_hat = 1.0;

  static Observation make(const Design& design, Vector y, double sigma_hat) {
    Observation o;
    o.z = design.basis().transpose() * y;
    o.rss_full = (y - design.basis() * o.z).squaredNorm();
    o.y = std::move(y);
    o.sigma_hat = sigma_hat;
    return o;
  }

  double rss(const ModelGeometry& g) const {
    const double explained = (g.projector * z).squaredNorm();
    return std::max(0.0, rss_full + z.squaredNorm() - explained);
  }
  Vector beta_hat(const ModelGeometry& g) const { return g.coef_map * z; }
};

}  // namespace posi
