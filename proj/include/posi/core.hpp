#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace posi {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Stable error categories. The CLI maps these onto exit codes.
enum class ErrorCode : int {
  usage = 2,
  parse = 3,
  io = 4,
  rank = 5,
  domain = 6,
  convergence = 7,
  budget = 8,
  selector = 9,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::usage: return "usage";
    case ErrorCode::parse: return "parse";
    case ErrorCode::io: return "io";
    case ErrorCode::rank: return "rank";
    case ErrorCode::domain: return "domain";
    case ErrorCode::convergence: return "convergence";
    case ErrorCode::budget: return "budget";
    case ErrorCode::selector: return "selector";
  }
  return "unknown";
}

// Degrees of freedom of the variance estimator; `known()` is the r = infinity case
// where sigma-hat equals sigma.
class Dof {
 public:
  constexpr Dof() = default;
  explicit Dof(int r) : r_(r) {
    if (r < 1) throw Error(ErrorCode::domain, "degrees of freedom must be >= 1, got " + std::to_string(r));
  }
  static constexpr Dof known() { return Dof(); }

  constexpr bool is_known() const { return r_ == 0; }
  int value() const {
    if (is_known()) throw Error(ErrorCode::usage, "known-variance mode has no finite degrees of freedom");
    return r_;
  }
  double as_double() const { return is_known() ? kInf : static_cast<double>(r_); }
  std::string str() const { return is_known() ? "inf" : std::to_string(r_); }

  static Dof parse(const std::string& s) {
    if (s == "inf" || s == "Inf" || s == "infinity" || s == "known") return known();
    try {
      std::size_t used = 0;
      int r = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return Dof(r);
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::parse, "invalid degrees of freedom '" + s + "'");
    }
  }

  friend constexpr bool operator==(const Dof&, const Dof&) = default;

 private:
  int r_ = 0;
};

// A nonempty set of column indices (0-based internally, printed 1-based).
// Limited to 64 columns, which covers every enumerable universe anyway.
class ModelId {
 public:
  static constexpr int kMaxColumns = 64;

  constexpr ModelId() = default;

  static ModelId from_mask(std::uint64_t mask) {
    ModelId m;
    m.bits_ = mask;
    return m;
  }

  static ModelId from_members(const std::vector<int>& members) {
    std::uint64_t mask = 0;
    for (int j : members) {
      if (j < 0 || j >= kMaxColumns) throw Error(ErrorCode::domain, "column index out of range: " + std::to_string(j + 1));
      mask |= std::uint64_t{1} << j;
    }
    return from_mask(mask);
  }

  static ModelId from_members(std::initializer_list<int> members) { return from_members(std::vector<int>(members)); }

  // Parses "1,2,5", "1+2+5" or "{1,2,5}" (1-based).
  static ModelId parse(std::string s) {
    std::erase_if(s, [](char c) { return c == '{' || c == '}' || c == ' ' || c == '"'; });
    std::vector<int> members;
    std::size_t pos = 0;
    while (pos < s.size()) {
      std::size_t next = s.find_first_of(",;+", pos);
      std::string tok = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      try {
        std::size_t used = 0;
        int j = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        members.push_back(j - 1);
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::parse, "invalid model member '" + tok + "'");
      }
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    if (members.empty()) throw Error(ErrorCode::parse, "empty model");
    return from_members(members);
  }

  constexpr std::uint64_t mask() const { return bits_; }
  constexpr bool empty() const { return bits_ == 0; }
  int size() const { return std::popcount(bits_); }
  bool contains(int j) const { return j >= 0 && j < kMaxColumns && ((bits_ >> j) & 1u); }

  std::vector<int> members() const {
    std::vector<int> out;
    out.reserve(size());
    for (std::uint64_t b = bits_; b != 0; b &= b - 1) out.push_back(std::countr_zero(b));
    return out;
  }

  // Position of column j within members(), or -1.
  int position(int j) const {
    if (!contains(j)) return -1;
    return std::popcount(bits_ & ((std::uint64_t{1} << j) - 1));
  }

  ModelId with(int j) const { return from_mask(bits_ | (std::uint64_t{1} << j)); }
  ModelId without(int j) const { return from_mask(bits_ & ~(std::uint64_t{1} << j)); }

  std::string str() const {
    std::string s = "{";
    bool first = true;
    for (int j : members()) {
      if (!first) s += ",";
      s += std::to_string(j + 1);
      first = false;
    }
    return s + "}";
  }

  friend constexpr bool operator==(const ModelId&, const ModelId&) = default;

  // Smaller models first, then lexicographic member order.
  friend bool operator<(const ModelId& a, const ModelId& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a.members() < b.members();
  }

 private:
  std::uint64_t bits_ = 0;
};

}  // namespace posi
