#pragma once

// Run configuration: a flat set of typed fields grouped into INI sections.
// Every field round-trips through its string form, which is what the config
// file, the command-line overrides and the CSV header comments all use.

#include "posi/core.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace posi {

struct RunConfig {
  // [run]
  std::string command = "constants";
  std::uint64_t seed = 1;
  double alpha = 0.05;
  Dof r;
  int threads = 0;
  std::string out;
  bool timing = false;
  // [design]
  std::string design = "nested";  // nested | orthogonal | exchangeable | equicorrelated | csv | gram
  int p = 2;
  long n = 0;                      // 0: p + r, or max(p, 30) with known variance
  double rho = 0.9;
  double a = 10.0;
  std::optional<double> equicorr;  // unset: sqrt(0.8 / (p - 1))
  std::string csv;
  std::string gram;                // "1,0.5;0.5,1"
  int protected_column = 1;
  std::uint64_t embed_seed = 1;
  // [selector]
  std::string selector = "aic,bic,lasso";
  std::string c = "sqrt2";
  // [constants]
  std::string kinds;               // empty: per-command default
  std::size_t draws = 200000;
  std::size_t budget = std::size_t{1} << 20;
  // [exact]
  int figure = 1;
  std::string zeta_grid = "-6:6:241";
  std::string rho_grid = "0:0.99:21";
  // [search]
  std::string stages = "10000x100,1000x1000,1x500000";
  double sigma = 1.0;
  std::string targets = "selected,full";
  std::string checkpoint;
  // [appendix]
  std::size_t rules = 50;
  std::size_t points = 10;
  std::size_t replications = 100000;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string format_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_integer(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    if (v < 0 && std::is_unsigned_v<T>) throw std::out_of_range(s);
    return static_cast<T>(v);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::parse, "invalid integer for " + key + ": '" + s + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::parse, "invalid number for " + key + ": '" + s + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error(ErrorCode::parse, "invalid boolean for " + key + ": '" + s + "'");
}

}  // namespace detail

struct ConfigField {
  std::string section;
  std::string key;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool reproducible = true;  // false: does not affect output bytes (threads, output path)
};

inline const std::vector<ConfigField>& config_fields() {
  using detail::format_exact;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto text = [&](std::string sec, std::string key, std::string help, std::string RunConfig::*m, bool repro = true) {
      f.push_back({sec, key, help, [m](const RunConfig& c) { return c.*m; },
                   [m](RunConfig& c, const std::string& v) { c.*m = v; }, repro});
    };
    auto real = [&](std::string sec, std::string key, std::string help, double RunConfig::*m) {
      f.push_back({sec, key, help, [m](const RunConfig& c) { return format_exact(c.*m); },
                   [m, key](RunConfig& c, const std::string& v) { c.*m = detail::parse_double(key, v); }, true});
    };
    auto integer = [&](std::string sec, std::string key, std::string help, auto RunConfig::*m, bool repro = true) {
      using T = std::remove_reference_t<decltype(std::declval<RunConfig&>().*m)>;
      f.push_back({sec, key, help, [m](const RunConfig& c) { return std::to_string(c.*m); },
                   [m, key](RunConfig& c, const std::string& v) { c.*m = detail::parse_integer<T>(key, v); }, repro});
    };
    text("run", "command", "subcommand: constants, exact, search, validate-appendix", &RunConfig::command);
    integer("run", "seed", "master random seed", &RunConfig::seed);
    real("run", "alpha", "nominal non-coverage level", &RunConfig::alpha);
    f.push_back({"run", "r", "residual degrees of freedom, or inf for known variance",
                 [](const RunConfig& c) { return c.r.str(); }, [](RunConfig& c, const std::string& v) { c.r = Dof::parse(v); }, true});
    integer("run", "threads", "worker threads (0: hardware parallelism)", &RunConfig::threads, false);
    text("run", "out", "output CSV path (default: stdout)", &RunConfig::out, false);
    f.push_back({"run", "timing", "append a wall-time column to search output",
                 [](const RunConfig& c) { return std::string(c.timing ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.timing = detail::parse_bool("timing", v); }, true});

    text("design", "design", "nested, orthogonal, exchangeable, equicorrelated, csv or gram", &RunConfig::design);
    integer("design", "p", "number of columns for built-in designs", &RunConfig::p);
    integer("design", "n", "number of rows (0: automatic)", &RunConfig::n);
    real("design", "rho", "column correlation of the nested design", &RunConfig::rho);
    real("design", "a", "common-component strength of the exchangeable design", &RunConfig::a);
    f.push_back({"design", "equicorr", "correlation of column 1 with each other column of the equicorrelated design (auto: sqrt(0.8/(p-1)))",
                 [](const RunConfig& c) { return c.equicorr ? format_exact(*c.equicorr) : std::string("auto"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "auto" || v.empty()) {
                     c.equicorr.reset();
                   } else {
                     c.equicorr = detail::parse_double("equicorr", v);
                   }
                 },
                 true});
    text("design", "csv", "design matrix file for design=csv", &RunConfig::csv);
    text("design", "gram", "Gram matrix literal for design=gram, rows separated by ';'", &RunConfig::gram);
    integer("design", "protected", "protected column (1-based)", &RunConfig::protected_column);
    integer("design", "embed_seed", "seed of the orthonormal embedding into n-space", &RunConfig::embed_seed);

    text("selector", "selector", "comma-separated selectors: aic, bic, lasso, nested:C, spar, fixed:1+2",
         &RunConfig::selector);
    text("selector", "c", "comma-separated nested-test thresholds (e.g. sqrt2,sqrtlog10)", &RunConfig::c);

    text("constants", "kinds", "comma-separated constant kinds", &RunConfig::kinds);
    integer("constants", "draws", "Monte Carlo draws for PoSI constants", &RunConfig::draws);
    integer("constants", "budget", "maximum number of PoSI directions", &RunConfig::budget);

    integer("exact", "figure", "figure layout: 1 (coverage vs zeta), 2 (minimal coverage vs rho), 3 (constants vs rho)",
            &RunConfig::figure);
    text("exact", "zeta_grid", "zeta grid FROM:TO:COUNT", &RunConfig::zeta_grid);
    text("exact", "rho_grid", "rho grid FROM:TO:COUNT", &RunConfig::rho_grid);

    text("search", "stages", "stage plan CANDIDATESxREPS,...", &RunConfig::stages);
    real("search", "sigma", "error standard deviation used in the search", &RunConfig::sigma);
    text("search", "targets", "comma-separated coverage targets: selected, full", &RunConfig::targets);
    text("search", "checkpoint", "checkpoint file for resumable searches", &RunConfig::checkpoint, false);

    integer("appendix", "rules", "number of random threshold selectors", &RunConfig::rules);
    integer("appendix", "points", "parameter points per selector", &RunConfig::points);
    integer("appendix", "replications", "Monte Carlo replications per point", &RunConfig::replications);
    return f;
  }();
  return fields;
}

inline const ConfigField& config_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw Error(ErrorCode::parse, "unknown configuration key '" + key + "'");
}

// INI text; with `reproducible_only` the fields that do not change output
// bytes (threads, output and checkpoint paths) are left out.
inline std::string serialize_config(const RunConfig& cfg, bool reproducible_only = false) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : config_fields()) {
    if (reproducible_only && !f.reproducible) continue;
    if (f.section != section) {
      if (!section.empty()) out << "\n";
      section = f.section;
      out << "[" << section << "]\n";
    }
    out << f.key << " = " << f.get(cfg) << "\n";
  }
  return out.str();
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorCode::parse, std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw Error(ErrorCode::parse, "config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const ConfigField& f = config_field(key);
      if (f.section != section) throw Error(ErrorCode::parse, "config: key '" + key + "' belongs in section [" + f.section + "]");
      f.set(base, value.data());
    }
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

}  // namespace posi
