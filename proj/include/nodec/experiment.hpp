#pragma once

// Config registry, seeded experiment pipelines and CSV emission for the
// oscillator and epidemic studies.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nodec/nodec.hpp"

#ifndef NODEC_VERSION
#define NODEC_VERSION "0.1.0"
#endif

namespace nodec::exp {

namespace fs = std::filesystem;

/// Invalid or incomplete configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Experiment { kuramoto, sir };

struct KeySpec {
  const char* key;
  const char* kuramoto;  // default for the oscillator study, nullptr = required
  const char* sir;       // default for the epidemic study
  const char* help;
};

// Defaults follow the full-size setups; desk presets in configs/ override.
inline const std::vector<KeySpec>& key_registry() {
  static const std::vector<KeySpec> keys = {
      {"experiment", nullptr, nullptr, "kuramoto | sir"},
      {"seed", "1", "1", "master seed; every random stream derives from it"},
      {"graph.file", "", "", "optional edge list replacing the generated graph"},
      {"kuramoto.nodes", "1024", "1024", "Erdos-Renyi node count"},
      {"kuramoto.mean_degree", "6", "6", "Erdos-Renyi mean degree"},
      {"kuramoto.coupling", "0.4", "0.4", "coupling constant K"},
      {"kuramoto.omega_bound", "1.7320508075688772", "1.7320508075688772", "natural frequencies ~ U(-a, a)"},
      {"kuramoto.center_omega", "false", "false", "subtract the mean natural frequency"},
      {"kuramoto.margin", "0.1", "0.1", "stability margin epsilon of the feedback gains"},
      {"kuramoto.feedback_scale", "10", "10", "feedback scale zeta"},
      {"kuramoto.hidden", "3,3", "3,3", "MLP hidden widths"},
      {"kuramoto.eval_horizon", "150", "150", "evaluation horizon T"},
      {"kuramoto.eval_samples", "100", "100", "number of evaluation initial states"},
      {"kuramoto.eval_init", "steady", "steady", "steady (within -10% of the steady state) | unit (U[0,1])"},
      {"sir.rows", "32", "32", "lattice rows"},
      {"sir.cols", "32", "32", "lattice columns"},
      {"sir.beta", "6", "6", "infection rate"},
      {"sir.gamma", "1.8", "1.8", "recovery rate"},
      {"sir.budget", "600", "600", "control budget b"},
      {"sir.seed_quadrant", "upper-right", "upper-right", "initially infected quadrant"},
      {"sir.seed_fraction", "0.5", "0.5", "initial infected fraction per seeded node"},
      {"sir.target_quadrant", "lower-left", "lower-left", "target sub-graph quadrant"},
      {"sir.horizon", "auto", "auto", "horizon T, or auto (free mean infection falls below sir.horizon_threshold)"},
      {"sir.horizon_threshold", "1e-3", "1e-3", "mean infection level that ends the auto horizon"},
      {"sir.drivers", "oriented-matching", "oriented-matching", "oriented-matching | matching"},
      {"sir.rounds", "4", "4", "GNN message-passing rounds"},
      {"sir.rnd_per_step", "false", "false", "redraw random controls at every interaction"},
      {"controller.init_seed", "auto", "auto", "weight init seed (auto derives from seed)"},
      {"train.regime", "curriculum", "adaptive", "basic | curriculum | adaptive"},
      {"train.epochs", "200", "200", "epochs"},
      {"train.eta", "0.01", "0.07", "learning rate"},
      {"train.batch", "8", "1", "initial states per epoch (curriculum)"},
      {"train.optimizer", "adam", "adam", "adam | sgd"},
      {"train.step_size", "1", "1", "curriculum window length"},
      {"train.max_horizon", "40", "40", "curriculum cap on T"},
      {"train.tol_ratio", "1.5", "1.5", "adaptive: loss ratio that triggers a restore"},
      {"train.zeta", "0.5", "0.5", "adaptive: learning-rate shrink factor"},
      {"solver.method", "rk4", "rk4", "training solver: euler | rk4"},
      {"solver.step", "0.01", "0.01", "training solver step"},
      {"solver.control_interval", "0.01", "0.01", "training interaction interval"},
      {"eval.method", "rk4", "rk4", "evaluation solver: euler | rk4 | dopri5"},
      {"eval.step", "0.01", "0.001", "evaluation solver step"},
      {"eval.control_interval", "0.01", "0.001", "evaluation interaction interval"},
      {"eval.sample_interval", "0.1", "0.001", "evaluation sample spacing"},
      {"eval.rtol", "1e-6", "1e-6", "dopri5 relative tolerance"},
      {"eval.atol", "1e-8", "1e-8", "dopri5 absolute tolerance"},
      {"eval.controllers", "NODEC,FC", "TCC,NODEC,RND,F", "controllers to evaluate"},
      {"output.trajectories", "first", "first", "first | all | none"},
      {"output.trajectory_stride", "1", "1", "write every k-th stored sample"},
  };
  return keys;
}

inline const KeySpec* find_key(const std::string& key) {
  for (const auto& k : key_registry())
    if (key == k.key) return &k;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Flat key = value configuration with dotted sections.
class Config {
 public:
  /// Parses "key = value" lines; '#' starts a comment. Unknown or repeated
  /// keys are errors reported with their line.
  static Config parse(std::istream& is, const std::string& origin = "<config>") {
    Config c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(lineno) + ": ";
      if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (!find_key(key)) throw ConfigError(where + "unknown key '" + key + "'");
      if (c.values_.count(key)) throw ConfigError(where + "key '" + key + "' set twice");
      c.values_[key] = value;
    }
    if (!c.values_.count("experiment")) throw ConfigError(origin + ": missing required key 'experiment'");
    c.experiment();
    return c;
  }

  static Config load(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("cannot open config file '" + p.string() + "'");
    return parse(is, p.string());
  }

  static Config from_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  void set(const std::string& key, const std::string& value) {
    if (!find_key(key)) throw ConfigError("unknown key '" + key + "'");
    values_[key] = value;
  }

  bool is_set(const std::string& key) const { return values_.count(key) > 0; }

  Experiment experiment() const {
    const auto it = values_.find("experiment");
    if (it == values_.end()) throw ConfigError("missing required key 'experiment'");
    if (it->second == "kuramoto") return Experiment::kuramoto;
    if (it->second == "sir") return Experiment::sir;
    throw ConfigError("experiment: expected kuramoto or sir, got '" + it->second + "'");
  }

  std::string get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError("unknown key '" + key + "'");
    const char* d = experiment() == Experiment::kuramoto ? spec->kuramoto : spec->sir;
    if (!d) throw ConfigError("missing required key '" + key + "'");
    return d;
  }

  double number(const std::string& key) const {
    const std::string v = get(key);
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
  }

  double positive(const std::string& key) const {
    const double v = number(key);
    if (!(v > 0.0)) throw ConfigError(key + ": must be positive");
    return v;
  }

  std::uint64_t count(const std::string& key) const {
    const std::string v = get(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
  }

  bool flag(const std::string& key) const {
    const std::string v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : list(key)) {
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected integers, got '" + s + "'");
      out.push_back(v);
    }
    return out;
  }

  /// Every key with its effective value, sorted; re-parses to the same config.
  std::string resolved() const {
    std::map<std::string, std::string> all;
    for (const auto& k : key_registry()) all[k.key] = get(k.key);
    std::ostringstream os;
    for (const auto& [k, v] : all) os << k << " = " << v << '\n';
    return os.str();
  }

  /// FNV-1a over the sorted resolved pairs; independent of key order.
  std::uint64_t hash() const { return fnv1a(resolved()); }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Seeds and small helpers

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t { s_graph = 1, s_omega, s_init, s_train, s_eval, s_rnd, s_drivers };

inline std::uint64_t init_seed(const Config& c) {
  const std::string v = c.get("controller.init_seed");
  return v == "auto" ? derive_seed(c.count("seed"), s_init) : c.count("controller.init_seed");
}

inline graph::Quadrant parse_quadrant(const std::string& key, const std::string& v) {
  if (v == "upper-left") return graph::Quadrant::upper_left;
  if (v == "upper-right") return graph::Quadrant::upper_right;
  if (v == "lower-left") return graph::Quadrant::lower_left;
  if (v == "lower-right") return graph::Quadrant::lower_right;
  throw ConfigError(key + ": expected upper-left, upper-right, lower-left or lower-right, got '" + v + "'");
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::runtime_error("not a number: '" + s + "'");
  return v;
}

inline ode::SolveConfig train_solver(const Config& c) {
  ode::SolveConfig s;
  s.method = ode::parse_method(c.get("solver.method"));
  if (s.method == ode::Method::dopri5) throw ConfigError("solver.method: dopri5 is evaluation-only");
  s.step = c.positive("solver.step");
  s.control_interval = c.positive("solver.control_interval");
  s.sample_interval = s.control_interval;
  return s;
}

inline ode::SolveConfig eval_solver(const Config& c) {
  ode::SolveConfig s;
  try {
    s.method = ode::parse_method(c.get("eval.method"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("eval.method: ") + e.what());
  }
  s.step = c.positive("eval.step");
  s.control_interval = c.positive("eval.control_interval");
  s.sample_interval = c.positive("eval.sample_interval");
  s.rtol = c.positive("eval.rtol");
  s.atol = c.positive("eval.atol");
  return s;
}

inline train::TrainConfig train_config(const Config& c) {
  train::TrainConfig t;
  t.epochs = c.count("train.epochs");
  t.eta = c.positive("train.eta");
  t.batch = c.count("train.batch");
  if (t.batch == 0) throw ConfigError("train.batch: must be >= 1");
  try {
    t.optimizer = train::parse_optimizer(c.get("train.optimizer"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train.optimizer: ") + e.what());
  }
  t.step_size = c.positive("train.step_size");
  t.max_horizon = c.positive("train.max_horizon");
  t.tol_ratio = c.positive("train.tol_ratio");
  t.zeta = c.positive("train.zeta");
  if (t.zeta >= 1.0) throw ConfigError("train.zeta: must lie in (0, 1)");
  t.seed = derive_seed(c.count("seed"), s_train);
  return t;
}

// ---------------------------------------------------------------------------
// Setups

struct KuramotoSetup {
  graph::Graph graph;
  std::vector<double> omega;
  std::vector<double> steady;
  graph::DriverMap drivers;
  dyn::KuramotoSystem system;
};

inline graph::Graph load_graph_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("graph.file: cannot open '" + path + "'");
  return graph::read_edge_list(is);
}

inline KuramotoSetup build_kuramoto(const Config& c) {
  KuramotoSetup s;
  const std::uint64_t seed = c.count("seed");
  const std::string file = c.get("graph.file");
  if (!file.empty()) {
    s.graph = load_graph_file(file);
  } else {
    const std::size_t n = c.count("kuramoto.nodes");
    if (n < 2) throw ConfigError("kuramoto.nodes: need at least 2 nodes");
    const double d = c.positive("kuramoto.mean_degree");
    s.graph = graph::erdos_renyi(n, std::min(1.0, d / static_cast<double>(n - 1)), derive_seed(seed, s_graph));
  }
  const double k = c.positive("kuramoto.coupling");
  const double a = c.positive("kuramoto.omega_bound");
  Rng rng(derive_seed(seed, s_omega));
  s.omega.resize(s.graph.size());
  for (auto& w : s.omega) w = rng.uniform(-a, a);
  if (c.flag("kuramoto.center_omega")) {
    double m = 0.0;
    for (double w : s.omega) m += w;
    m /= static_cast<double>(s.omega.size());
    for (auto& w : s.omega) w -= m;
  }
  s.steady = graph::steady_state(s.graph, k, s.omega);
  const double margin = c.number("kuramoto.margin");
  if (margin < 0.0) throw ConfigError("kuramoto.margin: must be non-negative");
  s.drivers = graph::kuramoto_gains(s.graph, k, s.steady, margin);
  if (s.drivers.empty()) throw ConfigError("kuramoto: the feedback gains select no driver nodes");
  s.system = dyn::KuramotoSystem(s.graph, k, s.omega, s.drivers);
  return s;
}

struct SirSetup {
  graph::Graph graph;
  graph::DriverMap drivers;
  dyn::SirSystem system;
  ad::Tensor x0;
  std::vector<std::size_t> targets;
  double horizon = 0.0;
};

/// Time at which the uncontrolled mean infection over all nodes first drops
/// below `threshold` after its peak, on a grid of 0.01.
inline double free_horizon(const dyn::SirSystem& sys, const ad::Tensor& x0, double threshold) {
  const std::size_t n = sys.nodes();
  ode::Rhs rhs = [&sys](double, const ad::Var& x, const ad::Var& u) { return dyn::sir_rhs(x, u, sys); };
  const ad::Var zero = ad::constant(ad::Tensor(ad::Shape{sys.drivers.size()}, 0.0));
  ode::ControlFn none = [zero](double, const ad::Var&) { return zero; };
  ode::SolveConfig sc;
  sc.method = ode::Method::rk4;
  sc.step = 1e-3;
  sc.control_interval = 0.01;
  sc.sample_interval = 0.01;
  ad::Tensor x = x0;
  double peak = 0.0;
  for (std::size_t k = 0; k < 100000; ++k) {
    const double t = static_cast<double>(k) * 0.01;
    auto tr = ode::ode_solve(ad::constant(x), t, t + 0.01, rhs, none, sc);
    x = tr.final_state().value();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x.values[dyn::infected * n + i];
    mean /= static_cast<double>(n);
    peak = std::max(peak, mean);
    if (mean < threshold && mean < peak) return std::round((t + 0.01) * 100.0) / 100.0;
  }
  throw ConfigError("sir.horizon: the free epidemic does not die out; set sir.horizon explicitly");
}

inline SirSetup build_sir(const Config& c) {
  SirSetup s;
  const std::uint64_t seed = c.count("seed");
  const std::string file = c.get("graph.file");
  if (!file.empty()) {
    s.graph = load_graph_file(file);
    if (!s.graph.lattice()) {
      const std::size_t rows = c.count("sir.rows"), cols = c.count("sir.cols");
      if (rows * cols != s.graph.size()) throw ConfigError("graph.file: node count differs from sir.rows * sir.cols");
      s.graph = graph::Graph(s.graph.size(), s.graph.edges(), graph::LatticeDims{rows, cols});
    }
  } else {
    const std::size_t rows = c.count("sir.rows"), cols = c.count("sir.cols");
    if (rows < 2 || cols < 2) throw ConfigError("sir.rows/sir.cols: lattice must be at least 2 x 2");
    s.graph = graph::lattice2d(rows, cols);
  }
  const std::string mode = c.get("sir.drivers");
  if (mode == "oriented-matching")
    s.drivers = graph::oriented_matching_drivers(s.graph, derive_seed(seed, s_drivers));
  else if (mode == "matching")
    s.drivers = graph::max_matching_drivers(s.graph);
  else
    throw ConfigError("sir.drivers: expected oriented-matching or matching, got '" + mode + "'");
  s.system = dyn::SirSystem(s.graph, c.positive("sir.beta"), c.positive("sir.gamma"), s.drivers, c.positive("sir.budget"));
  const double frac = c.number("sir.seed_fraction");
  if (!(frac >= 0.0 && frac <= 1.0)) throw ConfigError("sir.seed_fraction: must lie in [0, 1]");
  s.x0 = dyn::seed_infection(s.graph, parse_quadrant("sir.seed_quadrant", c.get("sir.seed_quadrant")), frac);
  s.targets = graph::quadrant_nodes(s.graph, parse_quadrant("sir.target_quadrant", c.get("sir.target_quadrant")));
  if (c.get("sir.horizon") == "auto")
    s.horizon = free_horizon(s.system, s.x0, c.positive("sir.horizon_threshold"));
  else
    s.horizon = c.positive("sir.horizon");
  return s;
}

inline std::unique_ptr<ctl::Controller> make_nodec(const Config& c, const KuramotoSetup& s) {
  return std::make_unique<ctl::MlpController>(s.graph.size(), c.counts("kuramoto.hidden"), s.drivers.size(), init_seed(c));
}

inline std::unique_ptr<ctl::Controller> make_nodec(const Config& c, const SirSetup& s) {
  const std::size_t rounds = c.count("sir.rounds");
  if (rounds == 0) throw ConfigError("sir.rounds: must be >= 1");
  return std::make_unique<ctl::GnnController>(s.graph, s.drivers, s.system.budget, rounds, init_seed(c));
}

// ---------------------------------------------------------------------------
// Output files

struct MetricsRow {
  std::string run_id;
  std::string controller;
  std::uint64_t seed = 0;
  double energy = 0.0;
  double r_final = std::numeric_limits<double>::quiet_NaN();
  double r_mean = std::numeric_limits<double>::quiet_NaN();
  double r_min = std::numeric_limits<double>::quiet_NaN();
  double peak = std::numeric_limits<double>::quiet_NaN();
  double t_peak = std::numeric_limits<double>::quiet_NaN();
};

inline const char* metrics_header() { return "run_id,controller,seed,E,r_T,r_mean,r_min,peak,t_peak"; }

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << metrics_header() << '\n';
  for (const auto& r : rows)
    os << r.run_id << ',' << r.controller << ',' << r.seed << ',' << format_double(r.energy) << ','
       << format_double(r.r_final) << ',' << format_double(r.r_mean) << ',' << format_double(r.r_min) << ','
       << format_double(r.peak) << ',' << format_double(r.t_peak) << '\n';
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& is, const std::string& origin) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(origin + ": empty metrics file");
  if (trim(line) != metrics_header()) throw std::runtime_error(origin + ": unexpected metrics header '" + line + "'");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(trim(line));
    if (f.size() != 9) throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected 9 fields");
    MetricsRow r;
    r.run_id = f[0];
    r.controller = f[1];
    r.seed = std::stoull(f[2]);
    r.energy = parse_double(f[3]);
    r.r_final = parse_double(f[4]);
    r.r_mean = parse_double(f[5]);
    r.r_min = parse_double(f[6]);
    r.peak = parse_double(f[7]);
    r.t_peak = parse_double(f[8]);
    rows.push_back(r);
  }
  return rows;
}

/// Columns: t, state entries (x_i, or S_i, I_i, R_i, Y_i blocks), held controls.
inline void write_trajectory_csv(std::ostream& os, const ode::Trajectory& tr, std::size_t stride = 1) {
  if (tr.states.empty()) return;
  const ad::Shape& s = tr.states[0].shape();
  const std::size_t m = tr.controls.empty() ? 0 : tr.controls[0].size();
  os << 't';
  if (s.rank() == 2 && s[0] == 4) {
    static const char* tag[] = {"S", "I", "R", "Y"};
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < s[1]; ++i) os << ',' << tag[k] << '_' << i;
  } else {
    for (std::size_t i = 0; i < s.size(); ++i) os << ",x_" << i;
  }
  for (std::size_t j = 0; j < m; ++j) os << ",u_" << j;
  os << '\n';
  stride = std::max<std::size_t>(1, stride);
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    if (k % stride != 0 && k + 1 != tr.states.size()) continue;
    os << format_double(tr.times[k]);
    for (double v : tr.states[k].value().values) os << ',' << format_double(v);
    if (m) {
      const auto& u = tr.controls[tr.control_index_at(tr.times[k])].value().values;
      for (double v : u) os << ',' << format_double(v);
    }
    os << '\n';
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << text;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Merges `section` into run.json in `out`.
inline void update_run_record(const fs::path& out, const Config& c, const std::string& section, nlohmann::json body) {
  const fs::path p = out / "run.json";
  nlohmann::json rec = nlohmann::json::object();
  if (fs::exists(p)) {
    try {
      rec = nlohmann::json::parse(read_text(p));
    } catch (const nlohmann::json::exception&) {
      rec = nlohmann::json::object();
    }
  }
  const std::string hash = hex64(c.hash());
  rec["run_id"] = c.get("experiment") + "-" + hash.substr(0, 8);
  rec["config_hash"] = hash;
  rec["version"] = NODEC_VERSION;
  rec[section] = std::move(body);
  write_text(p, rec.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands

struct TrainSummary {
  train::TrainResult result;
  fs::path checkpoint;
  std::size_t parameters = 0;
};

inline ode::Rhs kuramoto_rhs_fn(const dyn::KuramotoSystem& sys) {
  return [&sys](double, const ad::Var& x, const ad::Var& u) { return dyn::kuramoto_rhs(x, u, sys); };
}

inline ode::Rhs sir_rhs_fn(const dyn::SirSystem& sys) {
  return [&sys](double, const ad::Var& x, const ad::Var& u) { return dyn::sir_rhs(x, u, sys); };
}

inline train::Objective sir_objective(const SirSetup& s, const ode::SolveConfig& solver) {
  return [&s, solver](const ode::ControlFn& ctl) {
    train::Evaluation ev;
    auto tr = ode::ode_solve(ad::constant(s.x0), 0.0, s.horizon, sir_rhs_fn(s.system), ctl, solver);
    if (tr.unstable()) {
      ev.unstable = true;
      ev.loss = ad::scalar(std::numeric_limits<double>::quiet_NaN());
      return ev;
    }
    ev.loss = metrics::epidemic_loss(tr, s.targets).loss;
    return ev;
  };
}

/// Trains the NODEC controller and writes checkpoint.nodec, loss.csv,
/// config.resolved and run.json into `out`.
inline TrainSummary cmd_train(const Config& c, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  const auto tc = train_config(c);
  const auto solver = train_solver(c);
  const std::string regime = c.get("train.regime");
  if (regime != "basic" && regime != "curriculum" && regime != "adaptive")
    throw ConfigError("train.regime: expected basic, curriculum or adaptive, got '" + regime + "'");
  const std::uint64_t nodes =
      c.experiment() == Experiment::kuramoto ? c.count("kuramoto.nodes") : c.count("sir.rows") * c.count("sir.cols");
  if (nodes >= 512) log << "warning: " << nodes << " nodes; training at this size takes hours on one core\n";
  TrainSummary sum;
  std::unique_ptr<ctl::Controller> ctrl;
  auto progress = [&log](const train::HistoryRow& r) {
    if (r.epoch % 10 == 0)
      log << "epoch " << r.epoch << " T=" << r.horizon << " loss=" << r.loss << (r.instability ? " (unstable)" : "") << '\n';
  };

  if (c.experiment() == Experiment::kuramoto) {
    const auto s = build_kuramoto(c);
    ctrl = make_nodec(c, s);
    log << "kuramoto: N=" << s.graph.size() << " edges=" << s.graph.edges().size() << " drivers=" << s.drivers.size()
        << " parameters=" << ctrl->params().scalar_count() << '\n';
    const ode::Rhs rhs = kuramoto_rhs_fn(s.system);
    if (regime == "curriculum") {
      train::CurriculumProblem prob{s.graph.size(), rhs, solver,
                                    [](const ad::Var& x) { return metrics::order_parameter(x); }};
      sum.result = train::train_curriculum(*ctrl, prob, tc, progress);
    } else {
      // Fixed horizon from the steady state; loss as in the curriculum.
      const double horizon = tc.max_horizon;
      ode::SolveConfig sc = solver;
      sc.sample_interval = tc.step_size;
      ad::Tensor x0 = ad::Tensor::vector(s.steady);
      train::Objective obj = [&, sc, horizon, x0](const ode::ControlFn& ctl) {
        train::Evaluation ev;
        auto tr = ode::ode_solve(ad::constant(x0), 0.0, horizon, rhs, ctl, sc);
        if (tr.unstable()) {
          ev.unstable = true;
          ev.loss = ad::scalar(std::numeric_limits<double>::quiet_NaN());
          return ev;
        }
        ev.loss = metrics::kuramoto_loss(tr);
        return ev;
      };
      sum.result = regime == "basic" ? train::train_basic(*ctrl, obj, tc) : train::train_adaptive(*ctrl, obj, tc);
      for (const auto& r : sum.result.history) progress(r);
    }
  } else {
    const auto s = build_sir(c);
    if (regime == "curriculum") throw ConfigError("train.regime: curriculum applies to the kuramoto experiment only");
    ctrl = make_nodec(c, s);
    log << "sir: N=" << s.graph.size() << " drivers=" << s.drivers.size() << " targets=" << s.targets.size()
        << " T=" << s.horizon << " parameters=" << ctrl->params().scalar_count() << '\n';
    const auto obj = sir_objective(s, solver);
    sum.result = regime == "basic" ? train::train_basic(*ctrl, obj, tc) : train::train_adaptive(*ctrl, obj, tc);
    for (const auto& r : sum.result.history) progress(r);
  }

  if (!sum.result.history.empty() && sum.result.history.front().instability && sum.result.history.size() == 1)
    throw std::runtime_error("numerical instability at epoch 0");
  bool any_stable = false;
  for (const auto& r : sum.result.history) any_stable = any_stable || !r.instability;
  if (!any_stable) throw std::runtime_error("numerical instability at epoch 0; no epoch completed");

  sum.checkpoint = out / "checkpoint.nodec";
  sum.parameters = ctrl->params().scalar_count();
  {
    std::ofstream os(sum.checkpoint, std::ios::binary);
    ctl::save_checkpoint(os, ctrl->params());
  }
  {
    std::ofstream os(out / "loss.csv");
    train::write_history_csv(os, sum.result.history);
  }
  write_text(out / "config.resolved", c.resolved());
  update_run_record(out, c, "train",
                    {{"regime", regime},
                     {"epochs", sum.result.history.size()},
                     {"best_loss", sum.result.best_loss},
                     {"best_epoch", sum.result.best_epoch},
                     {"parameters", sum.parameters},
                     {"artifacts", {"checkpoint.nodec", "loss.csv", "config.resolved"}}});
  log << "best loss " << sum.result.best_loss << " at epoch " << sum.result.best_epoch << '\n';
  return sum;
}

struct EvalSummary {
  std::vector<MetricsRow> rows;
  std::vector<std::string> table;  // printed summary lines
};

inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double median_of(const std::vector<MetricsRow>& rows, const std::string& controller, const std::string& metric) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.controller != controller) continue;
    if (metric == "E") v.push_back(r.energy);
    else if (metric == "r_T") v.push_back(r.r_final);
    else if (metric == "r_mean") v.push_back(r.r_mean);
    else if (metric == "r_min") v.push_back(r.r_min);
    else if (metric == "peak") v.push_back(r.peak);
    else if (metric == "t_peak") v.push_back(r.t_peak);
    else throw ConfigError("unknown metric '" + metric + "'");
  }
  return median(v);
}

inline ctl::ParameterSet read_checkpoint(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + p.string() + "'");
  return ctl::load_checkpoint(is);
}

/// Runs the requested controllers on identical initial states and writes
/// metrics.csv, summary.txt, trajectory CSVs and (oscillators) relative.csv.
inline EvalSummary cmd_evaluate(const Config& c, const fs::path& checkpoint, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  const auto solver = eval_solver(c);
  const auto labels = c.list("eval.controllers");
  const std::string traj_mode = c.get("output.trajectories");
  if (traj_mode != "first" && traj_mode != "all" && traj_mode != "none")
    throw ConfigError("output.trajectories: expected first, all or none");
  const std::size_t stride = c.count("output.trajectory_stride");
  const std::uint64_t seed = c.count("seed");
  const std::string run_id_prefix = c.get("experiment") + "-" + hex64(c.hash()).substr(0, 8);
  EvalSummary sum;
  std::vector<std::string> artifacts{"metrics.csv", "summary.txt"};

  auto need_nodec = std::find(labels.begin(), labels.end(), "NODEC") != labels.end();
  auto load_nodec = [&](ctl::Controller& ctrl) {
    const auto saved = read_checkpoint(checkpoint);
    if (!ctrl.params().compatible(saved))
      throw std::runtime_error("checkpoint '" + checkpoint.string() + "' does not match the configured architecture");
    ctl::load_into(ctrl, saved);
  };

  if (c.experiment() == Experiment::kuramoto) {
    const auto s = build_kuramoto(c);
    std::unique_ptr<ctl::Controller> nodec;
    if (need_nodec) {
      nodec = make_nodec(c, s);
      load_nodec(*nodec);
    }
    const double zeta = c.positive("kuramoto.feedback_scale");
    ctl::FeedbackController fc(s.drivers, zeta);
    ctl::FreeController free_ctl(s.drivers.size());
    const std::size_t samples = c.count("kuramoto.eval_samples");
    const double horizon = c.positive("kuramoto.eval_horizon");
    const std::string init = c.get("kuramoto.eval_init");
    if (init != "steady" && init != "unit") throw ConfigError("kuramoto.eval_init: expected steady or unit");
    const ode::Rhs rhs = kuramoto_rhs_fn(s.system);
    Rng rng(derive_seed(seed, s_eval));
    std::ofstream rel;
    const bool relative = need_nodec && std::find(labels.begin(), labels.end(), "FC") != labels.end();
    if (relative) {
      rel.open(out / "relative.csv");
      rel << "sample,rel_energy,rel_r\n";
      artifacts.push_back("relative.csv");
    }
    for (std::size_t k = 0; k < samples; ++k) {
      ad::Tensor x0(ad::Shape{s.graph.size()}, 0.0);
      for (std::size_t i = 0; i < x0.size(); ++i)
        x0.values[i] = init == "steady" ? s.steady[i] * rng.uniform(0.9, 1.0) : rng.uniform();
      std::map<std::string, MetricsRow> by_label;
      for (const auto& label : labels) {
        const ctl::Controller* ctrl = nullptr;
        if (label == "NODEC") ctrl = nodec.get();
        else if (label == "FC") ctrl = &fc;
        else if (label == "F") ctrl = &free_ctl;
        else throw ConfigError("eval.controllers: '" + label + "' is not available for kuramoto (NODEC, FC, F)");
        auto tr = ode::ode_solve(ad::constant(x0), 0.0, horizon, rhs, ctrl->bind(), solver);
        MetricsRow row;
        row.run_id = run_id_prefix + "-" + std::to_string(k);
        row.controller = label;
        row.seed = seed;
        if (tr.unstable()) {
          log << "sample " << k << " " << label << ": instability at t=" << tr.instability->last_finite_time << '\n';
          row.energy = std::numeric_limits<double>::quiet_NaN();
        } else {
          row.energy = metrics::energy(tr);
          const auto sync = metrics::sync_summary(tr);
          row.r_final = sync.r_final;
          row.r_mean = sync.r_mean;
          row.r_min = sync.r_min;
        }
        if (traj_mode == "all" || (traj_mode == "first" && k == 0)) {
          const std::string name = "trajectory_" + label + (traj_mode == "all" ? "_" + std::to_string(k) : "") + ".csv";
          std::ofstream os(out / name);
          write_trajectory_csv(os, tr, stride);
          artifacts.push_back(name);
        }
        by_label[label] = row;
        sum.rows.push_back(row);
      }
      if (relative) {
        const auto& a = by_label["NODEC"];
        const auto& b = by_label["FC"];
        rel << k << ',' << format_double((a.energy - b.energy) / b.energy) << ','
            << format_double((a.r_final - b.r_final) / b.r_final) << '\n';
      }
    }
    std::ostringstream tab;
    tab << std::left << std::setw(8) << "control" << std::right << std::setw(14) << "median E" << std::setw(12)
        << "median r_T" << std::setw(14) << "median r_min";
    sum.table.push_back(tab.str());
    for (const auto& label : labels) {
      std::ostringstream os;
      os << std::left << std::setw(8) << label << std::right << std::fixed << std::setprecision(1) << std::setw(14)
         << median_of(sum.rows, label, "E") << std::setprecision(4) << std::setw(12) << median_of(sum.rows, label, "r_T")
         << std::setw(14) << median_of(sum.rows, label, "r_min");
      sum.table.push_back(os.str());
    }
  } else {
    const auto s = build_sir(c);
    std::unique_ptr<ctl::Controller> nodec;
    if (need_nodec) {
      nodec = make_nodec(c, s);
      load_nodec(*nodec);
    }
    std::unique_ptr<ctl::Controller> tcc, rnd;
    ctl::FreeController free_ctl(s.drivers.size());
    const ode::Rhs rhs = sir_rhs_fn(s.system);
    for (const auto& label : labels) {
      const ctl::Controller* ctrl = nullptr;
      if (label == "NODEC") {
        ctrl = nodec.get();
      } else if (label == "TCC") {
        tcc = std::make_unique<ctl::TargetedConstantController>(s.drivers, s.system.budget, s.targets);
        ctrl = tcc.get();
      } else if (label == "RND") {
        rnd = std::make_unique<ctl::RandomConstantController>(s.drivers.size(), s.system.budget,
                                                              derive_seed(seed, s_rnd), c.flag("sir.rnd_per_step"));
        ctrl = rnd.get();
      } else if (label == "F") {
        ctrl = &free_ctl;
      } else {
        throw ConfigError("eval.controllers: '" + label + "' is not available for sir (TCC, NODEC, RND, F)");
      }
      auto tr = ode::ode_solve(ad::constant(s.x0), 0.0, s.horizon, rhs, ctrl->bind(), solver);
      MetricsRow row;
      row.run_id = run_id_prefix + "-0";
      row.controller = label;
      row.seed = seed;
      if (tr.unstable()) {
        log << label << ": instability at t=" << tr.instability->last_finite_time << '\n';
        row.energy = std::numeric_limits<double>::quiet_NaN();
      } else {
        row.energy = metrics::energy(tr);
        const auto el = metrics::epidemic_loss(tr, s.targets);
        row.peak = el.peak;
        row.t_peak = el.t_star;
        double worst = 0.0;
        for (const auto& x : tr.states)
          worst = std::max(worst, std::abs(dyn::sir_total(x.value()) - static_cast<double>(s.graph.size())));
        log << label << ": max conservation error " << worst << '\n';
      }
      if (traj_mode != "none") {
        const std::string name = "trajectory_" + label + ".csv";
        std::ofstream os(out / name);
        write_trajectory_csv(os, tr, stride);
        artifacts.push_back(name);
      }
      sum.rows.push_back(row);
    }
    std::vector<MetricsRow> sorted = sum.rows;
    std::stable_sort(sorted.begin(), sorted.end(), [](const MetricsRow& a, const MetricsRow& b) { return a.peak < b.peak; });
    std::ostringstream tab;
    tab << std::left << std::setw(8) << "control" << std::right << std::setw(16) << "peak infection" << std::setw(16)
        << "total energy";
    sum.table.push_back(tab.str());
    for (const auto& r : sorted) {
      std::ostringstream os;
      os << std::left << std::setw(8) << r.controller << std::right << std::fixed << std::setprecision(3) << std::setw(16)
         << r.peak << std::setprecision(1) << std::setw(16) << r.energy;
      sum.table.push_back(os.str());
    }
  }

  {
    std::ofstream os(out / "metrics.csv");
    write_metrics_csv(os, sum.rows);
  }
  std::string text;
  for (const auto& l : sum.table) text += l + "\n";
  write_text(out / "summary.txt", text);
  if (!fs::exists(out / "config.resolved")) write_text(out / "config.resolved", c.resolved());
  update_run_record(out, c, "evaluate", {{"rows", sum.rows.size()}, {"artifacts", artifacts}});
  return sum;
}

/// "metric:A<B<C" ordering on per-controller medians. Returns an empty string
/// when it holds, otherwise a description of the first violated pair.
inline std::string check_assertion(const std::vector<MetricsRow>& rows, const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ConfigError("--assert: expected 'metric:A<B<...', got '" + spec + "'");
  const std::string metric = trim(spec.substr(0, colon));
  std::vector<std::string> names;
  std::stringstream ss(spec.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, '<')) names.push_back(trim(item));
  if (names.size() < 2) throw ConfigError("--assert: need at least two controllers");
  for (std::size_t i = 0; i + 1 < names.size(); ++i) {
    const double a = median_of(rows, names[i], metric);
    const double b = median_of(rows, names[i + 1], metric);
    if (std::isnan(a) || std::isnan(b))
      return metric + ": no values for " + (std::isnan(a) ? names[i] : names[i + 1]);
    if (!(a < b))
      return metric + ": " + names[i] + " (" + format_double(a) + ") is not below " + names[i + 1] + " (" +
             format_double(b) + ")";
  }
  return "";
}

struct CompareResult {
  std::vector<std::string> table;
  std::vector<MetricsRow> merged;
};

/// Merges the metrics of several run directories. Relative differences are
/// taken against the first run, per controller, on medians.
inline CompareResult cmd_compare(const std::vector<fs::path>& runs, const fs::path& out) {
  if (runs.size() < 2) throw ConfigError("compare: need at least two run directories");
  std::vector<std::string> missing;
  for (const auto& r : runs)
    if (!fs::exists(r / "metrics.csv")) missing.push_back((r / "metrics.csv").string());
  if (!missing.empty()) {
    std::string msg = "compare: missing metrics files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw std::runtime_error(msg);
  }
  CompareResult res;
  std::vector<std::vector<MetricsRow>> per_run;
  for (const auto& r : runs) {
    std::ifstream is(r / "metrics.csv");
    per_run.push_back(read_metrics_csv(is, (r / "metrics.csv").string()));
  }
  std::vector<std::string> controllers;
  for (const auto& rows : per_run)
    for (const auto& row : rows)
      if (std::find(controllers.begin(), controllers.end(), row.controller) == controllers.end())
        controllers.push_back(row.controller);

  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream os(out / "compare.csv");
    os << "run," << metrics_header() << '\n';
    for (std::size_t i = 0; i < runs.size(); ++i)
      for (const auto& r : per_run[i]) {
        std::ostringstream line;
        write_metrics_csv(line, {r});
        std::string body = line.str();
        body = body.substr(body.find('\n') + 1);
        os << runs[i].filename().string() << ',' << body;
      }
  }
  for (const auto& rows : per_run) res.merged.insert(res.merged.end(), rows.begin(), rows.end());

  static const char* metrics_list[] = {"E", "r_T", "peak"};
  std::ostringstream head;
  head << std::left << std::setw(24) << "run" << std::setw(8) << "control";
  for (auto m : metrics_list) head << std::right << std::setw(14) << m << std::setw(12) << ("d" + std::string(m));
  res.table.push_back(head.str());
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& ctl_name : controllers) {
      std::ostringstream os;
      std::string name = runs[i].filename().string();
      if (name.empty()) name = runs[i].parent_path().filename().string();
      os << std::left << std::setw(24) << name << std::setw(8) << ctl_name;
      for (auto m : metrics_list) {
        const double v = median_of(per_run[i], ctl_name, m);
        const double base = median_of(per_run[0], ctl_name, m);
        const double d = (v == base) ? 0.0 : (v - base) / base;
        os << std::right << std::setw(14) << format_double(v) << std::setw(12) << format_double(d);
      }
      res.table.push_back(os.str());
    }
  if (!out.empty()) {
    std::string text;
    for (const auto& l : res.table) text += l + "\n";
    write_text(out / "compare.txt", text);
  }
  return res;
}

/// Writes the configured graph (edge list) and its driver nodes.
inline void cmd_gen_graph(const Config& c, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  graph::Graph g;
  graph::DriverMap drivers;
  if (c.experiment() == Experiment::kuramoto) {
    auto s = build_kuramoto(c);
    g = s.graph;
    drivers = s.drivers;
  } else {
    auto s = build_sir(c);
    g = s.graph;
    drivers = s.drivers;
  }
  {
    std::ofstream os(out / "graph.edges");
    graph::write_edge_list(os, g);
  }
  std::ofstream os(out / "drivers.csv");
  os << "node,gain\n";
  for (std::size_t m = 0; m < drivers.size(); ++m)
    os << drivers.nodes()[m] << ',' << (drivers.has_gains() ? format_double(drivers.gains()[m]) : "nan") << '\n';
  log << "graph: " << g.size() << " nodes, " << g.edges().size() << " edges, " << drivers.size() << " drivers\n";
}

}  // namespace nodec::exp
