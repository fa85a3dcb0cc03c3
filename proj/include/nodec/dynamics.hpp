#pragma once

// Right-hand sides of the two controlled graph systems: Kuramoto phase
// oscillators and SIR-type epidemic spreading with quarantine.

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nodec/autodiff.hpp"
#include "nodec/graph.hpp"

namespace nodec::dyn {

class DynamicsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct KuramotoSystem {
  graph::Graph graph;
  double coupling = 0.4;
  std::vector<double> omega;  // rad / time
  graph::DriverMap drivers;
  std::shared_ptr<const ad::SparseMatrix> adjacency;
  ad::Var omega_var;

  KuramotoSystem() = default;
  KuramotoSystem(graph::Graph g, double k, std::vector<double> w, graph::DriverMap d)
      : graph(std::move(g)), coupling(k), omega(std::move(w)), drivers(std::move(d)) {
    if (omega.size() != graph.size()) throw DynamicsError("kuramoto: omega length differs from node count");
    if (drivers.node_count() != graph.size()) throw DynamicsError("kuramoto: driver map built for another graph");
    adjacency = graph.adjacency_operator();
    omega_var = ad::constant(ad::Tensor::vector(omega));
  }

  std::size_t nodes() const { return graph.size(); }
};

/// dx_i/dt = omega_i + (B u)_i + K sum_j A_ij sin(x_j - x_i).
///
/// The coupling uses sin(x_j - x_i) = sin x_j cos x_i - cos x_j sin x_i so it
/// costs two sparse products instead of one sine per edge.
inline ad::Var kuramoto_rhs(const ad::Var& x, const ad::Var& u, const KuramotoSystem& sys) {
  const std::size_t n = sys.nodes();
  if (x.shape().rank() != 1 || x.size() != n) throw ad::ShapeError("kuramoto_rhs", x.shape(), ad::Shape{n});
  if (u.shape().rank() != 1 || u.size() != sys.drivers.size())
    throw ad::ShapeError("kuramoto_rhs", u.shape(), ad::Shape{sys.drivers.size()});
  const ad::Var s = ad::sin(x);
  const ad::Var c = ad::cos(x);
  const ad::Var coupling = c * ad::spmv(sys.adjacency, s) - s * ad::spmv(sys.adjacency, c);
  ad::Var dx = ad::axpy(sys.omega_var, sys.coupling, coupling);
  if (!sys.drivers.empty()) dx = dx + ad::scatter_add(u, sys.drivers.index(), ad::Shape{n});
  return dx;
}

/// Row order of the 4 x N SIR-type state.
enum SirRow : std::size_t { susceptible = 0, infected = 1, recovered = 2, quarantined = 3 };

struct SirSystem {
  graph::Graph graph;
  double beta = 6.0;   // infection rate
  double gamma = 1.8;  // recovery rate
  graph::DriverMap drivers;
  double budget = 600.0;
  std::shared_ptr<const ad::SparseMatrix> adjacency;

  SirSystem() = default;
  SirSystem(graph::Graph g, double b, double gm, graph::DriverMap d, double bud)
      : graph(std::move(g)), beta(b), gamma(gm), drivers(std::move(d)), budget(bud) {
    if (!(beta > 0.0) || !(gamma > 0.0)) throw DynamicsError("sir: beta and gamma must be positive");
    if (!(budget > 0.0)) throw DynamicsError("sir: budget must be positive");
    if (drivers.node_count() != graph.size()) throw DynamicsError("sir: driver map built for another graph");
    adjacency = graph.adjacency_operator();
  }

  std::size_t nodes() const { return graph.size(); }
};

/// Rate equations per node i, with c_i = (B u)_i:
///   S' = -beta S (A I) - c S      I' = beta S (A I) - gamma I - c I
///   R' =  gamma I + c S           Y' = c I
/// Controls are intervention intensities and must be non-negative.
inline ad::Var sir_rhs(const ad::Var& x, const ad::Var& u, const SirSystem& sys) {
  const std::size_t n = sys.nodes();
  if (!(x.shape() == ad::Shape{4, n})) throw ad::ShapeError("sir_rhs", x.shape(), ad::Shape{4, n});
  if (u.shape().rank() != 1 || u.size() != sys.drivers.size())
    throw ad::ShapeError("sir_rhs", u.shape(), ad::Shape{sys.drivers.size()});
  for (std::size_t m = 0; m < u.size(); ++m)
    if (u[m] < 0.0) throw DynamicsError("sir_rhs: negative control " + std::to_string(u[m]) + " at slot " + std::to_string(m));

  const ad::Var s = ad::row(x, susceptible);
  const ad::Var i = ad::row(x, infected);
  const ad::Var infection = ad::scale(s * ad::spmv(sys.adjacency, i), sys.beta);
  const ad::Var recovery = ad::scale(i, sys.gamma);
  if (sys.drivers.empty()) {
    const ad::Var zero(ad::Tensor(ad::Shape{n}, 0.0));
    const ad::Var parts[] = {-infection, infection - recovery, recovery, zero};
    return ad::stack(parts);
  }
  const ad::Var c = ad::scatter_add(u, sys.drivers.index(), ad::Shape{n});
  const ad::Var cs = c * s;
  const ad::Var ci = c * i;
  const ad::Var parts[] = {-(infection + cs), infection - recovery - ci, recovery + cs, ci};
  return ad::stack(parts);
}

/// Initial SIR-type state: nodes of the chosen lattice quadrant start with
/// I = fraction, S = 1 - fraction; every other node is fully susceptible.
inline ad::Tensor seed_infection(const graph::Graph& g, graph::Quadrant q, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw DynamicsError("seed_infection: fraction must lie in [0, 1]");
  const std::size_t n = g.size();
  ad::Tensor x(ad::Shape{4, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) x.values[susceptible * n + i] = 1.0;
  for (auto i : graph::quadrant_nodes(g, q)) {
    x.values[susceptible * n + i] = 1.0 - fraction;
    x.values[infected * n + i] = fraction;
  }
  return x;
}

/// Sum over all nodes and compartments (equals N for a valid state).
inline double sir_total(const ad::Tensor& x) {
  double s = 0.0;
  for (double v : x.values) s += v;
  return s;
}

}  // namespace nodec::dyn
