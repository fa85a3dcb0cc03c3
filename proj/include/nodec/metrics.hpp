#pragma once

// Control energy, order parameter, training losses and the three epidemic
// reward signals.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "nodec/autodiff.hpp"
#include "nodec/dynamics.hpp"
#include "nodec/odesolve.hpp"

namespace nodec::metrics {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Riemann sum of ||u||^2 over the held controls. The last hold is clipped
/// at the final stored time.
inline double energy(const ode::Trajectory& tr) {
  if (tr.controls.empty()) return 0.0;
  const double dt = tr.control_interval;
  const double t_end = tr.times.back();
  for (std::size_t k = 1; k < tr.control_times.size(); ++k) {
    const double gap = tr.control_times[k] - tr.control_times[k - 1];
    if (std::abs(gap - dt) > 1e-9 * std::max(1.0, dt)) throw MetricsError("energy: controls are not uniformly spaced");
  }
  double e = 0.0;
  for (std::size_t k = 0; k < tr.controls.size(); ++k) {
    const double hold = std::min(dt, t_end - tr.control_times[k]);
    if (hold <= 0.0) continue;
    double sq = 0.0;
    for (double v : tr.controls[k].value().values) sq += v * v;
    e += sq * hold;
  }
  return e;
}

/// Running energy E(t) at every control instant (after its hold).
inline std::vector<double> energy_series(const ode::Trajectory& tr) {
  std::vector<double> out;
  double e = 0.0;
  const double t_end = tr.times.back();
  for (std::size_t k = 0; k < tr.controls.size(); ++k) {
    double sq = 0.0;
    for (double v : tr.controls[k].value().values) sq += v * v;
    e += sq * std::max(0.0, std::min(tr.control_interval, t_end - tr.control_times[k]));
    out.push_back(e);
  }
  return out;
}

/// r = |mean_j exp(i x_j)|, differentiable.
inline ad::Var order_parameter(const ad::Var& x) {
  if (x.size() == 0) throw MetricsError("order_parameter: empty phase vector");
  const ad::Var c = ad::sum(ad::cos(x));
  const ad::Var s = ad::sum(ad::sin(x));
  return ad::scale(ad::sqrt(c * c + s * s), 1.0 / static_cast<double>(x.size()));
}

inline double order_parameter(std::span<const double> x) {
  if (x.empty()) throw MetricsError("order_parameter: empty phase vector");
  double c = 0.0, s = 0.0;
  for (double v : x) {
    c += std::cos(v);
    s += std::sin(v);
  }
  return std::sqrt(c * c + s * s) / static_cast<double>(x.size());
}

/// J = -(mean r + min r) over the given samples.
inline ad::Var kuramoto_loss(std::span<const ad::Var> states) {
  if (states.empty()) throw MetricsError("kuramoto_loss: no samples");
  std::vector<ad::Var> rs;
  rs.reserve(states.size());
  for (const auto& x : states) rs.push_back(order_parameter(x));
  const ad::Var r = ad::stack(std::span<const ad::Var>(rs));
  return -(ad::mean(r) + ad::min(r));
}

/// Loss over a trajectory; the initial sample is left out.
inline ad::Var kuramoto_loss(const ode::Trajectory& tr) {
  if (tr.states.size() < 2) throw MetricsError("kuramoto_loss: no samples after t0");
  return kuramoto_loss(std::span<const ad::Var>(tr.states).subspan(1));
}

struct SyncSummary {
  double r_final = 0.0;
  double r_mean = 0.0;
  double r_min = 0.0;
};

inline SyncSummary sync_summary(const ode::Trajectory& tr) {
  if (tr.states.size() < 2) throw MetricsError("sync_summary: no samples after t0");
  SyncSummary s;
  s.r_min = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < tr.states.size(); ++k) {
    const double r = order_parameter(std::span<const double>(tr.states[k].value().values));
    s.r_mean += r;
    s.r_min = std::min(s.r_min, r);
  }
  s.r_mean /= static_cast<double>(tr.states.size() - 1);
  s.r_final = order_parameter(std::span<const double>(tr.final_state().value().values));
  return s;
}

/// Flat indices of the infected entries of the target nodes in a 4 x N state.
inline ad::Index infected_index(std::size_t n, std::span<const std::size_t> targets) {
  if (targets.empty()) throw MetricsError("target sub-graph is empty");
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(targets.size());
  for (auto i : targets) {
    if (i >= n) throw MetricsError("target node out of range");
    idx.push_back(static_cast<std::ptrdiff_t>(dyn::infected * n + i));
  }
  return ad::make_index(std::move(idx));
}

/// Mean infected fraction over the target nodes.
inline ad::Var mean_infected(const ad::Var& x, const ad::Index& idx) {
  return ad::mean(ad::gather(x, idx, ad::Shape{idx->size()}));
}

inline std::vector<double> mean_infected_series(const ode::Trajectory& tr, std::span<const std::size_t> targets) {
  if (tr.states.empty()) return {};
  const std::size_t n = tr.states[0].shape()[1];
  const auto idx = infected_index(n, targets);
  std::vector<double> out;
  out.reserve(tr.states.size());
  for (const auto& x : tr.states) {
    double s = 0.0;
    for (auto k : *idx) s += x.value().values[static_cast<std::size_t>(k)];
    out.push_back(s / static_cast<double>(idx->size()));
  }
  return out;
}

struct EpidemicLoss {
  ad::Var loss;  // peak^2, on the tape through the state at t_star
  double peak = 0.0;
  double t_star = 0.0;
  std::size_t sample = 0;
};

/// J = (max_t mean_{G*} I)^2 over the stored samples. The gradient flows only
/// through the sample attaining the maximum, as max does.
inline EpidemicLoss epidemic_loss(const ode::Trajectory& tr, std::span<const std::size_t> targets) {
  if (tr.states.empty()) throw MetricsError("epidemic_loss: empty trajectory");
  if (tr.control_interval > 0.0)
    for (std::size_t k = 1; k < tr.times.size(); ++k)
      if (tr.times[k] - tr.times[k - 1] > tr.control_interval * (1.0 + 1e-9))
        throw MetricsError("epidemic_loss: sample spacing exceeds the control interval");
  const auto series = mean_infected_series(tr, targets);
  const auto best = static_cast<std::size_t>(std::max_element(series.begin(), series.end()) - series.begin());
  const std::size_t n = tr.states[0].shape()[1];
  EpidemicLoss out;
  out.sample = best;
  out.peak = series[best];
  out.t_star = tr.times[best];
  out.loss = ad::square(mean_infected(tr.states[best], infected_index(n, targets)));
  return out;
}

struct Rewards {
  std::vector<double> rho1;  // -I^2 dt
  std::vector<double> rho2;  // sparse, final step only
  std::vector<double> rho3;  // penalizes increases of the running max
};

/// Reward series for a mean-infection series sampled every dt.
inline Rewards rewards(std::span<const double> infected, double dt) {
  Rewards r;
  const std::size_t n = infected.size();
  r.rho1.resize(n);
  r.rho2.assign(n, 0.0);
  r.rho3.assign(n, 0.0);
  if (n == 0) return r;
  double peak = infected[0];
  double run_max = infected[0];
  for (std::size_t k = 0; k < n; ++k) {
    const double v = infected[k];
    r.rho1[k] = -v * v * dt;
    peak = std::max(peak, v);
    if (k > 0 && v > run_max) {
      r.rho3[k] = -v * v + run_max * run_max;
      run_max = v;
    }
  }
  r.rho2[n - 1] = -peak * peak;
  return r;
}

}  // namespace nodec::metrics
