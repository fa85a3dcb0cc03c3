#pragma once

// Controlled ODE integration with a zero-order hold on the control signal.
// Fixed-step methods run on the tape when the controller parameters do;
// dopri5 is evaluation-only.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nodec/autodiff.hpp"

namespace nodec::ode {

enum class Method { euler, rk4, dopri5 };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::euler: return "euler";
    case Method::rk4: return "rk4";
    case Method::dopri5: return "dopri5";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "euler") return Method::euler;
  if (s == "rk4") return Method::rk4;
  if (s == "dopri5") return Method::dopri5;
  throw std::invalid_argument("unknown solver method '" + s + "'");
}

class SolveError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SolveConfig {
  Method method = Method::rk4;
  double step = 0.01;              // tau, fixed-step methods
  double rtol = 1e-6;              // dopri5
  double atol = 1e-8;              // dopri5
  double control_interval = 0.01;  // controller evaluated every this many time units
  double sample_interval = 0.01;   // stored state spacing
};

struct Instability {
  double last_finite_time;
  std::string what;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<ad::Var> states;
  std::vector<double> control_times;
  std::vector<ad::Var> controls;
  double control_interval = 0.0;
  std::optional<Instability> instability;

  bool unstable() const { return instability.has_value(); }
  const ad::Var& final_state() const { return states.back(); }

  /// Index of the control held at time t.
  std::size_t control_index_at(double t) const {
    auto it = std::upper_bound(control_times.begin(), control_times.end(), t + 1e-12);
    return it == control_times.begin() ? 0 : static_cast<std::size_t>(it - control_times.begin()) - 1;
  }
};

using Rhs = std::function<ad::Var(double t, const ad::Var& x, const ad::Var& u)>;
using ControlFn = std::function<ad::Var(double t, const ad::Var& x)>;

namespace detail {

inline std::size_t ratio(double a, double b, const char* what) {
  const double q = a / b;
  const double r = std::round(q);
  if (r < 1.0 || std::abs(q - r) > 1e-9 * std::max(1.0, q))
    throw SolveError(std::string(what) + " must be a positive integer multiple of the solver step");
  return static_cast<std::size_t>(r);
}

}  // namespace detail

/// Result of one embedded Dormand-Prince step.
struct Dopri5Step {
  ad::Tensor x_next;
  double error = 0.0;
  double h_next = 0.0;
  bool accepted = false;
};

using PlainRhs = std::function<ad::Tensor(double t, const ad::Tensor& x)>;

struct PiState {
  double err_prev = 1e-4;
};

/// Dormand-Prince 5(4) with PI step control (safety 0.9, factor in [0.2, 5]).
inline Dopri5Step dopri5_step(const ad::Tensor& x, double t, double h, const PlainRhs& f, double rtol, double atol,
                              PiState& pi) {
  if (!(h > 0.0)) throw SolveError("dopri5_step: h must be positive");
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                          a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double safety = 0.9, fac_min = 0.2, fac_max = 5.0, beta = 0.04, alpha = 0.2 - 0.75 * beta;

  const std::size_t n = x.size();
  auto combo = [&](std::initializer_list<std::pair<double, const ad::Tensor*>> terms) {
    ad::Tensor y = x;
    for (auto [c, k] : terms)
      for (std::size_t i = 0; i < n; ++i) y.values[i] += h * c * k->values[i];
    return y;
  };
  const ad::Tensor k1 = f(t, x);
  const ad::Tensor k2 = f(t + c2 * h, combo({{a21, &k1}}));
  const ad::Tensor k3 = f(t + c3 * h, combo({{a31, &k1}, {a32, &k2}}));
  const ad::Tensor k4 = f(t + c4 * h, combo({{a41, &k1}, {a42, &k2}, {a43, &k3}}));
  const ad::Tensor k5 = f(t + c5 * h, combo({{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}));
  const ad::Tensor k6 = f(t + h, combo({{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}));
  ad::Tensor x5 = combo({{a71, &k1}, {a73, &k3}, {a74, &k4}, {a75, &k5}, {a76, &k6}});
  const ad::Tensor k7 = f(t + h, x5);

  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = h * (e1 * k1.values[i] + e3 * k3.values[i] + e4 * k4.values[i] + e5 * k5.values[i] +
                           e6 * k6.values[i] + e7 * k7.values[i]);
    const double sc = atol + rtol * std::max(std::abs(x.values[i]), std::abs(x5.values[i]));
    acc += (e / sc) * (e / sc);
  }
  const double err = n ? std::sqrt(acc / static_cast<double>(n)) : 0.0;

  Dopri5Step out;
  out.error = err;
  if (!std::isfinite(err)) {
    out.h_next = h * fac_min;
    return out;
  }
  if (err <= 1.0) {
    double fac = fac_max;
    if (err > 0.0) fac = std::clamp(safety * std::pow(err, -alpha) * std::pow(pi.err_prev, beta), fac_min, fac_max);
    pi.err_prev = std::max(err, 1e-4);
    out.accepted = true;
    out.x_next = std::move(x5);
    out.h_next = h * fac;
  } else {
    out.h_next = h * std::max(fac_min, safety * std::pow(err, -alpha));
  }
  return out;
}

/// Adaptive integration of a plain ODE from t0 to t1. Returns nullopt on step
/// size underflow or a non-finite state; `h` carries the step across calls.
inline std::optional<ad::Tensor> integrate_dopri5(ad::Tensor x, double t0, double t1, const PlainRhs& f, double rtol,
                                                  double atol, double& h, PiState& pi, double* last_finite = nullptr) {
  double t = t0;
  if (!(h > 0.0)) h = std::min(1e-3, t1 - t0);
  while (t < t1) {
    const double rem = t1 - t;
    const bool last = h >= rem * (1.0 - 1e-12);
    const double hs = last ? rem : h;
    Dopri5Step s = dopri5_step(x, t, hs, f, rtol, atol, pi);
    if (s.accepted) {
      if (!s.x_next.all_finite()) {
        if (last_finite) *last_finite = t;
        return std::nullopt;
      }
      t = last ? t1 : t + hs;
      x = std::move(s.x_next);
    }
    // A clipped final step rescales the carried step instead of replacing it.
    h = last ? h * (s.h_next / hs) : s.h_next;
    if (h < 1e-12) {
      if (last_finite) *last_finite = t;
      return std::nullopt;
    }
  }
  return x;
}

/// Integrates x' = rhs(t, x, u) on [t0, T]. The controller is evaluated at t0
/// and every control_interval after, and its output is held in between.
/// Samples are stored at t0, every sample_interval, and at T.
inline Trajectory ode_solve(const ad::Var& x0, double t0, double t_end, const Rhs& rhs, const ControlFn& control,
                            const SolveConfig& cfg) {
  if (!(t_end > t0)) throw SolveError("ode_solve: T must exceed t0");
  if (!(cfg.control_interval > 0.0) || !(cfg.sample_interval > 0.0))
    throw SolveError("ode_solve: intervals must be positive");
  Trajectory tr;
  tr.control_interval = cfg.control_interval;
  tr.times.push_back(t0);
  tr.states.push_back(x0);
  const double span = t_end - t0;

  if (cfg.method == Method::dopri5) {
    if (x0.on_tape()) throw SolveError("ode_solve: dopri5 is evaluation-only");
    const std::size_t n_ctl = detail::ratio(span, cfg.control_interval, "horizon");
    const std::size_t per_sample = detail::ratio(cfg.sample_interval, cfg.control_interval, "sample interval");
    ad::Tensor x = x0.value();
    double h = 0.0;
    PiState pi;
    for (std::size_t k = 0; k < n_ctl; ++k) {
      const double t = t0 + static_cast<double>(k) * cfg.control_interval;
      const double t_next = t0 + static_cast<double>(k + 1) * cfg.control_interval;
      ad::Var u = control(t, ad::constant(x));
      if (u.on_tape()) throw SolveError("ode_solve: dopri5 is evaluation-only");
      tr.control_times.push_back(t);
      tr.controls.push_back(u);
      if (!u.value().all_finite()) {
        tr.instability = Instability{t, "non-finite control"};
        return tr;
      }
      const PlainRhs f = [&](double s, const ad::Tensor& y) { return rhs(s, ad::constant(y), u).value(); };
      double last_ok = t;
      auto next = integrate_dopri5(std::move(x), t, t_next, f, cfg.rtol, cfg.atol, h, pi, &last_ok);
      if (!next) {
        tr.instability = Instability{last_ok, "step size underflow or non-finite state"};
        return tr;
      }
      x = std::move(*next);
      if ((k + 1) % per_sample == 0 || k + 1 == n_ctl) {
        tr.times.push_back(t_next);
        tr.states.push_back(ad::constant(x));
      }
    }
    return tr;
  }

  if (!(cfg.step > 0.0)) throw SolveError("ode_solve: step must be positive");
  const std::size_t n_steps = detail::ratio(span, cfg.step, "horizon");
  const std::size_t per_ctl = detail::ratio(cfg.control_interval, cfg.step, "control interval");
  const std::size_t per_sample = detail::ratio(cfg.sample_interval, cfg.step, "sample interval");
  const double tau = cfg.step;

  ad::Var x = x0;
  ad::Var u;
  for (std::size_t s = 0; s < n_steps; ++s) {
    const double t = t0 + static_cast<double>(s) * tau;
    if (s % per_ctl == 0) {
      u = control(t, x);
      tr.control_times.push_back(t);
      tr.controls.push_back(u);
      if (!u.value().all_finite()) {
        tr.instability = Instability{t, "non-finite control"};
        return tr;
      }
    }
    if (cfg.method == Method::euler) {
      x = ad::axpy(x, tau, rhs(t, x, u));
    } else {
      const ad::Var k1 = rhs(t, x, u);
      const ad::Var k2 = rhs(t + 0.5 * tau, ad::axpy(x, 0.5 * tau, k1), u);
      const ad::Var k3 = rhs(t + 0.5 * tau, ad::axpy(x, 0.5 * tau, k2), u);
      const ad::Var k4 = rhs(t + tau, ad::axpy(x, tau, k3), u);
      const ad::Var sum = ad::axpy(ad::axpy(ad::axpy(k1, 2.0, k2), 2.0, k3), 1.0, k4);
      x = ad::axpy(x, tau / 6.0, sum);
    }
    if (!x.value().all_finite()) {
      tr.instability = Instability{t, "non-finite state"};
      return tr;
    }
    if ((s + 1) % per_sample == 0 || s + 1 == n_steps) {
      tr.times.push_back(t0 + static_cast<double>(s + 1) * tau);
      tr.states.push_back(x);
    }
  }
  return tr;
}

/// Held control at each stored sample time.
inline std::vector<std::size_t> held_control_indices(const Trajectory& tr) {
  std::vector<std::size_t> out;
  out.reserve(tr.times.size());
  for (double t : tr.times) out.push_back(tr.controls.empty() ? 0 : tr.control_index_at(t));
  return out;
}

}  // namespace nodec::ode
