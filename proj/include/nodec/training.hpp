#pragma once

// Gradient-based training of controller weights through the solver: the
// plain loop, the curriculum over growing horizons, and the adaptive learning
// rate loop with best-model restore.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nodec/autodiff.hpp"
#include "nodec/controllers.hpp"
#include "nodec/odesolve.hpp"
#include "nodec/random.hpp"

namespace nodec::train {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 100;
  double eta = 0.01;
  std::size_t batch = 8;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double step_size = 1.0;     // curriculum window length
  double max_horizon = 40.0;  // curriculum cap on T
  double tol_ratio = 1.5;     // adaptive
  double zeta = 0.5;          // adaptive shrink factor
  std::uint64_t seed = 1;
};

struct AdamState {
  std::vector<ad::Tensor> m, v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update, in place.
inline void adam_step(ctl::ParameterSet& p, const std::vector<ad::Tensor>& grads, AdamState& s, double eta,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (grads.size() != p.size()) throw std::invalid_argument("adam_step: gradient count differs from parameter count");
  if (s.m.empty()) {
    for (const auto& q : p) {
      s.m.emplace_back(q.value.shape, 0.0);
      s.v.emplace_back(q.value.shape, 0.0);
    }
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
  for (std::size_t k = 0; k < p.size(); ++k) {
    auto& w = p[k].value.values;
    const auto& g = grads[k].values;
    if (g.size() != w.size()) throw ad::ShapeError("adam_step", grads[k].shape, p[k].value.shape);
    auto& m = s.m[k].values;
    auto& v = s.v[k].values;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= eta * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

inline void sgd_step(ctl::ParameterSet& p, const std::vector<ad::Tensor>& grads, double eta) {
  if (grads.size() != p.size()) throw std::invalid_argument("sgd_step: gradient count differs from parameter count");
  for (std::size_t k = 0; k < p.size(); ++k)
    for (std::size_t i = 0; i < p[k].value.size(); ++i) p[k].value.values[i] -= eta * grads[k].values[i];
}

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ctl::ParameterSet& p, const std::vector<ad::Tensor>& grads, double eta) {
    if (cfg_.optimizer == OptimizerKind::adam)
      adam_step(p, grads, state_, eta, cfg_.beta1, cfg_.beta2, cfg_.eps);
    else
      sgd_step(p, grads, eta);
  }

  void reset() { state_ = AdamState{}; }

 private:
  TrainConfig cfg_;
  AdamState state_;
};

struct HistoryRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double eta = 0.0;
  double horizon = 0.0;
  bool instability = false;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

/// Loss of one differentiable solve; `unstable` marks a numerical blow-up.
struct Evaluation {
  ad::Var loss;
  bool unstable = false;
};

using Objective = std::function<Evaluation(const ode::ControlFn&)>;

struct LossAndGrad {
  double loss = 0.0;
  bool unstable = false;
  std::vector<ad::Tensor> grads;
};

inline LossAndGrad loss_and_grad(const ctl::Controller& c, const Objective& objective) {
  ad::Tape tape;
  const auto w = c.params().on_tape(tape);
  Evaluation ev = objective(c.bind(w));
  LossAndGrad out;
  out.unstable = ev.unstable || !std::isfinite(ev.loss.item());
  out.loss = ev.loss.item();
  if (out.unstable) return out;
  const auto g = tape.backward(ev.loss);
  for (const auto& v : w) out.grads.push_back(g.of(v));
  for (const auto& t : out.grads)
    if (!t.all_finite()) out.unstable = true;
  return out;
}

/// Solve, loss, backward, update; an unstable epoch is skipped and recorded
/// with the previous loss.
inline TrainResult train_basic(ctl::Controller& c, const Objective& objective, const TrainConfig& cfg) {
  Optimizer opt(cfg);
  TrainResult res;
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto lg = loss_and_grad(c, objective);
    HistoryRow row{e, lg.unstable ? prev : lg.loss, cfg.eta, 0.0, lg.unstable};
    res.history.push_back(row);
    if (lg.unstable) continue;
    prev = lg.loss;
    if (lg.loss < res.best_loss) {
      res.best_loss = lg.loss;
      res.best_epoch = e;
    }
    opt.step(c.params(), lg.grads, cfg.eta);
  }
  return res;
}

/// Adaptive learning rate: a loss above tol_ratio times the previous one, or
/// an unstable solve, restores the best weights, multiplies eta by zeta and
/// resets the optimizer. Training stops early once eta drops below 1e-12.
/// The controller ends holding the best weights seen.
inline TrainResult train_adaptive(ctl::Controller& c, const Objective& objective, const TrainConfig& cfg) {
  Optimizer opt(cfg);
  TrainResult res;
  ctl::ParameterSet best = c.params();
  double previous = std::numeric_limits<double>::infinity();
  double eta = cfg.eta;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto lg = loss_and_grad(c, objective);
    res.history.push_back({e, lg.loss, eta, 0.0, lg.unstable});
    if (lg.unstable || lg.loss > cfg.tol_ratio * previous) {
      c.params() = best;
      eta *= cfg.zeta;
      opt.reset();
      if (eta < 1e-12) break;
      continue;
    }
    if (lg.loss < res.best_loss) {
      best = c.params();
      res.best_loss = lg.loss;
      res.best_epoch = e;
    }
    previous = lg.loss;
    opt.step(c.params(), lg.grads, eta);
  }
  c.params() = best;
  return res;
}

/// Curriculum problem: the system, solver settings for each window, and the
/// per-state score whose mean and minimum over windows are maximized.
struct CurriculumProblem {
  std::size_t state_dim = 0;
  ode::Rhs rhs;
  ode::SolveConfig solver;
  std::function<ad::Var(const ad::Var& x)> score;
};

/// Each epoch grows the horizon by 2c, c ~ U(0, 1), capped at max_horizon,
/// and draws a batch of N(0, 1) initial states. Each member is integrated in
/// windows of step_size; the loss is -(sum_w (step_size / T) s_w + min_w s_w)
/// averaged over the batch. An unstable member aborts the epoch's update.
inline TrainResult train_curriculum(ctl::Controller& c, const CurriculumProblem& prob, const TrainConfig& cfg,
                                    const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  if (cfg.batch == 0) throw std::invalid_argument("train_curriculum: batch must be >= 1");
  if (!(cfg.step_size > 0.0)) throw std::invalid_argument("train_curriculum: step size must be positive");
  Optimizer opt(cfg);
  Rng rng(cfg.seed);
  TrainResult res;
  double horizon = 0.0;
  ode::SolveConfig window = prob.solver;
  window.sample_interval = cfg.step_size;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    horizon = std::min(horizon + 2.0 * rng.uniform(), cfg.max_horizon);
    std::vector<ad::Tensor> x0s;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      ad::Tensor x(ad::Shape{prob.state_dim}, 0.0);
      for (auto& v : x.values) v = rng.normal();
      x0s.push_back(std::move(x));
    }
    const double weight = cfg.step_size / horizon;

    std::vector<ad::Tensor> grads;
    double loss = 0.0;
    bool unstable = false;
    for (std::size_t b = 0; b < cfg.batch && !unstable; ++b) {
      const Objective obj = [&](const ode::ControlFn& ctl) {
        Evaluation ev;
        ad::Var x = ad::constant(x0s[b]);
        std::vector<ad::Var> scores;
        for (std::size_t k = 0; static_cast<double>(k) * cfg.step_size < horizon; ++k) {
          const double t = static_cast<double>(k) * cfg.step_size;
          auto tr = ode::ode_solve(x, t, t + cfg.step_size, prob.rhs, ctl, window);
          if (tr.unstable()) {
            ev.unstable = true;
            ev.loss = ad::scalar(std::numeric_limits<double>::quiet_NaN());
            return ev;
          }
          x = tr.final_state();
          scores.push_back(prob.score(x));
        }
        const ad::Var s = ad::stack(std::span<const ad::Var>(scores));
        ev.loss = -(ad::scale(ad::sum(s), weight) + ad::min(s));
        return ev;
      };
      auto lg = loss_and_grad(c, obj);
      if (lg.unstable) {
        unstable = true;
        break;
      }
      loss += lg.loss / static_cast<double>(cfg.batch);
      if (grads.empty()) {
        grads = std::move(lg.grads);
        for (auto& g : grads)
          for (auto& v : g.values) v /= static_cast<double>(cfg.batch);
      } else {
        for (std::size_t k = 0; k < grads.size(); ++k)
          for (std::size_t i = 0; i < grads[k].size(); ++i)
            grads[k].values[i] += lg.grads[k].values[i] / static_cast<double>(cfg.batch);
      }
    }
    HistoryRow row{e, unstable ? std::numeric_limits<double>::quiet_NaN() : loss, cfg.eta, horizon, unstable};
    res.history.push_back(row);
    if (on_epoch) on_epoch(row);
    if (unstable) continue;
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_epoch = e;
    }
    opt.step(c.params(), grads, cfg.eta);
  }
  return res;
}

inline void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& h) {
  os << "epoch,loss,eta,T_curriculum,instability\n";
  os.precision(17);
  for (const auto& r : h)
    os << r.epoch << ',' << r.loss << ',' << r.eta << ',' << r.horizon << ',' << (r.instability ? 1 : 0) << '\n';
}

}  // namespace nodec::train
