#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "nodec/controllers.hpp"
#include "nodec/dynamics.hpp"
#include "nodec/metrics.hpp"
#include "nodec/odesolve.hpp"

using namespace nodec;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

const ode::Rhs decay = [](double, const Var& x, const Var&) { return -x; };
const ode::ControlFn no_control = [](double, const Var&) { return ad::constant(Tensor(Shape{0})); };

double rk4_error(double tau) {
  ode::SolveConfig c;
  c.method = ode::Method::rk4;
  c.step = tau;
  c.control_interval = tau;
  c.sample_interval = tau;
  const auto tr = ode::ode_solve(ad::scalar(1.0), 0.0, 1.0, decay, no_control, c);
  return std::abs(tr.final_state().item() - std::exp(-1.0));
}

}  // namespace

TEST(FixedStep, EulerOneStep) {
  ode::SolveConfig c;
  c.method = ode::Method::euler;
  c.step = 0.1;
  c.control_interval = 0.1;
  c.sample_interval = 0.1;
  const auto tr = ode::ode_solve(ad::scalar(1.0), 0.0, 0.1, decay, no_control, c);
  EXPECT_DOUBLE_EQ(tr.final_state().item(), 0.9);
  EXPECT_EQ(tr.times.size(), 2u);
}

TEST(FixedStep, Rk4ConvergenceSlope) {
  // Least-squares slope of log error against log step.
  std::vector<double> lx, ly;
  for (double tau : {0.1, 0.05, 0.025, 0.0125}) {
    lx.push_back(std::log(tau));
    ly.push_back(std::log(rk4_error(tau)));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) mx += lx[i] / lx.size(), my += ly[i] / ly.size();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) num += (lx[i] - mx) * (ly[i] - my), den += (lx[i] - mx) * (lx[i] - mx);
  EXPECT_NEAR(num / den, 4.0, 0.3);
  EXPECT_NEAR(rk4_error(0.1) / rk4_error(0.05), 16.0, 2.0);
}

TEST(FixedStep, ZeroDynamicsKeepsStateExactly) {
  ode::Rhs zero = [](double, const Var& x, const Var&) { return ad::scale(x, 0.0); };
  ode::ControlFn ctl = [](double, const Var&) { return ad::constant(Tensor::vector({3.0})); };
  const Tensor x0 = Tensor::vector({0.3, -1.7, 2.5});
  ode::SolveConfig c;
  const auto tr = ode::ode_solve(ad::constant(x0), 0.0, 1.0, zero, ctl, c);
  EXPECT_EQ(tr.final_state().value().values, x0.values);
}

TEST(FixedStep, SamplesIncludeStartAndEnd) {
  ode::SolveConfig c;
  c.step = 0.01;
  c.control_interval = 0.05;
  c.sample_interval = 0.3;
  const auto tr = ode::ode_solve(ad::scalar(1.0), 0.0, 1.0, decay, no_control, c);
  EXPECT_EQ(tr.times.front(), 0.0);
  EXPECT_NEAR(tr.times.back(), 1.0, 1e-12);
  EXPECT_EQ(tr.states.front().item(), 1.0);
  for (std::size_t k = 1; k < tr.times.size(); ++k) EXPECT_GT(tr.times[k], tr.times[k - 1]);
  EXPECT_EQ(tr.times.size(), tr.states.size());
  EXPECT_EQ(tr.controls.size(), 20u);
}

TEST(FixedStep, ControlIntervalMustBeAMultipleOfTheStep) {
  ode::SolveConfig c;
  c.step = 0.01;
  c.control_interval = 0.015;
  EXPECT_THROW(ode::ode_solve(ad::scalar(1.0), 0.0, 1.0, decay, no_control, c), ode::SolveError);
  c.control_interval = 0.005;
  EXPECT_THROW(ode::ode_solve(ad::scalar(1.0), 0.0, 1.0, decay, no_control, c), ode::SolveError);
  EXPECT_THROW(ode::ode_solve(ad::scalar(1.0), 1.0, 1.0, decay, no_control, ode::SolveConfig{}), ode::SolveError);
}

TEST(FixedStep, ZeroOrderHoldEvaluatesControllerOnlyAtInteractionPoints) {
  int calls = 0;
  std::vector<double> seen;
  ode::ControlFn ctl = [&](double t, const Var&) {
    ++calls;
    seen.push_back(t);
    return ad::constant(Tensor::vector({t}));
  };
  ode::Rhs rhs = [](double, const Var&, const Var& u) { return u; };
  ode::SolveConfig c;
  c.method = ode::Method::rk4;
  c.step = 0.01;
  c.control_interval = 0.1;
  c.sample_interval = 0.01;
  const auto tr = ode::ode_solve(ad::constant(Tensor::vector({0.0})), 0.0, 1.0, rhs, ctl, c);
  EXPECT_EQ(calls, 10);
  // x' = u held: x(1) = sum_k t_k * 0.1
  double expected = 0.0;
  for (double t : seen) expected += t * 0.1;
  EXPECT_NEAR(tr.final_state().item(), expected, 1e-12);
  // Held control at every stored sample is the one from the last interaction.
  const auto held = ode::held_control_indices(tr);
  for (std::size_t k = 0; k + 1 < tr.times.size(); ++k)
    EXPECT_EQ(held[k], static_cast<std::size_t>(std::floor(tr.times[k] / 0.1 + 1e-9)));
}

TEST(FixedStep, InstabilityIsReportedWithLastFiniteTime) {
  ode::Rhs blow = [](double, const Var& x, const Var&) { return ad::exp(x); };
  ode::SolveConfig c;
  c.method = ode::Method::euler;
  c.step = 0.1;
  c.control_interval = 0.1;
  c.sample_interval = 0.1;
  const auto tr = ode::ode_solve(ad::scalar(5.0), 0.0, 10.0, blow, no_control, c);
  ASSERT_TRUE(tr.unstable());
  EXPECT_LT(tr.instability->last_finite_time, 10.0);
  EXPECT_TRUE(tr.states.back().value().all_finite());
}

TEST(FixedStep, PlainAndDifferentiableModesAgreeBitwise) {
  const std::size_t n = 6;
  const auto g = graph::erdos_renyi(n, 0.6, 3);
  Rng rng(4);
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(-1, 1);
  const auto drivers = graph::DriverMap(n, {0, 2, 5});
  dyn::KuramotoSystem sys(g, 0.4, w, drivers);
  ctl::MlpController mlp(n, {3, 3}, drivers.size(), 9);
  ode::Rhs rhs = [&](double, const Var& x, const Var& u) { return dyn::kuramoto_rhs(x, u, sys); };
  const Tensor x0 = gradcheck::random_tensor(rng, Shape{n});
  ode::SolveConfig c;
  c.step = 0.05;
  c.control_interval = 0.1;
  c.sample_interval = 0.5;
  const auto plain = ode::ode_solve(ad::constant(x0), 0.0, 2.0, rhs, mlp.bind(), c);
  ad::Tape tape;
  const auto diff = ode::ode_solve(ad::constant(x0), 0.0, 2.0, rhs, mlp.bind(mlp.params().on_tape(tape)), c);
  ASSERT_TRUE(diff.final_state().on_tape());
  ASSERT_EQ(plain.states.size(), diff.states.size());
  for (std::size_t k = 0; k < plain.states.size(); ++k) {
    const auto& a = plain.states[k].value().values;
    const auto& b = diff.states[k].value().values;
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
  }
}

TEST(FixedStep, GradientThroughEulerSolveMatchesFiniteDifferences) {
  const std::size_t n = 4;
  const graph::Graph g(n, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});
  const std::vector<double> w{0.3, -0.2, 0.5, -0.6};
  const auto drivers = graph::DriverMap(n, {1, 3});
  dyn::KuramotoSystem sys(g, 0.4, w, drivers);
  ctl::MlpController mlp(n, {3, 3}, drivers.size(), 2);
  ode::Rhs rhs = [&](double, const Var& x, const Var& u) { return dyn::kuramoto_rhs(x, u, sys); };
  const Tensor x0 = Tensor::vector({0.1, 1.2, -0.7, 2.0});
  ode::SolveConfig c;
  c.method = ode::Method::euler;
  c.step = 0.05;
  c.control_interval = 0.05;
  c.sample_interval = 0.05;
  std::vector<Tensor> params;
  for (const auto& p : mlp.params()) params.push_back(p.value);
  const auto res = gradcheck::check(
      [&](std::span<const Var> ws) {
        const auto tr = ode::ode_solve(ad::constant(x0), 0.0, 1.0, rhs,
                                       mlp.bind(std::vector<Var>(ws.begin(), ws.end())), c);
        return metrics::kuramoto_loss(tr);
      },
      params);
  EXPECT_LE(res.max_rel_error, 1e-4);
}

TEST(Dopri5, ZeroDynamicsHasZeroErrorAndMaximalGrowth) {
  ode::PiState pi;
  const auto s = ode::dopri5_step(Tensor::vector({1.0, 2.0}), 0.0, 0.1,
                                  [](double, const Tensor& x) { return Tensor(x.shape, 0.0); }, 1e-6, 1e-8, pi);
  EXPECT_TRUE(s.accepted);
  EXPECT_EQ(s.error, 0.0);
  EXPECT_DOUBLE_EQ(s.h_next, 0.5);
}

TEST(Dopri5, ExponentialDecay) {
  ode::SolveConfig c;
  c.method = ode::Method::dopri5;
  c.rtol = 1e-8;
  c.atol = 1e-8;
  c.control_interval = 1.0;
  c.sample_interval = 1.0;
  const auto tr = ode::ode_solve(ad::scalar(1.0), 0.0, 1.0, decay, no_control, c);
  EXPECT_LE(std::abs(tr.final_state().item() - std::exp(-1.0)), 1e-7);
}

TEST(Dopri5, HarmonicOscillatorEnergyDrift) {
  ode::Rhs osc = [](double, const Var& x, const Var&) {
    return ad::constant(Tensor::vector({x[1], -x[0]}));
  };
  ode::SolveConfig c;
  c.method = ode::Method::dopri5;
  c.rtol = 1e-8;
  c.atol = 1e-8;
  c.control_interval = 1.0;
  c.sample_interval = 1.0;
  const auto tr = ode::ode_solve(ad::constant(Tensor::vector({1.0, 0.0})), 0.0, 100.0, osc, no_control, c);
  double worst = 0.0;
  for (const auto& s : tr.states) worst = std::max(worst, std::abs(s[0] * s[0] + s[1] * s[1] - 1.0));
  EXPECT_LE(worst, 1e-4);
}

TEST(Dopri5, RejectsTapeInputs) {
  ode::SolveConfig c;
  c.method = ode::Method::dopri5;
  c.control_interval = 0.5;
  ad::Tape tape;
  EXPECT_THROW(ode::ode_solve(tape.variable(Tensor::scalar(1.0)), 0.0, 1.0, decay, no_control, c), ode::SolveError);
}

TEST(Dopri5, NonPositiveStepIsAnError) {
  ode::PiState pi;
  EXPECT_THROW(ode::dopri5_step(Tensor::scalar(1.0), 0.0, 0.0, [](double, const Tensor& x) { return x; }, 1e-6, 1e-8, pi),
               ode::SolveError);
}

TEST(Dopri5, AgreesWithFineRk4UnderHeldControl) {
  ode::Rhs rhs = [](double, const Var& x, const Var& u) { return -x + u; };
  ode::ControlFn ctl = [](double t, const Var&) { return ad::scalar(std::sin(t)); };
  ode::SolveConfig a;
  a.method = ode::Method::dopri5;
  a.rtol = 1e-10;
  a.atol = 1e-12;
  a.control_interval = 0.1;
  a.sample_interval = 0.1;
  ode::SolveConfig b;
  b.step = 0.001;
  b.control_interval = 0.1;
  b.sample_interval = 0.1;
  const auto ta = ode::ode_solve(ad::scalar(0.5), 0.0, 3.0, rhs, ctl, a);
  const auto tb = ode::ode_solve(ad::scalar(0.5), 0.0, 3.0, rhs, ctl, b);
  ASSERT_EQ(ta.states.size(), tb.states.size());
  for (std::size_t k = 0; k < ta.states.size(); ++k) EXPECT_NEAR(ta.states[k].item(), tb.states[k].item(), 1e-9);
}

TEST(Methods, ParseRoundTrip) {
  for (auto m : {ode::Method::euler, ode::Method::rk4, ode::Method::dopri5})
    EXPECT_EQ(ode::parse_method(ode::method_name(m)), m);
  EXPECT_THROW(ode::parse_method("midpoint"), std::invalid_argument);
}
