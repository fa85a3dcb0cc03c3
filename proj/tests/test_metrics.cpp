#include <gtest/gtest.h>

#include <numbers>

#include "gradcheck.hpp"
#include "nodec/metrics.hpp"

using namespace nodec;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

ode::Trajectory constant_control_trajectory(std::vector<double> u, double dt, std::size_t steps) {
  ode::Trajectory tr;
  tr.control_interval = dt;
  for (std::size_t k = 0; k <= steps; ++k) {
    tr.times.push_back(static_cast<double>(k) * dt);
    tr.states.push_back(ad::scalar(0.0));
  }
  for (std::size_t k = 0; k < steps; ++k) {
    tr.control_times.push_back(static_cast<double>(k) * dt);
    tr.controls.push_back(ad::constant(Tensor::vector(u)));
  }
  return tr;
}

ode::Trajectory phase_trajectory(const std::vector<std::vector<double>>& xs) {
  ode::Trajectory tr;
  tr.control_interval = 1.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    tr.times.push_back(static_cast<double>(k));
    tr.states.push_back(ad::constant(Tensor::vector(xs[k])));
  }
  return tr;
}

ode::Trajectory infection_trajectory(const std::vector<double>& infected, std::size_t n = 4) {
  ode::Trajectory tr;
  tr.control_interval = 0.1;
  for (std::size_t k = 0; k < infected.size(); ++k) {
    Tensor x(Shape{4, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      x.values[dyn::infected * n + i] = infected[k];
      x.values[i] = 1.0 - infected[k];
    }
    tr.times.push_back(0.1 * static_cast<double>(k));
    tr.states.push_back(ad::constant(x));
  }
  return tr;
}

}  // namespace

TEST(Energy, ZeroControls) {
  EXPECT_EQ(metrics::energy(constant_control_trajectory({0.0, 0.0}, 0.1, 10)), 0.0);
}

TEST(Energy, ConstantControlClosedForm) {
  const auto tr = constant_control_trajectory({1.5, 1.5, 1.5}, 0.01, 200);
  EXPECT_NEAR(metrics::energy(tr), 200 * 3 * 1.5 * 1.5 * 0.01, 1e-9);
}

TEST(Energy, InvariantUnderDriverReordering) {
  const auto a = constant_control_trajectory({1.0, -2.0, 0.5}, 0.1, 10);
  const auto b = constant_control_trajectory({0.5, 1.0, -2.0}, 0.1, 10);
  EXPECT_DOUBLE_EQ(metrics::energy(a), metrics::energy(b));
}

TEST(Energy, NonUniformSpacingIsAnError) {
  auto tr = constant_control_trajectory({1.0}, 0.1, 5);
  tr.control_times[2] += 0.03;
  EXPECT_THROW(metrics::energy(tr), metrics::MetricsError);
}

TEST(Energy, SeriesIsNonDecreasing) {
  Rng rng(3);
  ode::Trajectory tr = constant_control_trajectory({0.0}, 0.1, 20);
  for (auto& u : tr.controls) u = ad::constant(gradcheck::random_tensor(rng, Shape{3}, -2.0, 2.0));
  const auto s = metrics::energy_series(tr);
  for (std::size_t k = 1; k < s.size(); ++k) EXPECT_GE(s[k], s[k - 1]);
  EXPECT_NEAR(s.back(), metrics::energy(tr), 1e-12);
}

TEST(OrderParameter, Extremes) {
  EXPECT_NEAR(metrics::order_parameter(std::vector<double>{0.4, 0.4, 0.4}), 1.0, 1e-15);
  EXPECT_NEAR(metrics::order_parameter(std::vector<double>{0.0, std::numbers::pi}), 0.0, 1e-15);
}

TEST(OrderParameter, MatchesDoubleSum) {
  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 1 + rng.below(256);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(-10.0, 10.0);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s += std::cos(x[i] - x[j]);
    const double brute = std::sqrt(std::max(s, 0.0)) / static_cast<double>(n);
    EXPECT_NEAR(metrics::order_parameter(x), brute, 1e-12);
  }
}

TEST(OrderParameter, ShiftInvariant) {
  Rng rng(5);
  std::vector<double> x(50);
  for (auto& v : x) v = rng.uniform(-3.0, 3.0);
  auto y = x;
  for (auto& v : y) v += 1.234;
  EXPECT_NEAR(metrics::order_parameter(x), metrics::order_parameter(y), 1e-12);
}

TEST(OrderParameter, DifferentiableVersionAgrees) {
  Rng rng(6);
  const auto x = gradcheck::random_tensor(rng, Shape{30}, -3.0, 3.0);
  EXPECT_NEAR(metrics::order_parameter(ad::constant(x)).item(), metrics::order_parameter(x.values), 1e-14);
  const auto res = gradcheck::check([](std::span<const Var> v) { return metrics::order_parameter(v[0]); }, {x});
  EXPECT_LE(res.max_rel_error, 1e-5);
}

TEST(KuramotoLoss, SynchronizedIsMinusTwo) {
  const auto tr = phase_trajectory({{0.0, 2.0}, {1.0, 1.0}, {1.5, 1.5}, {2.0, 2.0}});
  EXPECT_NEAR(metrics::kuramoto_loss(tr).item(), -2.0, 1e-15);
}

TEST(KuramotoLoss, ConstantOrderParameter) {
  // Two oscillators at distance d have r = |cos(d / 2)|.
  const double d = 1.0, c = std::cos(d / 2);
  const auto tr = phase_trajectory({{0.0, 0.0}, {0.0, d}, {1.0, 1.0 + d}, {-2.0, -2.0 + d}});
  EXPECT_NEAR(metrics::kuramoto_loss(tr).item(), -2.0 * c, 1e-14);
}

TEST(KuramotoLoss, InitialSampleIsOmitted) {
  const auto tr = phase_trajectory({{0.0, std::numbers::pi}, {0.0, 0.0}});
  EXPECT_NEAR(metrics::kuramoto_loss(tr).item(), -2.0, 1e-15);
  EXPECT_THROW(metrics::kuramoto_loss(phase_trajectory({{0.0}})), metrics::MetricsError);
}

TEST(KuramotoLoss, BoundedBelow) {
  Rng rng(7);
  std::vector<std::vector<double>> xs(6, std::vector<double>(9));
  for (auto& x : xs)
    for (auto& v : x) v = rng.uniform(-5.0, 5.0);
  EXPECT_GE(metrics::kuramoto_loss(phase_trajectory(xs)).item(), -2.0);
}

TEST(EpidemicLoss, ZeroInfection) {
  const auto tr = infection_trajectory({0.0, 0.0, 0.0});
  const std::vector<std::size_t> t{0, 1};
  EXPECT_EQ(metrics::epidemic_loss(tr, t).loss.item(), 0.0);
}

TEST(EpidemicLoss, PeakSquaredAndTime) {
  const auto tr = infection_trajectory({0.1, 0.3, 0.5, 0.2});
  const std::vector<std::size_t> t{1, 3};
  const auto el = metrics::epidemic_loss(tr, t);
  EXPECT_NEAR(el.loss.item(), 0.25, 1e-15);
  EXPECT_EQ(el.sample, 2u);
  EXPECT_NEAR(el.t_star, 0.2, 1e-15);
}

TEST(EpidemicLoss, TargetMeanOnly) {
  auto tr = infection_trajectory({0.2, 0.2});
  Tensor x = tr.states[1].value();
  x.values[dyn::infected * 4 + 0] = 0.9;  // outside the target
  tr.states[1] = ad::constant(x);
  const std::vector<std::size_t> t{2, 3};
  EXPECT_NEAR(metrics::epidemic_loss(tr, t).peak, 0.2, 1e-15);
}

TEST(EpidemicLoss, Errors) {
  const auto tr = infection_trajectory({0.1, 0.2});
  EXPECT_THROW(metrics::epidemic_loss(tr, std::vector<std::size_t>{}), metrics::MetricsError);
  auto sparse = tr;
  sparse.control_interval = 0.01;
  EXPECT_THROW(metrics::epidemic_loss(sparse, std::vector<std::size_t>{0}), metrics::MetricsError);
}

TEST(Rewards, MonotoneSeriesTelescopes) {
  const std::vector<double> s{0.1, 0.15, 0.2, 0.4, 0.45};
  const auto r = metrics::rewards(s, 0.1);
  double sum = 0.0;
  for (double v : r.rho3) sum += v;
  EXPECT_NEAR(sum, -(0.45 * 0.45 - 0.1 * 0.1), 1e-15);
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_DOUBLE_EQ(r.rho1[k], -s[k] * s[k] * 0.1);
}

TEST(Rewards, ConstantSeriesHasNoRho3) {
  const auto r = metrics::rewards(std::vector<double>(8, 0.3), 0.1);
  for (double v : r.rho3) EXPECT_EQ(v, 0.0);
}

TEST(Rewards, SparseRewardMatchesEpidemicLoss) {
  const std::vector<double> s{0.1, 0.3, 0.5, 0.2};
  const auto r = metrics::rewards(s, 0.1);
  double sum = 0.0;
  for (std::size_t k = 0; k + 1 < s.size(); ++k) EXPECT_EQ(r.rho2[k], 0.0);
  for (double v : r.rho2) sum += v;
  const auto tr = infection_trajectory(s);
  EXPECT_EQ(sum, -metrics::epidemic_loss(tr, std::vector<std::size_t>{0, 1, 2, 3}).loss.item());
}

TEST(Rewards, PeakedSeriesTelescopes) {
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 2 + rng.below(200);
    const std::size_t peak_at = rng.below(n);
    std::vector<double> s(n);
    s[0] = rng.uniform(0.0, 0.3);
    for (std::size_t i = 1; i < n; ++i) s[i] = i <= peak_at ? s[i - 1] + rng.uniform(0.0, 0.01) : s[i - 1] * rng.uniform(0.9, 1.0);
    const auto r = metrics::rewards(s, 0.01);
    double sum = 0.0;
    for (double v : r.rho3) sum += v;
    const double mx = *std::max_element(s.begin(), s.end());
    EXPECT_NEAR(sum, -(mx * mx - s[0] * s[0]), 1e-9);
  }
}
