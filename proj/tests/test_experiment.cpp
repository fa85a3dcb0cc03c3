#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "nodec/experiment.hpp"

using namespace nodec;
using exp::Config;
using exp::ConfigError;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nodec_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NODEC_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* tiny_kuramoto =
    "experiment = kuramoto\n"
    "seed = 5\n"
    "kuramoto.nodes = 16\n"
    "kuramoto.mean_degree = 4\n"
    "kuramoto.eval_horizon = 2\n"
    "kuramoto.eval_samples = 3\n"
    "train.epochs = 3\n"
    "train.batch = 2\n"
    "train.max_horizon = 2\n"
    "solver.step = 0.05\n"
    "solver.control_interval = 0.05\n"
    "eval.step = 0.01\n"
    "eval.control_interval = 0.01\n";

const char* tiny_sir =
    "experiment = sir\n"
    "seed = 2\n"
    "sir.rows = 6\n"
    "sir.cols = 6\n"
    "sir.budget = 30\n"
    "sir.rounds = 2\n"
    "sir.horizon = 1\n"
    "train.epochs = 2\n"
    "solver.step = 0.01\n"
    "solver.control_interval = 0.05\n"
    "eval.step = 0.001\n"
    "eval.control_interval = 0.01\n"
    "eval.sample_interval = 0.01\n";

}  // namespace

TEST(Config, ParsesValuesAndDefaults) {
  const auto c = Config::from_string("experiment = kuramoto  # comment\n\n  seed=7\n");
  EXPECT_EQ(c.experiment(), exp::Experiment::kuramoto);
  EXPECT_EQ(c.count("seed"), 7u);
  EXPECT_EQ(c.count("kuramoto.nodes"), 1024u);
  EXPECT_EQ(c.counts("kuramoto.hidden"), (std::vector<std::size_t>{3, 3}));
  EXPECT_EQ(c.list("eval.controllers"), (std::vector<std::string>{"NODEC", "FC"}));
  const auto s = Config::from_string("experiment = sir\n");
  EXPECT_EQ(s.number("sir.beta"), 6.0);
  EXPECT_EQ(s.list("eval.controllers").size(), 4u);
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      Config::from_string(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("experiment = sir\nsir.bogus = 1\n").find(":2: unknown key 'sir.bogus'"), std::string::npos);
  EXPECT_NE(message("experiment = sir\nseed = 1\nseed = 2\n").find(":3:"), std::string::npos);
  EXPECT_NE(message("experiment = sir\nno equals sign\n").find(":2:"), std::string::npos);
  EXPECT_NE(message("seed = 1\n").find("experiment"), std::string::npos);
  EXPECT_NE(message("experiment = lorenz\n").find("lorenz"), std::string::npos);
}

TEST(Config, TypedAccessorsReject) {
  const auto c = Config::from_string("experiment = sir\nsir.beta = fast\nsir.rows = -3\nsir.rnd_per_step = maybe\n");
  EXPECT_THROW(c.number("sir.beta"), ConfigError);
  EXPECT_THROW(c.count("sir.rows"), ConfigError);
  EXPECT_THROW(c.flag("sir.rnd_per_step"), ConfigError);
  EXPECT_THROW(c.get("nope"), ConfigError);
}

TEST(Config, HashIgnoresOrderAndComments) {
  const auto a = Config::from_string("experiment = sir\nseed = 3\nsir.beta = 5\n");
  const auto b = Config::from_string("# header\nsir.beta = 5\nseed = 3   # trailing\nexperiment = sir\n");
  EXPECT_EQ(a.hash(), b.hash());
  const auto d = Config::from_string("experiment = sir\nseed = 4\nsir.beta = 5\n");
  EXPECT_NE(a.hash(), d.hash());
}

TEST(Config, ResolvedRoundTrips) {
  const auto a = Config::from_string(tiny_sir);
  const auto b = Config::from_string(a.resolved());
  EXPECT_EQ(a.resolved(), b.resolved());
  EXPECT_EQ(a.hash(), b.hash());
}

TEST(Config, DopriIsEvaluationOnly) {
  auto c = Config::from_string("experiment = kuramoto\nsolver.method = dopri5\n");
  EXPECT_THROW(exp::train_solver(c), ConfigError);
  c = Config::from_string("experiment = kuramoto\neval.method = dopri5\n");
  EXPECT_EQ(exp::eval_solver(c).method, ode::Method::dopri5);
}

TEST(Seeds, DerivedStreamsDiffer) {
  EXPECT_NE(exp::derive_seed(1, 1), exp::derive_seed(1, 2));
  EXPECT_NE(exp::derive_seed(1, 1), exp::derive_seed(2, 1));
  EXPECT_EQ(exp::derive_seed(9, 3), exp::derive_seed(9, 3));
}

TEST(Doubles, FormatRoundTrips) {
  Rng rng(11);
  for (int k = 0; k < 1000; ++k) {
    const double v = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.below(200)) - 100);
    EXPECT_EQ(exp::parse_double(exp::format_double(v)), v);
  }
  EXPECT_TRUE(std::isnan(exp::parse_double(exp::format_double(std::nan("")))));
  EXPECT_EQ(exp::parse_double(exp::format_double(-INFINITY)), -INFINITY);
}

TEST(MetricsCsv, RoundTripIsExact) {
  std::vector<exp::MetricsRow> rows{{"kuramoto-1", "NODEC", 3, 1.0 / 3.0, 0.9, 0.8, 0.1, NAN, NAN},
                                    {"sir-2", "TCC", 4, 1e-300, NAN, NAN, NAN, 0.123456789, 2.5}};
  std::stringstream ss;
  exp::write_metrics_csv(ss, rows);
  const auto back = exp::read_metrics_csv(ss, "mem");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].energy, 1.0 / 3.0);
  EXPECT_EQ(back[1].energy, 1e-300);
  EXPECT_EQ(back[1].peak, 0.123456789);
  EXPECT_TRUE(std::isnan(back[0].peak));
  EXPECT_EQ(back[1].controller, "TCC");
  std::stringstream bad("run_id,oops\n");
  EXPECT_THROW(exp::read_metrics_csv(bad, "bad"), std::runtime_error);
}

TEST(Assertions, OrderingOnMedians) {
  std::vector<exp::MetricsRow> rows;
  for (double p : {0.1, 0.2, 0.9}) rows.push_back({"a", "NODEC", 1, 0, NAN, NAN, NAN, p, 0});
  for (double p : {0.3, 0.4, 0.0}) rows.push_back({"a", "RND", 1, 0, NAN, NAN, NAN, p, 0});
  EXPECT_EQ(exp::check_assertion(rows, "peak:NODEC<RND"), "");
  EXPECT_NE(exp::check_assertion(rows, "peak:RND<NODEC"), "");
  EXPECT_NE(exp::check_assertion(rows, "peak:NODEC<F"), "");
  EXPECT_THROW(exp::check_assertion(rows, "peak NODEC<RND"), ConfigError);
  EXPECT_THROW(exp::median_of(rows, "NODEC", "speed"), std::exception);
}

TEST(Compare, ListsEveryMissingMetricsFile) {
  const auto dir = scratch("compare_missing");
  try {
    exp::cmd_compare({dir / "a", dir / "b"}, dir / "out");
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find((dir / "a" / "metrics.csv").string()), std::string::npos);
    EXPECT_NE(msg.find((dir / "b" / "metrics.csv").string()), std::string::npos);
  }
}

TEST(Compare, RelativeToFirstRun) {
  const auto dir = scratch("compare_ok");
  for (auto [name, e] : {std::pair{"a", 2.0}, std::pair{"b", 3.0}}) {
    fs::create_directories(dir / name);
    std::ofstream os(dir / name / "metrics.csv");
    exp::write_metrics_csv(os, {{name, "FC", 1, e, 0.5, 0.5, 0.5, NAN, NAN}});
  }
  const auto res = exp::cmd_compare({dir / "a", dir / "b"}, dir / "out");
  ASSERT_EQ(res.table.size(), 3u);
  EXPECT_NE(res.table[2].find("0.5"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "out" / "compare.csv"));
  EXPECT_EQ(res.merged.size(), 2u);
}

TEST(Sir, FreeControllerConservesOnSmallPreset) {
  const auto c = Config::from_string(tiny_sir);
  const auto s = exp::build_sir(c);
  ctl::FreeController free_ctl(s.drivers.size());
  const auto tr = ode::ode_solve(ad::constant(s.x0), 0.0, s.horizon, exp::sir_rhs_fn(s.system), free_ctl.bind(),
                                 exp::eval_solver(c));
  for (const auto& x : tr.states) EXPECT_NEAR(dyn::sir_total(x.value()), 36.0, 1e-6);
}

TEST(Sir, AutoHorizonIsPositive) {
  auto c = Config::from_string(tiny_sir);
  c.set("sir.horizon", "auto");
  const auto s = exp::build_sir(c);
  EXPECT_GT(s.horizon, 0.5);
  EXPECT_LT(s.horizon, 50.0);
}

TEST(Pipeline, TrainEvaluateWritesArtifacts) {
  const auto dir = scratch("pipeline");
  const auto c = Config::from_string(tiny_kuramoto);
  std::ostringstream log;
  const auto t = exp::cmd_train(c, dir, log);
  EXPECT_TRUE(fs::exists(t.checkpoint));
  for (const char* f : {"loss.csv", "config.resolved", "run.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto e = exp::cmd_evaluate(c, t.checkpoint, dir, log);
  EXPECT_EQ(e.rows.size(), 3u * c.list("eval.controllers").size());
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  const auto rec = nlohmann::json::parse(exp::read_text(dir / "run.json"));
  EXPECT_TRUE(rec.contains("train"));
  EXPECT_TRUE(rec.contains("evaluate"));
  EXPECT_EQ(rec["config_hash"], exp::hex64(c.hash()));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  {
    std::ofstream os(dir / "tiny.cfg");
    os << tiny_kuramoto;
    std::ofstream bad(dir / "bad.cfg");
    bad << "experiment = kuramoto\nkuramoto.colour = red\n";
  }
  const std::string cfg = (dir / "tiny.cfg").string(), out = (dir / "run").string();
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train"), 2);
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.cfg").string() + " --out " + out), 2);
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.cfg").string() + " --out " + out), 2);
  EXPECT_EQ(run_cli("train --config " + cfg + " --out " + out), 0);
  EXPECT_EQ(run_cli("evaluate --config " + cfg + " --out " + out + " --assert 'E:NODEC<FC'"), 0);
  EXPECT_EQ(run_cli("evaluate --config " + cfg + " --out " + out + " --assert 'E:FC<NODEC'"), 1);
  EXPECT_EQ(run_cli("evaluate --config " + cfg + " --out " + out + " --checkpoint " + (dir / "none").string()), 1);
  EXPECT_EQ(run_cli("compare " + out + " " + (dir / "nothing").string() + " --out " + (dir / "cmp").string()), 1);
  EXPECT_EQ(run_cli("gen-graph --config " + cfg + " --out " + (dir / "g").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "g" / "graph.edges"));
}
