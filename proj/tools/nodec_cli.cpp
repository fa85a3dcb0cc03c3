#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nodec/experiment.hpp"

namespace {

using nodec::exp::Config;
using nodec::exp::ConfigError;

Config load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  Config c = Config::load(path);
  if (seed) c.set("seed", std::to_string(*seed));
  return c;
}

int run_asserts(const std::vector<nodec::exp::MetricsRow>& rows, const std::vector<std::string>& asserts) {
  int status = 0;
  for (const auto& a : asserts) {
    const std::string failure = nodec::exp::check_assertion(rows, a);
    if (failure.empty()) {
      std::cout << "assert ok: " << a << '\n';
    } else {
      std::cerr << "assert failed: " << failure << '\n';
      status = 1;
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural ODE control of networked dynamics"};
  app.set_version_flag("--version", std::string("nodec ") + NODEC_VERSION);
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/latest", checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> asserts;
  std::vector<std::string> run_dirs;

  auto* train = app.add_subcommand("train", "train the NODEC controller");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--seed", seed, "override the master seed");
  train->add_option("--out", out_dir, "output directory");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate controllers on a trained checkpoint");
  evaluate->add_option("--config", config_path, "config file")->required();
  evaluate->add_option("--seed", seed, "override the master seed");
  evaluate->add_option("--out", out_dir, "output directory");
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file (default: <out>/checkpoint.nodec)");
  evaluate->add_option("--assert", asserts, "ordering on medians, e.g. 'peak:NODEC<TCC<RND'");

  auto* compare = app.add_subcommand("compare", "merge and compare evaluation runs");
  compare->add_option("runs", run_dirs, "run directories")->required()->expected(2, -1);
  compare->add_option("--out", out_dir, "output directory");
  compare->add_option("--assert", asserts, "ordering on medians over all runs");

  auto* gen = app.add_subcommand("gen-graph", "write the configured graph and its driver nodes");
  gen->add_option("--config", config_path, "config file")->required();
  gen->add_option("--seed", seed, "override the master seed");
  gen->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      const Config c = load_config(config_path, seed);
      nodec::exp::cmd_train(c, out_dir, std::cout);
      std::cout << "wrote " << out_dir << '\n';
      return 0;
    }
    if (*evaluate) {
      const Config c = load_config(config_path, seed);
      const std::string ckpt = checkpoint.empty() ? out_dir + "/checkpoint.nodec" : checkpoint;
      const auto sum = nodec::exp::cmd_evaluate(c, ckpt, out_dir, std::cout);
      for (const auto& line : sum.table) std::cout << line << '\n';
      return run_asserts(sum.rows, asserts);
    }
    if (*compare) {
      std::vector<nodec::exp::fs::path> runs(run_dirs.begin(), run_dirs.end());
      const auto res = nodec::exp::cmd_compare(runs, out_dir);
      for (const auto& line : res.table) std::cout << line << '\n';
      return run_asserts(res.merged, asserts);
    }
    if (*gen) {
      const Config c = load_config(config_path, seed);
      nodec::exp::cmd_gen_graph(c, out_dir, std::cout);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
