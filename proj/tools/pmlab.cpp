// pmlab: end-to-end experiment driver. Subcommands cover the full pipeline:
// pretrain -> build-benchmark -> analyze -> intervene -> adapt -> evaluate,
// plus hyperparameter sweeps and run-all.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "pmlab/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON")->required();
  cmd->add_option("--set", args.sets, "override config values, key.path=value")
      ->take_all()
      ->expected(-1);
  cmd->add_option_function<std::string>(
      "--out", [&args](const std::string& v) { args.out_dir = v; }, "output directory");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&args](std::uint64_t v) { args.seed = v; }, "global seed override");
}

pmlab::ExperimentConfig load(const CommonArgs& args) {
  return pmlab::load_experiment_config(args.config_path, args.sets, args.out_dir, args.seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for FFN suppression and knowledge-preference adaptation"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string model_tag = "vanilla";
  std::string plan_tag = "none";

  CLI::App* cmd_pretrain = app.add_subcommand("pretrain", "train the base model on the fact corpus");
  CLI::App* cmd_bench = app.add_subcommand("build-benchmark", "elicit answers and label conflicts");
  CLI::App* cmd_analyze = app.add_subcommand("analyze", "per-layer activation stats and selection");
  CLI::App* cmd_intervene = app.add_subcommand("intervene", "NLL sweep over suppression strengths");
  CLI::App* cmd_adapt = app.add_subcommand("adapt", "train the low-rank adapter on the suppressed model");
  CLI::App* cmd_eval = app.add_subcommand("evaluate", "faithfulness metrics on the unfaithful eval split");
  CLI::App* cmd_sweep = app.add_subcommand("sweep", "lambda / top-n / loss-weight grids");
  CLI::App* cmd_all = app.add_subcommand("run-all", "full pipeline into one artifact directory");

  for (CLI::App* cmd : {cmd_pretrain, cmd_bench, cmd_analyze, cmd_intervene, cmd_adapt, cmd_eval,
                        cmd_sweep, cmd_all}) {
    add_common(cmd, args);
  }
  cmd_eval->add_option("--model-tag", model_tag, "vanilla | adapted");
  cmd_eval->add_option("--plan-tag", plan_tag, "none | suppress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const pmlab::ExperimentConfig cfg = load(args);
    if (cmd_pretrain->parsed()) {
      auto summary = pmlab::run_pretrain(cfg);
      std::cout << "pretrain: final_loss=" << summary.final_loss
                << " closed_book_em=" << summary.closed_book_em << "\n";
    } else if (cmd_bench->parsed()) {
      auto bench = pmlab::run_build_benchmark(cfg);
      std::cout << "benchmark: facts=" << bench.counts.facts << " retained=" << bench.counts.retained
                << " faithful=" << bench.counts.faithful
                << " unfaithful=" << bench.counts.unfaithful << "\n";
    } else if (cmd_analyze->parsed()) {
      auto summary = pmlab::run_analyze(cfg);
      std::cout << "analyze: selected layers";
      for (int l : summary.selection.layers) std::cout << ' ' << l;
      std::cout << "\n";
    } else if (cmd_intervene->parsed()) {
      auto res = pmlab::run_intervene(cfg);
      std::cout << "intervene: " << res.lambdas.size() << " lambda points\n";
    } else if (cmd_adapt->parsed()) {
      auto res = pmlab::run_adapt(cfg);
      std::cout << "adapt: mean combined loss " << res.initial_mean_loss << " -> "
                << res.final_mean_loss << "\n";
    } else if (cmd_eval->parsed()) {
      auto report = pmlab::run_evaluate(cfg, model_tag, plan_tag);
      std::cout << "evaluate " << model_tag << "/" << plan_tag << ": conr=" << report.metrics.conr
                << " memr=" << report.metrics.memr << " mr="
                << (report.metrics.mr_defined ? std::to_string(report.metrics.mr) : "undefined")
                << "\n";
    } else if (cmd_sweep->parsed()) {
      pmlab::run_sweep(cfg);
      std::cout << "sweep: wrote lambda/top-n/loss-weight grids\n";
    } else if (cmd_all->parsed()) {
      pmlab::run_all(cfg);
      std::cout << "run-all: artifacts in " << cfg.out_dir << "\n";
    }
  } catch (const pmlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pmlab::StaleArtifactError& e) {
    std::cerr << "stale artifact: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
