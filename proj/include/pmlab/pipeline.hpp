#pragma once

#include <string>
#include <vector>

#include "pmlab/evalkit.hpp"
#include "pmlab/experiment.hpp"
#include "pmlab/suppress.hpp"

namespace pmlab {

struct ArtifactPaths {
  std::string out_dir;

  std::string checkpoint() const { return out_dir + "/checkpoint.pmck"; }
  std::string pretrain_log() const { return out_dir + "/pretrain_log.csv"; }
  std::string closed_book() const { return out_dir + "/closed_book.csv"; }
  std::string benchmark() const { return out_dir + "/benchmark.jsonl"; }
  std::string benchmark_stats() const { return out_dir + "/benchmark_stats.json"; }
  std::string layer_stats() const { return out_dir + "/layer_stats.csv"; }
  std::string selection() const { return out_dir + "/selection.json"; }
  std::string intervention() const { return out_dir + "/intervention.csv"; }
  std::string adapter() const { return out_dir + "/adapter.pmck"; }
  std::string adapt_log() const { return out_dir + "/adapt_log.csv"; }
  std::string eval_json(const std::string& model_tag, const std::string& plan_tag) const {
    return out_dir + "/eval_" + model_tag + "_" + plan_tag + ".json";
  }
  std::string eval_csv(const std::string& model_tag, const std::string& plan_tag) const {
    return out_dir + "/eval_" + model_tag + "_" + plan_tag + ".csv";
  }
  std::string sweep_lambda() const { return out_dir + "/sweep_lambda.csv"; }
  std::string sweep_topn() const { return out_dir + "/sweep_topn.csv"; }
  std::string sweep_alphabeta() const { return out_dir + "/sweep_alphabeta.csv"; }
};

struct PretrainSummary {
  double final_loss = 0.0;
  double closed_book_em = 0.0;  // exact-match fraction in [0,1]
  int n_facts = 0;
};

struct AnalyzeSummary {
  std::vector<LayerStats> stats;
  SelectionResult selection;
};

PretrainSummary run_pretrain(const ExperimentConfig& cfg);
Benchmark run_build_benchmark(const ExperimentConfig& cfg);
AnalyzeSummary run_analyze(const ExperimentConfig& cfg);
InterventionResult run_intervene(const ExperimentConfig& cfg);
AdaptResult run_adapt(const ExperimentConfig& cfg);
EvalReport run_evaluate(const ExperimentConfig& cfg, const std::string& model_tag,
                        const std::string& plan_tag);
void run_sweep(const ExperimentConfig& cfg);
void run_all(const ExperimentConfig& cfg);

// Shared helpers (also used by tests).
ToyTransformer load_model_checked(const ExperimentConfig& cfg);
Benchmark load_benchmark_checked(const ExperimentConfig& cfg);
SelectionResult load_selection_checked(const ExperimentConfig& cfg);
SuppressionPlan pipeline_plan(const ExperimentConfig& cfg, const ToyTransformer& model,
                              const SelectionResult& selection, const Benchmark& benchmark);

}  // namespace pmlab
