#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmlab/checkpoint.hpp"
#include "pmlab/model.hpp"
#include "pmlab/plan.hpp"
#include "pmlab/suppress.hpp"

namespace pmlab {

struct AdaptConfig {
  double alpha = 0.5;
  double beta = 0.5;
  double gamma_start = 1.0;
  double gamma_end = 5.0;
  int rank = 4;
  double lr = 1e-3;  // desk-scale rate for rank-4 adapters on the toy model
  int steps = 600;   // desk-scale budget
  int batch = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

// One adapted matrix W with low-rank factors: effective weight W + A B.
// B starts at zero so a fresh adapter leaves the model unchanged.
struct AdapterTarget {
  std::string name;  // e.g. "layer3.wq"
  Matrix a;          // d_out x rank
  Matrix b;          // rank x d_in
};

struct Adapter {
  AdaptConfig config;
  SuppressionPlan plan;
  std::vector<AdapterTarget> targets;
};

// Attention projections adapt on every layer; FFN key/value matrices adapt
// only on layers outside the suppression plan, so the muting stays permanent.
Adapter init_adapter(const ToyTransformer& base, const SuppressionPlan& plan,
                     const AdaptConfig& config);

// Base model with every target's A B update materialized (W <- W + A B).
ToyTransformer merge_adapter(const ToyTransformer& base, const Adapter& adapter);

struct AdaptExample {
  std::string question;
  std::string context;
  std::string answer;
};

// Mean token NLL of the answer conditioned on context-then-question.
double kat_loss(const ModelView& view, const std::string& question, const std::string& context,
                const std::string& answer);

// Hinge on mean-per-token log-likelihoods: [gamma - ll(ans|q,c) + ll(ans|q)]+.
double kpo_from_scores(double ll_with_context, double ll_without_context, double gamma);
double kpo_loss(const ModelView& view, const std::string& question, const std::string& context,
                const std::string& answer, double gamma);

// Linear margin schedule from gamma_start to gamma_end.
double gamma_at(int step, int total_steps, const AdaptConfig& config);

double combined_loss(const ModelView& view, const AdaptExample& example,
                     const AdaptConfig& config, int step, int total_steps);

struct AdaptLogEntry {
  int step = 0;
  double kat = 0.0;
  double kpo = 0.0;
  double gamma = 0.0;
  double combined = 0.0;
};

struct AdaptResult {
  Adapter adapter;
  std::vector<AdaptLogEntry> log;
  double initial_mean_loss = 0.0;  // mean combined loss over the dataset before training
  double final_mean_loss = 0.0;    // and after
};

// Adam on the adapter factors only; the plan is applied in every forward and
// backward pass and the base weights stay frozen. Deterministic per seed.
AdaptResult train_adapter(const ToyTransformer& base, const SuppressionPlan& plan,
                          const std::vector<AdaptExample>& dataset, const AdaptConfig& config);

void save_adapter(const Adapter& adapter, const std::string& path,
                  const nlohmann::ordered_json& metadata);
Adapter load_adapter(const std::string& path);

}  // namespace pmlab
