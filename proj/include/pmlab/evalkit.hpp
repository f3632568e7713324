#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pmlab/dataqa.hpp"
#include "pmlab/suppress.hpp"

namespace pmlab {

struct ConrMemr {
  double conr = 0.0;  // percent
  double memr = 0.0;  // percent
  double mr = 0.0;    // MemR / (MemR + ConR)
  bool mr_defined = false;
};

struct BucketStats {
  int freq = 0;
  int count = 0;
  ConrMemr metrics;
};

struct EvalReport {
  ConrMemr metrics;
  int n_instances = 0;
  double sim_to_parametric = 0.0;  // mean token-F1 against r_hat
  double sim_to_contextual = 0.0;  // mean token-F1 against y*
  double ppl_with_context = 0.0;   // mean over instances
  double ppl_without_context = 0.0;
  std::vector<BucketStats> buckets;  // keyed by parametric_freq
};

// ConR: the response contains normalized y*. MemR: it contains normalized
// r_hat and not y*, so the categories are disjoint. Containment is contiguous
// token-subsequence. Responses are normalized internally (idempotent).
ConrMemr conr_memr(const std::vector<std::string>& responses,
                   const std::vector<QAInstance>& instances);

// Harmonic mean of token precision/recall over normalized token multisets.
double token_f1(const std::string& a, const std::string& b);

// exp(mean token NLL of y*) under context+question and under question alone.
std::pair<double, double> ppl_pair(const ModelView& view, const QAInstance& instance);

struct DecodeConfig {
  int max_new = 16;
  double temperature = 0.0;
};

EvalReport evaluate(const ModelView& view, const std::vector<QAInstance>& subset,
                    const DecodeConfig& decode = {});

}  // namespace pmlab
