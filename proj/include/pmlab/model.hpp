#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pmlab/matrix.hpp"
#include "pmlab/plan.hpp"
#include "pmlab/vocab.hpp"

namespace pmlab {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int d_ffn = 256;
  int n_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws std::invalid_argument
};

struct LayerParams {
  Matrix wq, wk, wv, wo;  // d_model x d_model
  Matrix ffn_key;         // d_ffn x d_model, rows are subkeys
  Matrix ffn_value;       // d_ffn x d_model, rows are subvalues
  Vector attn_norm;       // pre-norm gains (scale-only)
  Vector ffn_norm;
};

// Decoder-only transformer whose FFN sublayers are explicit key-value
// memories: FFN(x) = (lambda * relu(K x))^T V. Pre-norm residual blocks with
// RMS normalization, tied input/output embedding, no positional parameters
// (causal attention carries the ordering signal at this scale).
struct ToyTransformer {
  ModelConfig config;
  Matrix embedding;  // vocab_size x d_model; also the output head (tied)
  std::vector<LayerParams> layers;
  Vector final_norm;
  Vocab vocab;  // may be empty when the model is used on raw token ids

  bool all_parameters_finite() const;
};

// Scaled-normal init (0.02, with output projections scaled by 1/sqrt(2L)),
// deterministic per config.seed.
ToyTransformer init_model(const ModelConfig& config);

// Resolves parameter names like "layer3.wq" or "embedding" to their matrix.
// Returns nullptr for unknown names.
Matrix* find_param_matrix(ToyTransformer& model, const std::string& name);
const Matrix* find_param_matrix(const ToyTransformer& model, const std::string& name);

// Per-layer, per-position FFN activation coefficients recorded during a
// forward pass, plus the derived activation ratios.
struct ActivationTrace {
  std::vector<std::vector<Vector>> coefficients;  // [layer][pos] -> d_ffn values
  std::vector<std::vector<double>> ratios;        // [layer][pos]

  int n_layers() const { return static_cast<int>(coefficients.size()); }
  std::size_t n_positions() const { return coefficients.empty() ? 0 : coefficients[0].size(); }
};

// (lambda * relu(K x))^T V for one layer. Implemented as lambda times the
// unscaled output so linearity in lambda holds exactly in floating point.
Vector ffn_forward(const ToyTransformer& model, const Vector& x, int layer, double lambda);

// Explicit key-value decomposition: a_j = relu(x . k_j), out = sum_j a_j v_j.
// A deliberately separate summation path from ffn_forward.
std::pair<Vector, Vector> ffn_decompose(const ToyTransformer& model, const Vector& x, int layer);

// Causal forward pass over the whole sequence. Returns logits per position.
// `plan` may scale FFN/MHA/Layer sites; Parameter plans must be materialized
// through suppress::apply_plan first.
std::vector<Vector> forward(const ToyTransformer& model, std::span<const int> tokens,
                            const SuppressionPlan* plan = nullptr,
                            ActivationTrace* trace = nullptr);

// Mean token-level cross-entropy of `target` under teacher forcing,
// conditioned on `prompt`. Both spans are token ids; prompt must be non-empty.
double sequence_nll(const ToyTransformer& model, std::span<const int> prompt,
                    std::span<const int> target, const SuppressionPlan* plan = nullptr);

// Greedy (temperature 0, ties to the lowest id) or seeded categorical
// sampling. Returns the continuation only; generation stops at the
// end-of-sequence token (not included), max_new tokens, or the context window.
std::vector<int> sample(const ToyTransformer& model, std::span<const int> prompt,
                        int max_new, double temperature, std::uint64_t seed,
                        const SuppressionPlan* plan = nullptr);

// A scoring/training example: loss is taken over `target` only, conditioned
// on `prompt` (which carries the begin-of-sequence marker).
struct SeqExample {
  std::vector<int> prompt;
  std::vector<int> target;
};

struct LayerGrads {
  Matrix wq, wk, wv, wo, ffn_key, ffn_value;
  Vector attn_norm, ffn_norm;
};

struct Gradients {
  Matrix embedding;
  std::vector<LayerGrads> layers;
  Vector final_norm;

  static Gradients zeros_like(const ToyTransformer& model);
  void scale(double s);
};

// Accumulates weight * d(sequence_nll)/d(theta) into `grads` and returns the
// NLL. This is the single backward path shared by pretraining, adapter
// training and saliency scoring.
double nll_backward(const ToyTransformer& model, std::span<const int> prompt,
                    std::span<const int> target, const SuppressionPlan* plan,
                    double weight, Gradients& grads);

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
};

// Adam state for one tensor, stored flat.
struct AdamSlot {
  Vector m, v;
};

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_update(double* param, const double* grad, std::size_t n, AdamSlot& slot,
                 const AdamParams& hp, int step);

// Memorization pretraining: Adam on the mean target NLL over shuffled seeded
// batches. Aborts with a diagnostic naming the batch if the loss goes
// non-finite. Deterministic per seed.
std::vector<TrainLogEntry> train_lm(ToyTransformer& model, const std::vector<SeqExample>& corpus,
                                    int steps, double lr, int batch, std::uint64_t seed);

}  // namespace pmlab
