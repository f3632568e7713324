#include "pmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "pmlab/numerics.hpp"
#include "pmlab/rng.hpp"

namespace pmlab {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kInitScale = 0.02;

struct LayerLambdas {
  double mha = 1.0;
  double ffn = 1.0;
  double layer = 1.0;
};

LayerLambdas lambdas_for(const SuppressionPlan* plan, int layer) {
  LayerLambdas l;
  if (plan == nullptr) return l;
  if (plan->applies_to(SuppressionKind::MHA, layer)) l.mha = plan->lambda;
  if (plan->applies_to(SuppressionKind::FFN, layer)) l.ffn = plan->lambda;
  if (plan->applies_to(SuppressionKind::Layer, layer)) l.layer = plan->lambda;
  return l;
}

// Per-layer activations stored row-major with one row per position.
struct LayerCache {
  Matrix x_in, xn, q, k, v, ctx, attn_out, h, hn;  // T x d
  Matrix z;                                        // T x d_ffn (pre-activation)
  Vector attn_rms, ffn_rms;
  std::vector<Matrix> probs;  // per head, T x T, lower-triangular
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix y;   // final block outputs, T x d
  Matrix fn;  // after final norm
  Vector final_rms;
};

double row_rms(const Matrix& m, std::size_t r) {
  const double* p = m.row(r);
  double ss = 0.0;
  for (std::size_t c = 0; c < m.cols(); ++c) ss += p[c] * p[c];
  return std::sqrt(ss / static_cast<double>(m.cols()) + kRmsEps);
}

// out.row(r) = gain .* in.row(r) / rms
void rms_norm_rows(const Matrix& in, const Vector& gain, Matrix& out, Vector& rms) {
  rms.resize(in.rows());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    rms[r] = row_rms(in, r);
    const double inv = 1.0 / rms[r];
    const double* src = in.row(r);
    double* dst = out.row(r);
    for (std::size_t c = 0; c < in.cols(); ++c) dst[c] = gain[c] * src[c] * inv;
  }
}

// Row-wise backward of the scale-only RMS norm; accumulates dgain, returns
// dx into dst (overwriting it).
void rms_norm_rows_backward(const Matrix& x, const Vector& gain, const Vector& rms,
                            const Matrix& dout, Vector& dgain, Matrix& dst) {
  const auto n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.row(r);
    const double* dr = dout.row(r);
    double* out = dst.row(r);
    const double inv = 1.0 / rms[r];
    double wx = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      dgain[c] += dr[c] * xr[c] * inv;
      const double w = dr[c] * gain[c];
      out[c] = w;  // stash w, finished below
      wx += w * xr[c];
    }
    const double coef = wx * inv * inv * inv / n;
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] = out[c] * inv - xr[c] * coef;
  }
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence longer than max_seq_len");
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of range");
  }
}

void check_plan_for_forward(const ModelConfig& cfg, const SuppressionPlan* plan) {
  if (plan == nullptr) return;
  plan->validate(cfg);
  if (plan->kind == SuppressionKind::Parameter) {
    throw std::invalid_argument("forward: parameter plans must be materialized via apply_plan");
  }
}

// Runs the causal forward pass, filling `cache` and/or `trace` when given.
void run_forward(const ToyTransformer& model, std::span<const int> tokens,
                 const SuppressionPlan* plan, ForwardCache* cache, ActivationTrace* trace) {
  const ModelConfig& cfg = model.config;
  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  if (trace != nullptr) {
    trace->coefficients.assign(cfg.n_layers, {});
    trace->ratios.assign(cfg.n_layers, {});
  }
  cache->layers.resize(cfg.n_layers);

  Matrix x(T, d);
  for (std::size_t i = 0; i < T; ++i) {
    const double* src = model.embedding.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src, src + d, x.row(i));
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& p = model.layers[static_cast<std::size_t>(l)];
    const LayerLambdas lam = lambdas_for(plan, l);
    LayerCache& lc = cache->layers[static_cast<std::size_t>(l)];
    lc.x_in = x;
    lc.xn = Matrix(T, d);
    rms_norm_rows(lc.x_in, p.attn_norm, lc.xn, lc.attn_rms);
    lc.q = matmul_abt(lc.xn, p.wq);
    lc.k = matmul_abt(lc.xn, p.wk);
    lc.v = matmul_abt(lc.xn, p.wv);

    lc.probs.assign(static_cast<std::size_t>(cfg.n_heads), Matrix(T, T));
    lc.ctx = Matrix(T, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * static_cast<std::size_t>(dh);
      Matrix& ph = lc.probs[static_cast<std::size_t>(h)];
      Vector scores;
      for (std::size_t i = 0; i < T; ++i) {
        scores.assign(i + 1, 0.0);
        const double* qi = lc.q.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = lc.k.row(j) + off;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt_dh;
        }
        Vector pr = softmax(scores);
        double* ctx_i = lc.ctx.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          ph(i, j) = pr[j];
          const double* vj = lc.v.row(j) + off;
          const double pij = pr[j];
          for (int c = 0; c < dh; ++c) ctx_i[c] += pij * vj[c];
        }
      }
    }

    lc.attn_out = matmul_abt(lc.ctx, p.wo);
    lc.h = Matrix(T, d);
    for (std::size_t i = 0; i < T; ++i) {
      const double* xi = lc.x_in.row(i);
      const double* ai = lc.attn_out.row(i);
      double* hi = lc.h.row(i);
      for (std::size_t c = 0; c < d; ++c) hi[c] = xi[c] + lam.mha * ai[c];
    }

    lc.hn = Matrix(T, d);
    rms_norm_rows(lc.h, p.ffn_norm, lc.hn, lc.ffn_rms);
    lc.z = matmul_abt(lc.hn, p.ffn_key);
    Matrix act(T, lc.z.cols());
    for (std::size_t i = 0; i < act.size(); ++i) {
      const double zi = lc.z.data()[i];
      act.data()[i] = zi > 0.0 ? zi : 0.0;
    }
    Matrix f0 = matmul(act, p.ffn_value);

    if (trace != nullptr) {
      for (std::size_t i = 0; i < T; ++i) {
        Vector coeff(act.row(i), act.row(i) + act.cols());
        int active = 0;
        for (auto& a : coeff) {
          a *= lam.ffn;
          if (a > 0.0) ++active;
        }
        trace->ratios[static_cast<std::size_t>(l)].push_back(
            static_cast<double>(active) / static_cast<double>(cfg.d_ffn));
        trace->coefficients[static_cast<std::size_t>(l)].push_back(std::move(coeff));
      }
    }

    Matrix y(T, d);
    for (std::size_t i = 0; i < T; ++i) {
      const double* xi = lc.x_in.row(i);
      const double* ai = lc.attn_out.row(i);
      const double* fi = f0.row(i);
      double* yi = y.row(i);
      for (std::size_t c = 0; c < d; ++c) {
        yi[c] = xi[c] + lam.layer * (lam.mha * ai[c] + lam.ffn * fi[c]);
      }
    }
    x = std::move(y);
  }

  cache->y = std::move(x);
  cache->fn = Matrix(T, d);
  rms_norm_rows(cache->y, model.final_norm, cache->fn, cache->final_rms);
}

Vector logits_at(const ToyTransformer& model, const ForwardCache& cache, std::size_t pos) {
  Vector fn(cache.fn.row(pos), cache.fn.row(pos) + cache.fn.cols());
  return matvec(model.embedding, fn);
}

// One weighted cross-entropy term: position `pos` predicts token `target`.
struct LossTerm {
  std::size_t pos;
  int target;
  double weight;
};

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

// Backward pass through the cached forward. Adds gradients into `grads`.
void run_backward(const ToyTransformer& model, std::span<const int> tokens,
                  const SuppressionPlan* plan, const ForwardCache& cache,
                  const std::vector<LossTerm>& terms, Gradients& grads) {
  const ModelConfig& cfg = model.config;
  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  // Head + final-norm backward. dE accumulates both head and input rows.
  Matrix dfn(T, d);
  for (const LossTerm& t : terms) {
    Vector logits = logits_at(model, cache, t.pos);
    Vector p = softmax(logits);
    p[static_cast<std::size_t>(t.target)] -= 1.0;
    // dlogits = weight * (softmax - onehot); head is the tied embedding.
    double* dfn_row = dfn.row(t.pos);
    const double* fn_row = cache.fn.row(t.pos);
    for (int v = 0; v < cfg.vocab_size; ++v) {
      const double g = t.weight * p[static_cast<std::size_t>(v)];
      if (g == 0.0) continue;
      const double* emb = model.embedding.row(static_cast<std::size_t>(v));
      double* demb = grads.embedding.row(static_cast<std::size_t>(v));
      for (std::size_t c = 0; c < d; ++c) {
        dfn_row[c] += g * emb[c];
        demb[c] += g * fn_row[c];
      }
    }
  }
  Matrix dy(T, d);
  rms_norm_rows_backward(cache.y, model.final_norm, cache.final_rms, dfn, grads.final_norm, dy);

  Matrix act, dz, dctx, dq, dk, dv;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerParams& p = model.layers[static_cast<std::size_t>(l)];
    LayerGrads& gl = grads.layers[static_cast<std::size_t>(l)];
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const LayerLambdas lam = lambdas_for(plan, l);

    // y = x + lam.layer * (lam.mha * attn_out + lam.ffn * f0)
    Matrix dx = dy;  // direct residual path

    // FFN branch: f0 = relu(z) V, z = hn K^T.
    act = Matrix(T, lc.z.cols());
    for (std::size_t i = 0; i < act.size(); ++i) {
      const double zi = lc.z.data()[i];
      act.data()[i] = zi > 0.0 ? zi : 0.0;
    }
    Matrix df0(T, d);
    const double ffn_scale = lam.layer * lam.ffn;
    for (std::size_t i = 0; i < df0.size(); ++i) df0.data()[i] = ffn_scale * dy.data()[i];
    matmul_atb_acc(act, df0, gl.ffn_value);
    dz = matmul_abt(df0, p.ffn_value);
    for (std::size_t i = 0; i < dz.size(); ++i) {
      if (lc.z.data()[i] <= 0.0) dz.data()[i] = 0.0;
    }
    matmul_atb_acc(dz, lc.hn, gl.ffn_key);
    Matrix dhn = matmul(dz, p.ffn_key);
    Matrix dh_state(T, d);
    rms_norm_rows_backward(lc.h, p.ffn_norm, lc.ffn_rms, dhn, gl.ffn_norm, dh_state);
    add_into(dx, dh_state);

    // h = x + lam.mha * attn_out; attn branch also receives the block-output path.
    Matrix dattn(T, d);
    for (std::size_t i = 0; i < dattn.size(); ++i) {
      dattn.data()[i] = lam.mha * (lam.layer * dy.data()[i] + dh_state.data()[i]);
    }
    matmul_atb_acc(dattn, lc.ctx, gl.wo);
    dctx = matmul(dattn, p.wo);

    dq = Matrix(T, d);
    dk = Matrix(T, d);
    dv = Matrix(T, d);
    Vector dp;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * static_cast<std::size_t>(dh);
      const Matrix& ph = lc.probs[static_cast<std::size_t>(h)];
      for (std::size_t i = 0; i < T; ++i) {
        dp.assign(i + 1, 0.0);
        const double* dctx_i = dctx.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lc.v.row(j) + off;
          double* dvj = dv.row(j) + off;
          const double pij = ph(i, j);
          double s = 0.0;
          for (int c = 0; c < dh; ++c) {
            s += dctx_i[c] * vj[c];
            dvj[c] += pij * dctx_i[c];
          }
          dp[j] = s;
        }
        double dot_pd = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot_pd += ph(i, j) * dp[j];
        double* dq_i = dq.row(i) + off;
        const double* q_i = lc.q.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = ph(i, j) * (dp[j] - dot_pd) * inv_sqrt_dh;
          const double* kj = lc.k.row(j) + off;
          double* dkj = dk.row(j) + off;
          for (int c = 0; c < dh; ++c) {
            dq_i[c] += ds * kj[c];
            dkj[c] += ds * q_i[c];
          }
        }
      }
    }

    matmul_atb_acc(dq, lc.xn, gl.wq);
    matmul_atb_acc(dk, lc.xn, gl.wk);
    matmul_atb_acc(dv, lc.xn, gl.wv);
    Matrix dxn = matmul(dq, p.wq);
    add_into(dxn, matmul(dk, p.wk));
    add_into(dxn, matmul(dv, p.wv));
    Matrix dx_norm(T, d);
    rms_norm_rows_backward(lc.x_in, p.attn_norm, lc.attn_rms, dxn, gl.attn_norm, dx_norm);
    add_into(dx, dx_norm);

    dy = std::move(dx);
  }

  for (std::size_t i = 0; i < T; ++i) {
    double* demb = grads.embedding.row(static_cast<std::size_t>(tokens[i]));
    const double* dyi = dy.row(i);
    for (std::size_t c = 0; c < d; ++c) demb[c] += dyi[c];
  }
}

std::vector<LossTerm> loss_terms_for(std::span<const int> prompt, std::span<const int> target,
                                     double weight) {
  // Inputs are prompt + target[:-1]; position prompt.size()-1+k predicts target[k].
  std::vector<LossTerm> terms;
  const double w = weight / static_cast<double>(target.size());
  for (std::size_t k = 0; k < target.size(); ++k) {
    terms.push_back({prompt.size() - 1 + k, target[k], w});
  }
  return terms;
}

std::vector<int> joint_inputs(std::span<const int> prompt, std::span<const int> target) {
  std::vector<int> inputs(prompt.begin(), prompt.end());
  inputs.insert(inputs.end(), target.begin(), target.end() - 1);
  return inputs;
}

void check_scoring_args(const ModelConfig& cfg, std::span<const int> prompt,
                        std::span<const int> target) {
  if (prompt.empty()) throw std::invalid_argument("sequence_nll: empty prompt");
  if (target.empty()) throw std::invalid_argument("sequence_nll: empty target");
  if (static_cast<int>(prompt.size() + target.size()) > cfg.max_seq_len) {
    throw std::invalid_argument("sequence_nll: prompt+target exceeds max_seq_len");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) throw std::invalid_argument("ModelConfig: bad dimensions");
  if (d_model % n_heads != 0) throw std::invalid_argument("ModelConfig: d_model not divisible by n_heads");
  if (d_ffn < d_model) throw std::invalid_argument("ModelConfig: d_ffn must be >= d_model");
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (max_seq_len < 2) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 2");
}

bool ToyTransformer::all_parameters_finite() const {
  if (!embedding.all_finite() || !all_finite(final_norm)) return false;
  for (const auto& l : layers) {
    if (!l.wq.all_finite() || !l.wk.all_finite() || !l.wv.all_finite() || !l.wo.all_finite() ||
        !l.ffn_key.all_finite() || !l.ffn_value.all_finite() || !all_finite(l.attn_norm) ||
        !all_finite(l.ffn_norm)) {
      return false;
    }
  }
  return true;
}

ToyTransformer init_model(const ModelConfig& config) {
  config.validate();
  ToyTransformer model;
  model.config = config;
  Rng rng(config.seed);
  const double out_scale = kInitScale / std::sqrt(2.0 * config.n_layers);

  auto fill_normal = [&rng](Matrix& m, double scale) {
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  };

  model.embedding = Matrix(static_cast<std::size_t>(config.vocab_size),
                           static_cast<std::size_t>(config.d_model));
  fill_normal(model.embedding, kInitScale);

  model.layers.resize(static_cast<std::size_t>(config.n_layers));
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dm = static_cast<std::size_t>(config.d_ffn);
  for (auto& l : model.layers) {
    l.wq = Matrix(d, d);
    l.wk = Matrix(d, d);
    l.wv = Matrix(d, d);
    l.wo = Matrix(d, d);
    l.ffn_key = Matrix(dm, d);
    l.ffn_value = Matrix(dm, d);
    fill_normal(l.wq, kInitScale);
    fill_normal(l.wk, kInitScale);
    fill_normal(l.wv, kInitScale);
    fill_normal(l.wo, out_scale);
    fill_normal(l.ffn_key, kInitScale);
    fill_normal(l.ffn_value, out_scale);
    l.attn_norm.assign(d, 1.0);
    l.ffn_norm.assign(d, 1.0);
  }
  model.final_norm.assign(d, 1.0);
  return model;
}

Matrix* find_param_matrix(ToyTransformer& model, const std::string& name) {
  if (name == "embedding") return &model.embedding;
  if (name.rfind("layer", 0) != 0) return nullptr;
  const auto dotpos = name.find('.');
  if (dotpos == std::string::npos || dotpos <= 5) return nullptr;
  int layer = -1;
  try {
    layer = std::stoi(name.substr(5, dotpos - 5));
  } catch (...) {
    return nullptr;
  }
  if (layer < 0 || layer >= static_cast<int>(model.layers.size())) return nullptr;
  LayerParams& p = model.layers[static_cast<std::size_t>(layer)];
  const std::string field = name.substr(dotpos + 1);
  if (field == "wq") return &p.wq;
  if (field == "wk") return &p.wk;
  if (field == "wv") return &p.wv;
  if (field == "wo") return &p.wo;
  if (field == "ffn_key") return &p.ffn_key;
  if (field == "ffn_value") return &p.ffn_value;
  return nullptr;
}

const Matrix* find_param_matrix(const ToyTransformer& model, const std::string& name) {
  return find_param_matrix(const_cast<ToyTransformer&>(model), name);
}

Vector ffn_forward(const ToyTransformer& model, const Vector& x, int layer, double lambda) {
  if (layer < 0 || layer >= model.config.n_layers) {
    throw std::invalid_argument("ffn_forward: layer index out of range");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("ffn_forward: lambda must be finite and >= 0");
  }
  const LayerParams& p = model.layers[static_cast<std::size_t>(layer)];
  if (x.size() != static_cast<std::size_t>(model.config.d_model)) {
    throw std::invalid_argument("ffn_forward: dimension mismatch");
  }
  Vector z = matvec(p.ffn_key, x);
  for (auto& v : z) v = v > 0.0 ? v : 0.0;
  Vector out = matvec_transposed(p.ffn_value, z);
  for (auto& v : out) v *= lambda;
  return out;
}

std::pair<Vector, Vector> ffn_decompose(const ToyTransformer& model, const Vector& x, int layer) {
  if (layer < 0 || layer >= model.config.n_layers) {
    throw std::invalid_argument("ffn_decompose: layer index out of range");
  }
  const LayerParams& p = model.layers[static_cast<std::size_t>(layer)];
  if (x.size() != static_cast<std::size_t>(model.config.d_model)) {
    throw std::invalid_argument("ffn_decompose: dimension mismatch");
  }
  const std::size_t dm = p.ffn_key.rows();
  Vector coeff(dm, 0.0);
  Vector recon(x.size(), 0.0);
  for (std::size_t j = 0; j < dm; ++j) {
    double a = dot(p.ffn_key.row_span(j), std::span<const double>(x));
    a = a > 0.0 ? a : 0.0;
    coeff[j] = a;
    if (a != 0.0) {
      const double* vj = p.ffn_value.row(j);
      for (std::size_t c = 0; c < recon.size(); ++c) recon[c] += a * vj[c];
    }
  }
  return {std::move(coeff), std::move(recon)};
}

std::vector<Vector> forward(const ToyTransformer& model, std::span<const int> tokens,
                            const SuppressionPlan* plan, ActivationTrace* trace) {
  check_tokens(model.config, tokens);
  check_plan_for_forward(model.config, plan);
  ForwardCache cache;
  run_forward(model, tokens, plan, &cache, trace);
  std::vector<Vector> logits(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) logits[i] = logits_at(model, cache, i);
  return logits;
}

double sequence_nll(const ToyTransformer& model, std::span<const int> prompt,
                    std::span<const int> target, const SuppressionPlan* plan) {
  check_scoring_args(model.config, prompt, target);
  check_plan_for_forward(model.config, plan);
  std::vector<int> inputs = joint_inputs(prompt, target);
  check_tokens(model.config, inputs);
  for (int t : target) {
    if (t < 0 || t >= model.config.vocab_size) {
      throw std::invalid_argument("sequence_nll: target token out of range");
    }
  }
  ForwardCache cache;
  run_forward(model, inputs, plan, &cache, nullptr);
  double total = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    Vector logits = logits_at(model, cache, prompt.size() - 1 + k);
    total += cross_entropy(logits, static_cast<std::size_t>(target[k]));
  }
  return total / static_cast<double>(target.size());
}

std::vector<int> sample(const ToyTransformer& model, std::span<const int> prompt,
                        int max_new, double temperature, std::uint64_t seed,
                        const SuppressionPlan* plan) {
  if (temperature < 0.0) throw std::invalid_argument("sample: temperature must be >= 0");
  if (max_new < 0) throw std::invalid_argument("sample: max_new must be >= 0");
  check_tokens(model.config, prompt);
  check_plan_for_forward(model.config, plan);

  Rng rng(seed);
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_new &&
         static_cast<int>(seq.size()) < model.config.max_seq_len) {
    ForwardCache cache;
    run_forward(model, seq, plan, &cache, nullptr);
    Vector logits = logits_at(model, cache, seq.size() - 1);
    int next;
    if (temperature == 0.0) {
      next = 0;
      for (std::size_t v = 1; v < logits.size(); ++v) {
        if (logits[v] > logits[static_cast<std::size_t>(next)]) next = static_cast<int>(v);
      }
    } else {
      for (auto& v : logits) v /= temperature;
      next = static_cast<int>(rng.categorical(softmax(logits)));
    }
    if (next == Vocab::kEosId) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

Gradients Gradients::zeros_like(const ToyTransformer& model) {
  Gradients g;
  g.embedding = Matrix(model.embedding.rows(), model.embedding.cols());
  g.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerParams& p = model.layers[l];
    LayerGrads& gl = g.layers[l];
    gl.wq = Matrix(p.wq.rows(), p.wq.cols());
    gl.wk = Matrix(p.wk.rows(), p.wk.cols());
    gl.wv = Matrix(p.wv.rows(), p.wv.cols());
    gl.wo = Matrix(p.wo.rows(), p.wo.cols());
    gl.ffn_key = Matrix(p.ffn_key.rows(), p.ffn_key.cols());
    gl.ffn_value = Matrix(p.ffn_value.rows(), p.ffn_value.cols());
    gl.attn_norm.assign(p.attn_norm.size(), 0.0);
    gl.ffn_norm.assign(p.ffn_norm.size(), 0.0);
  }
  g.final_norm.assign(model.final_norm.size(), 0.0);
  return g;
}

void Gradients::scale(double s) {
  auto scale_m = [s](Matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] *= s;
  };
  auto scale_v = [s](Vector& v) {
    for (auto& x : v) x *= s;
  };
  scale_m(embedding);
  for (auto& l : layers) {
    scale_m(l.wq);
    scale_m(l.wk);
    scale_m(l.wv);
    scale_m(l.wo);
    scale_m(l.ffn_key);
    scale_m(l.ffn_value);
    scale_v(l.attn_norm);
    scale_v(l.ffn_norm);
  }
  scale_v(final_norm);
}

double nll_backward(const ToyTransformer& model, std::span<const int> prompt,
                    std::span<const int> target, const SuppressionPlan* plan,
                    double weight, Gradients& grads) {
  check_scoring_args(model.config, prompt, target);
  check_plan_for_forward(model.config, plan);
  std::vector<int> inputs = joint_inputs(prompt, target);
  check_tokens(model.config, inputs);
  ForwardCache cache;
  run_forward(model, inputs, plan, &cache, nullptr);

  double total = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    Vector logits = logits_at(model, cache, prompt.size() - 1 + k);
    total += cross_entropy(logits, static_cast<std::size_t>(target[k]));
  }

  std::vector<LossTerm> terms = loss_terms_for(prompt, target, weight);
  run_backward(model, inputs, plan, cache, terms, grads);
  return total / static_cast<double>(target.size());
}

void adam_update(double* param, const double* grad, std::size_t n, AdamSlot& slot,
                 const AdamParams& hp, int step) {
  if (slot.m.size() != n) {
    slot.m.assign(n, 0.0);
    slot.v.assign(n, 0.0);
  }
  const double bc1 = 1.0 - std::pow(hp.beta1, step);
  const double bc2 = 1.0 - std::pow(hp.beta2, step);
  for (std::size_t i = 0; i < n; ++i) {
    slot.m[i] = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * grad[i];
    slot.v[i] = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    param[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

namespace {

// Warmup then cosine decay to 10% of the peak rate.
double lr_schedule(int step, int total_steps) {
  const int warmup = std::max(10, total_steps / 20);
  if (step < warmup) return static_cast<double>(step + 1) / warmup;
  if (total_steps <= warmup) return 1.0;
  const double progress = static_cast<double>(step - warmup) / (total_steps - warmup);
  return 0.1 + 0.45 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// Walks model/grad tensors in one fixed order.
template <typename Fn>
void for_each_tensor(ToyTransformer& model, Gradients& grads, Fn&& fn) {
  fn(model.embedding.data(), grads.embedding.data(), model.embedding.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    LayerParams& p = model.layers[l];
    LayerGrads& g = grads.layers[l];
    fn(p.wq.data(), g.wq.data(), p.wq.size());
    fn(p.wk.data(), g.wk.data(), p.wk.size());
    fn(p.wv.data(), g.wv.data(), p.wv.size());
    fn(p.wo.data(), g.wo.data(), p.wo.size());
    fn(p.ffn_key.data(), g.ffn_key.data(), p.ffn_key.size());
    fn(p.ffn_value.data(), g.ffn_value.data(), p.ffn_value.size());
    fn(p.attn_norm.data(), g.attn_norm.data(), p.attn_norm.size());
    fn(p.ffn_norm.data(), g.ffn_norm.data(), p.ffn_norm.size());
  }
  fn(model.final_norm.data(), grads.final_norm.data(), model.final_norm.size());
}

}  // namespace

std::vector<TrainLogEntry> train_lm(ToyTransformer& model, const std::vector<SeqExample>& corpus,
                                    int steps, double lr, int batch, std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
  if (batch < 1) throw std::invalid_argument("train_lm: batch must be >= 1");
  if (steps < 0) throw std::invalid_argument("train_lm: steps must be >= 0");
  for (const auto& e : corpus) {
    if (e.prompt.empty() || e.target.empty()) throw std::invalid_argument("train_lm: corpus entry with empty prompt or target");
    if (static_cast<int>(e.prompt.size() + e.target.size()) > model.config.max_seq_len) {
      throw std::invalid_argument("train_lm: corpus entry exceeds max_seq_len");
    }
  }

  std::vector<TrainLogEntry> log;
  if (steps == 0) return log;

  Rng rng(derive_seed(seed, "train_lm.order"));
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;

  Gradients grads = Gradients::zeros_like(model);
  std::vector<AdamSlot> slots;
  AdamParams hp;
  hp.lr = lr;

  for (int step = 0; step < steps; ++step) {
    grads.scale(0.0);
    double loss = 0.0;
    std::vector<std::size_t> batch_ids;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      batch_ids.push_back(idx);
      loss += nll_backward(model, corpus[idx].prompt, corpus[idx].target, nullptr,
                           1.0 / batch, grads);
    }
    loss /= batch;
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "train_lm: non-finite loss at step " << step << " (corpus entries";
      for (auto id : batch_ids) msg << ' ' << id;
      msg << ")";
      throw std::runtime_error(msg.str());
    }

    // global-norm gradient clipping at 1.0
    double sq = 0.0;
    for_each_tensor(model, grads, [&](double*, double* g, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) sq += g[i] * g[i];
    });
    const double gnorm = std::sqrt(sq);
    if (gnorm > 1.0) grads.scale(1.0 / gnorm);

    AdamParams step_hp = hp;
    step_hp.lr = lr * lr_schedule(step, steps);
    std::size_t slot_i = 0;
    for_each_tensor(model, grads, [&](double* p, double* g, std::size_t n) {
      if (slot_i == slots.size()) slots.emplace_back();
      adam_update(p, g, n, slots[slot_i++], step_hp, step + 1);
    });
    if (!model.all_parameters_finite()) {
      throw std::runtime_error("train_lm: non-finite parameter after step " + std::to_string(step));
    }
    log.push_back({step, loss});
  }
  return log;
}

}  // namespace pmlab
