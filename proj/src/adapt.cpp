#include "pmlab/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "pmlab/rng.hpp"

namespace pmlab {

void AdaptConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("AdaptConfig: alpha/beta must be >= 0");
  if (alpha == 0.0 && beta == 0.0) throw std::invalid_argument("AdaptConfig: alpha and beta cannot both be 0");
  if (!(gamma_end >= gamma_start) || gamma_start < 0.0) {
    throw std::invalid_argument("AdaptConfig: need gamma_end >= gamma_start >= 0");
  }
  if (rank < 1) throw std::invalid_argument("AdaptConfig: rank must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("AdaptConfig: lr must be positive");
  if (steps < 0 || batch < 1) throw std::invalid_argument("AdaptConfig: bad steps/batch");
}

Adapter init_adapter(const ToyTransformer& base, const SuppressionPlan& plan,
                     const AdaptConfig& config) {
  config.validate();
  plan.validate(base.config);
  Adapter adapter;
  adapter.config = config;
  adapter.plan = plan;

  Rng rng(derive_seed(config.seed, "adapter.init"));
  auto add_target = [&](const std::string& name, const Matrix& w) {
    AdapterTarget t;
    t.name = name;
    t.a = Matrix(w.rows(), static_cast<std::size_t>(config.rank));
    t.b = Matrix(static_cast<std::size_t>(config.rank), w.cols());
    for (std::size_t i = 0; i < t.a.size(); ++i) t.a.data()[i] = 0.02 * rng.normal();
    adapter.targets.push_back(std::move(t));
  };

  for (int l = 0; l < base.config.n_layers; ++l) {
    const LayerParams& p = base.layers[static_cast<std::size_t>(l)];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    add_target(prefix + "wq", p.wq);
    add_target(prefix + "wk", p.wk);
    add_target(prefix + "wv", p.wv);
    add_target(prefix + "wo", p.wo);
    const bool suppressed =
        std::find(plan.layers.begin(), plan.layers.end(), l) != plan.layers.end();
    if (!suppressed) {
      add_target(prefix + "ffn_key", p.ffn_key);
      add_target(prefix + "ffn_value", p.ffn_value);
    }
  }
  return adapter;
}

ToyTransformer merge_adapter(const ToyTransformer& base, const Adapter& adapter) {
  ToyTransformer merged = base;
  for (const AdapterTarget& t : adapter.targets) {
    Matrix* w = find_param_matrix(merged, t.name);
    if (w == nullptr) throw std::invalid_argument("merge_adapter: unknown target '" + t.name + "'");
    if (t.a.rows() != w->rows() || t.b.cols() != w->cols() || t.a.cols() != t.b.rows()) {
      throw std::invalid_argument("merge_adapter: shape mismatch for '" + t.name + "'");
    }
    Matrix delta = matmul(t.a, t.b);
    for (std::size_t i = 0; i < w->size(); ++i) w->data()[i] += delta.data()[i];
  }
  return merged;
}

namespace {

std::vector<int> context_prompt(const Vocab& vocab, const std::string& question,
                                const std::string& context) {
  std::vector<int> prompt = {Vocab::kBosId};
  for (int t : vocab.encode(context)) prompt.push_back(t);
  for (int t : vocab.encode(question)) prompt.push_back(t);
  return prompt;
}

std::vector<int> closed_book_prompt(const Vocab& vocab, const std::string& question) {
  std::vector<int> prompt = {Vocab::kBosId};
  for (int t : vocab.encode(question)) prompt.push_back(t);
  return prompt;
}

// Answers are scored with the end-of-sequence marker appended, so stopping is
// part of the likelihood.
std::vector<int> answer_target(const Vocab& vocab, const std::string& answer) {
  std::vector<int> target = vocab.encode(answer);
  target.push_back(Vocab::kEosId);
  return target;
}

const Vocab& require_vocab(const ToyTransformer& model, const char* where) {
  if (model.vocab.empty()) {
    throw std::invalid_argument(std::string(where) + ": model has no vocabulary");
  }
  return model.vocab;
}

}  // namespace

double kat_loss(const ModelView& view, const std::string& question, const std::string& context,
                const std::string& answer) {
  const Vocab& vocab = require_vocab(view.model(), "kat_loss");
  return view.sequence_nll(context_prompt(vocab, question, context),
                           answer_target(vocab, answer));
}

double kpo_from_scores(double ll_with_context, double ll_without_context, double gamma) {
  const double margin = gamma - ll_with_context + ll_without_context;
  return margin > 0.0 ? margin : 0.0;
}

double kpo_loss(const ModelView& view, const std::string& question, const std::string& context,
                const std::string& answer, double gamma) {
  const Vocab& vocab = require_vocab(view.model(), "kpo_loss");
  const std::vector<int> target = answer_target(vocab, answer);
  const double ll_ctx = -view.sequence_nll(context_prompt(vocab, question, context), target);
  const double ll_noctx = -view.sequence_nll(closed_book_prompt(vocab, question), target);
  return kpo_from_scores(ll_ctx, ll_noctx, gamma);
}

double gamma_at(int step, int total_steps, const AdaptConfig& config) {
  if (total_steps < 1) throw std::invalid_argument("gamma_at: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw std::invalid_argument("gamma_at: step out of range");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return config.gamma_start + (config.gamma_end - config.gamma_start) * frac;
}

double combined_loss(const ModelView& view, const AdaptExample& example,
                     const AdaptConfig& config, int step, int total_steps) {
  const double gamma = gamma_at(step, total_steps, config);
  const double kat = kat_loss(view, example.question, example.context, example.answer);
  const double kpo = kpo_loss(view, example.question, example.context, example.answer, gamma);
  return config.alpha * kat + config.beta * kpo;
}

namespace {

struct TokenizedExample {
  std::vector<int> ctx_prompt;
  std::vector<int> q_prompt;
  std::vector<int> target;
};

struct StepLosses {
  double kat = 0.0;
  double kpo = 0.0;
};

// Gradients mirrors the model layout; resolve tensors by the same names.
const Matrix& grad_for(const Gradients& grads, const std::string& name) {
  const auto dotpos = name.find('.');
  const int layer = std::stoi(name.substr(5, dotpos - 5));
  const std::string field = name.substr(dotpos + 1);
  const LayerGrads& gl = grads.layers[static_cast<std::size_t>(layer)];
  if (field == "wq") return gl.wq;
  if (field == "wk") return gl.wk;
  if (field == "wv") return gl.wv;
  if (field == "wo") return gl.wo;
  if (field == "ffn_key") return gl.ffn_key;
  if (field == "ffn_value") return gl.ffn_value;
  throw std::logic_error("grad_for: unexpected target " + name);
}

double mean_combined(const ToyTransformer& eff, const SuppressionPlan* plan,
                     const std::vector<TokenizedExample>& examples, const AdaptConfig& config,
                     double gamma) {
  double total = 0.0;
  for (const auto& e : examples) {
    const double nll_ctx = sequence_nll(eff, e.ctx_prompt, e.target, plan);
    const double nll_noctx = sequence_nll(eff, e.q_prompt, e.target, plan);
    total += config.alpha * nll_ctx + config.beta * kpo_from_scores(-nll_ctx, -nll_noctx, gamma);
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace

AdaptResult train_adapter(const ToyTransformer& base, const SuppressionPlan& plan,
                          const std::vector<AdaptExample>& dataset, const AdaptConfig& config) {
  config.validate();
  plan.validate(base.config);
  if (dataset.empty()) throw std::invalid_argument("train_adapter: empty dataset");
  const Vocab& vocab = require_vocab(base, "train_adapter");

  std::vector<TokenizedExample> examples;
  examples.reserve(dataset.size());
  for (const auto& e : dataset) {
    TokenizedExample t;
    t.ctx_prompt = context_prompt(vocab, e.question, e.context);
    t.q_prompt = closed_book_prompt(vocab, e.question);
    t.target = answer_target(vocab, e.answer);
    if (static_cast<int>(t.ctx_prompt.size() + t.target.size()) > base.config.max_seq_len) {
      throw std::invalid_argument("train_adapter: example exceeds max_seq_len");
    }
    examples.push_back(std::move(t));
  }

  // Parameter plans are baked into a frozen copy once; lambda plans are
  // applied inside every forward/backward pass.
  std::optional<ToyTransformer> materialized;
  const ToyTransformer* frozen = &base;
  const SuppressionPlan* fwd_plan = &plan;
  if (plan.kind == SuppressionKind::Parameter) {
    materialized = apply_plan(base, plan).model();
    frozen = &*materialized;
    fwd_plan = nullptr;
  }

  AdaptResult result;
  result.adapter = init_adapter(base, plan, config);
  Adapter& adapter = result.adapter;
  ToyTransformer eff = merge_adapter(*frozen, adapter);

  const int total_steps = std::max(config.steps, 1);
  result.initial_mean_loss = mean_combined(eff, fwd_plan, examples, config, gamma_at(0, total_steps, config));
  if (config.steps == 0) {
    result.final_mean_loss = result.initial_mean_loss;
    return result;
  }

  Rng order_rng(derive_seed(config.seed, "adapt.order"));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  AdamParams hp;
  hp.lr = config.lr;
  std::vector<AdamSlot> slots(adapter.targets.size() * 2);

  for (int step = 0; step < config.steps; ++step) {
    const double gamma = gamma_at(step, config.steps, config);
    Gradients grads = Gradients::zeros_like(eff);
    StepLosses losses;
    std::vector<std::size_t> batch_ids;

    for (int b = 0; b < config.batch; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      batch_ids.push_back(idx);
      const TokenizedExample& e = examples[idx];

      const double nll_ctx = sequence_nll(eff, e.ctx_prompt, e.target, fwd_plan);
      const double nll_noctx = sequence_nll(eff, e.q_prompt, e.target, fwd_plan);
      const double kpo = kpo_from_scores(-nll_ctx, -nll_noctx, gamma);
      losses.kat += nll_ctx;
      losses.kpo += kpo;

      const bool hinge_active = kpo > 0.0;
      const double w_ctx = (config.alpha + (hinge_active ? config.beta : 0.0)) / config.batch;
      const double w_noctx = hinge_active ? -config.beta / config.batch : 0.0;
      if (w_ctx != 0.0) nll_backward(eff, e.ctx_prompt, e.target, fwd_plan, w_ctx, grads);
      if (w_noctx != 0.0) nll_backward(eff, e.q_prompt, e.target, fwd_plan, w_noctx, grads);
    }

    const double kat_mean = losses.kat / config.batch;
    const double kpo_mean = losses.kpo / config.batch;
    const double combined = config.alpha * kat_mean + config.beta * kpo_mean;
    if (!std::isfinite(combined)) {
      std::ostringstream msg;
      msg << "train_adapter: non-finite loss at step " << step << " (examples";
      for (auto id : batch_ids) msg << ' ' << id;
      msg << ")";
      throw std::runtime_error(msg.str());
    }

    // Chain rule through W_eff = W + A B: dA = dW B^T, dB = A^T dW.
    for (std::size_t t = 0; t < adapter.targets.size(); ++t) {
      AdapterTarget& target = adapter.targets[t];
      const Matrix& dw = grad_for(grads, target.name);
      Matrix da = matmul_abt(dw, target.b);
      Matrix db = matmul_atb(target.a, dw);
      adam_update(target.a.data(), da.data(), target.a.size(), slots[2 * t], hp, step + 1);
      adam_update(target.b.data(), db.data(), target.b.size(), slots[2 * t + 1], hp, step + 1);
    }

    // Refresh the effective weights from the frozen base.
    for (const AdapterTarget& target : adapter.targets) {
      const Matrix* w0 = find_param_matrix(*frozen, target.name);
      Matrix* w = find_param_matrix(eff, target.name);
      Matrix delta = matmul(target.a, target.b);
      for (std::size_t i = 0; i < w->size(); ++i) w->data()[i] = w0->data()[i] + delta.data()[i];
    }

    result.log.push_back({step, kat_mean, kpo_mean, gamma, combined});
  }

  result.final_mean_loss =
      mean_combined(eff, fwd_plan, examples, config, gamma_at(config.steps, config.steps, config));
  return result;
}

namespace {

nlohmann::ordered_json adapt_config_to_json(const AdaptConfig& c) {
  nlohmann::ordered_json j;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["gamma_start"] = c.gamma_start;
  j["gamma_end"] = c.gamma_end;
  j["rank"] = c.rank;
  j["lr"] = c.lr;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  return j;
}

AdaptConfig adapt_config_from_json(const nlohmann::ordered_json& j) {
  AdaptConfig c;
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.gamma_start = j.at("gamma_start").get<double>();
  c.gamma_end = j.at("gamma_end").get<double>();
  c.rank = j.at("rank").get<int>();
  c.lr = j.at("lr").get<double>();
  c.steps = j.at("steps").get<int>();
  c.batch = j.at("batch").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_adapter(const Adapter& adapter, const std::string& path,
                  const nlohmann::ordered_json& metadata) {
  CheckpointData data;
  data.kind = "adapter";
  data.config["adapt"] = adapt_config_to_json(adapter.config);
  data.config["plan"] = plan_to_json(adapter.plan);
  data.metadata = metadata;
  for (const AdapterTarget& t : adapter.targets) {
    NamedTensor a{t.name + ".A", {t.a.rows(), t.a.cols()}, Vector(t.a.data(), t.a.data() + t.a.size())};
    NamedTensor b{t.name + ".B", {t.b.rows(), t.b.cols()}, Vector(t.b.data(), t.b.data() + t.b.size())};
    data.tensors.push_back(std::move(a));
    data.tensors.push_back(std::move(b));
  }
  write_checkpoint_file(path, data);
}

Adapter load_adapter(const std::string& path) {
  CheckpointData data = read_checkpoint_file(path);
  if (data.kind != "adapter") throw std::runtime_error("load_adapter: " + path + " is not an adapter checkpoint");
  Adapter adapter;
  adapter.config = adapt_config_from_json(data.config.at("adapt"));
  adapter.plan = plan_from_json(data.config.at("plan"));
  if (data.tensors.size() % 2 != 0) throw std::runtime_error("load_adapter: unpaired tensors");
  for (std::size_t i = 0; i < data.tensors.size(); i += 2) {
    const NamedTensor& ta = data.tensors[i];
    const NamedTensor& tb = data.tensors[i + 1];
    if (ta.name.size() < 2 || ta.name.substr(ta.name.size() - 2) != ".A" ||
        tb.name.substr(0, tb.name.size() - 2) != ta.name.substr(0, ta.name.size() - 2) ||
        tb.name.substr(tb.name.size() - 2) != ".B") {
      throw std::runtime_error("load_adapter: malformed tensor pair at " + ta.name);
    }
    AdapterTarget t;
    t.name = ta.name.substr(0, ta.name.size() - 2);
    t.a = Matrix(ta.shape.at(0), ta.shape.at(1));
    std::copy(ta.data.begin(), ta.data.end(), t.a.data());
    t.b = Matrix(tb.shape.at(0), tb.shape.at(1));
    std::copy(tb.data.begin(), tb.data.end(), t.b.data());
    adapter.targets.push_back(std::move(t));
  }
  return adapter;
}

}  // namespace pmlab
