#include "pmlab/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "pmlab/activation.hpp"
#include "pmlab/adapt.hpp"
#include "pmlab/checkpoint.hpp"
#include "pmlab/dataqa.hpp"
#include "pmlab/evalkit.hpp"

namespace pmlab {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string provenance_line(const ExperimentConfig& cfg) {
  return "# config_hash=" + cfg.config_hash + " seed=" + std::to_string(cfg.seed) + "\n";
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

void ensure_out_dir(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
}

void require_exists(const std::string& path, const std::string& producer) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("missing artifact " + path + "; run '" + producer + "' first");
  }
}

void check_hash(const nlohmann::ordered_json& meta, const std::string& file,
                const ExperimentConfig& cfg) {
  if (!meta.contains("config_hash") || meta.at("config_hash").get<std::string>() != cfg.config_hash) {
    throw StaleArtifactError(file);
  }
}

std::vector<Fact> pipeline_facts(const ExperimentConfig& cfg) {
  return gen_factbase(cfg.data.n_facts, cfg.data.n_entities, cfg.stage_seed("data"));
}

std::vector<int> instance_context_prompt(const Vocab& vocab, const QAInstance& inst) {
  std::vector<int> prompt = {Vocab::kBosId};
  for (int t : vocab.encode(inst.context)) prompt.push_back(t);
  for (int t : vocab.encode(inst.question)) prompt.push_back(t);
  return prompt;
}

std::vector<int> answer_tokens(const Vocab& vocab, const std::string& answer) {
  std::vector<int> t = vocab.encode(answer);
  t.push_back(Vocab::kEosId);
  return t;
}

std::vector<QAInstance> subset_by_ids(const Benchmark& bench, const std::vector<int>& ids,
                                      int faithful_filter /* -1 = all */) {
  std::vector<QAInstance> out;
  for (int id : ids) {
    const QAInstance& inst = bench.instances[static_cast<std::size_t>(id)];
    if (faithful_filter < 0 || inst.faithful == faithful_filter) out.push_back(inst);
  }
  return out;
}

}  // namespace

ToyTransformer load_model_checked(const ExperimentConfig& cfg) {
  ArtifactPaths paths{cfg.out_dir};
  require_exists(paths.checkpoint(), "pretrain");
  auto meta = checkpoint_metadata(paths.checkpoint());
  check_hash(meta, paths.checkpoint(), cfg);
  return load_checkpoint(paths.checkpoint());
}

Benchmark load_benchmark_checked(const ExperimentConfig& cfg) {
  ArtifactPaths paths{cfg.out_dir};
  require_exists(paths.benchmark(), "build-benchmark");
  require_exists(paths.benchmark_stats(), "build-benchmark");
  std::ifstream f(paths.benchmark_stats());
  nlohmann::ordered_json stats = nlohmann::ordered_json::parse(f);
  check_hash(stats, paths.benchmark_stats(), cfg);

  Benchmark bench;
  bench.instances = read_benchmark_jsonl(paths.benchmark());
  bench.seed = stats.at("seed").get<std::uint64_t>();
  bench.counts.facts = stats.at("stage_counts").at("facts").get<int>();
  bench.counts.elicited = stats.at("stage_counts").at("elicited").get<int>();
  bench.counts.retained = stats.at("stage_counts").at("retained").get<int>();
  bench.counts.faithful = stats.at("stage_counts").at("faithful").get<int>();
  bench.counts.unfaithful = stats.at("stage_counts").at("unfaithful").get<int>();
  auto [train, eval] = split_instance_ids(static_cast<int>(bench.instances.size()),
                                          cfg.data.train_fraction, bench.seed);
  bench.train_ids = std::move(train);
  bench.eval_ids = std::move(eval);
  for (const auto& inst : bench.instances) ++bench.freq_histogram[inst.parametric_freq];
  return bench;
}

SelectionResult load_selection_checked(const ExperimentConfig& cfg) {
  ArtifactPaths paths{cfg.out_dir};
  require_exists(paths.selection(), "analyze");
  std::ifstream f(paths.selection());
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(f);
  check_hash(j, paths.selection(), cfg);
  SelectionResult sel;
  sel.strategy = selection_strategy_from_string(j.at("strategy").get<std::string>());
  sel.n_requested = j.at("n_requested").get<int>();
  sel.layers = j.at("layers").get<std::vector<int>>();
  sel.seed = j.at("seed").get<std::uint64_t>();
  sel.clamped = j.at("clamped").get<bool>();
  return sel;
}

PretrainSummary run_pretrain(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};

  std::vector<Fact> facts = pipeline_facts(cfg);
  Vocab vocab = build_vocab(facts);
  std::vector<SeqExample> corpus = encode_corpus(vocab, build_corpus(facts));

  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  ToyTransformer model = init_model(mc);
  model.vocab = vocab;

  std::vector<TrainLogEntry> log = train_lm(model, corpus, cfg.pretrain.steps, cfg.pretrain.lr,
                                            cfg.pretrain.batch, cfg.stage_seed("pretrain"));

  // Closed-book recall report: greedy answers against the memorized objects.
  std::string cb = provenance_line(cfg) + "fact_id,subject,relation,object,predicted,hit\n";
  int hits = 0;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const Fact& fact = facts[i];
    std::vector<int> prompt = {Vocab::kBosId};
    for (int t : vocab.encode(question_for(fact))) prompt.push_back(t);
    std::vector<int> continuation = sample(model, prompt, 4, 0.0, 0);
    const std::string predicted = vocab.decode(continuation);
    const bool hit = normalize_answer(predicted) == normalize_answer(fact.object);
    if (hit) ++hits;
    cb += std::to_string(i) + "," + fact.subject + "," + fact.relation + "," + fact.object + "," +
          predicted + "," + (hit ? "1" : "0") + "\n";
  }
  write_text(paths.closed_book(), cb);

  std::string plog = provenance_line(cfg) + "step,loss\n";
  for (const auto& e : log) plog += std::to_string(e.step) + "," + fmt(e.loss) + "\n";
  write_text(paths.pretrain_log(), plog);

  PretrainSummary summary;
  summary.final_loss = log.empty() ? 0.0 : log.back().loss;
  summary.n_facts = static_cast<int>(facts.size());
  summary.closed_book_em = static_cast<double>(hits) / static_cast<double>(facts.size());

  nlohmann::ordered_json meta;
  meta["config_hash"] = cfg.config_hash;
  meta["seed"] = cfg.seed;
  meta["steps"] = cfg.pretrain.steps;
  meta["final_loss"] = summary.final_loss;
  meta["closed_book_em"] = summary.closed_book_em;
  save_checkpoint(model, paths.checkpoint(), meta);
  return summary;
}

Benchmark run_build_benchmark(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};
  ToyTransformer model = load_model_checked(cfg);
  std::vector<Fact> facts = pipeline_facts(cfg);

  BenchmarkParams params;
  params.counterfactual_rate = cfg.data.counterfactual_rate;
  params.train_fraction = cfg.data.train_fraction;
  params.elicitation = cfg.elicitation;
  Benchmark bench = build_benchmark(model, facts, params, cfg.stage_seed("benchmark"));

  write_benchmark_jsonl(paths.benchmark(), bench);
  nlohmann::ordered_json stats = benchmark_stats_json(bench);
  stats["config_hash"] = cfg.config_hash;
  write_text(paths.benchmark_stats(), stats.dump(2) + "\n");
  return bench;
}

AnalyzeSummary run_analyze(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};
  ToyTransformer model = load_model_checked(cfg);
  Benchmark bench = load_benchmark_checked(cfg);
  if (bench.instances.empty()) throw std::runtime_error("analyze: benchmark has no instances");

  // Response-level activation ratios: forward context+question+r_hat and
  // average the per-position ratios over the r_hat span.
  std::vector<std::vector<double>> ratios;
  std::vector<int> labels;
  for (const QAInstance& inst : bench.instances) {
    std::vector<int> tokens = instance_context_prompt(model.vocab, inst);
    const std::size_t span_begin = tokens.size();
    for (int t : model.vocab.encode(inst.parametric_answer)) tokens.push_back(t);
    const std::size_t span_end = tokens.size();
    ActivationTrace trace;
    forward(model, tokens, nullptr, &trace);
    std::vector<double> row(static_cast<std::size_t>(model.config.n_layers));
    for (int l = 0; l < model.config.n_layers; ++l) {
      row[static_cast<std::size_t>(l)] = response_ratio(trace, l, span_begin, span_end);
    }
    ratios.push_back(std::move(row));
    labels.push_back(inst.faithful);
  }

  AnalyzeSummary summary;
  summary.stats = compute_layer_stats(ratios, labels, static_cast<std::size_t>(cfg.selection.n_perm),
                                      cfg.stage_seed("analysis"));
  summary.selection = select_layers(summary.stats, cfg.selection.n_layers_to_suppress,
                                    cfg.selection.strategy, cfg.stage_seed("selection"));

  std::string csv = provenance_line(cfg) + "layer,mean_unfaithful,mean_faithful,gap,pcc,p_value\n";
  for (const auto& s : summary.stats) {
    csv += std::to_string(s.layer) + "," + fmt(s.mean_ratio_unfaithful) + "," +
           fmt(s.mean_ratio_faithful) + "," + fmt(s.gap) + "," + fmt(s.pcc) + "," +
           fmt(s.p_value) + "\n";
  }
  write_text(paths.layer_stats(), csv);

  nlohmann::ordered_json sel;
  sel["config_hash"] = cfg.config_hash;
  sel["seed"] = summary.selection.seed;
  sel["strategy"] = to_string(summary.selection.strategy);
  sel["n_requested"] = summary.selection.n_requested;
  sel["clamped"] = summary.selection.clamped;
  sel["layers"] = summary.selection.layers;
  write_text(paths.selection(), sel.dump(2) + "\n");
  return summary;
}

SuppressionPlan pipeline_plan(const ExperimentConfig& cfg, const ToyTransformer& model,
                              const SelectionResult& selection, const Benchmark& benchmark) {
  SuppressionPlan plan;
  plan.kind = cfg.suppression.kind;
  plan.lambda = cfg.suppression.lambda;
  if (plan.kind == SuppressionKind::Parameter) {
    // SNIP mask over the selected layers' FFN parameters, scored on the
    // closed-book recall of the elicited answers (64-instance sample). top_k
    // matches the value-path parameter count of the FFN strategy.
    std::vector<SeqExample> sample_set;
    for (const QAInstance& inst : benchmark.instances) {
      if (sample_set.size() >= 64) break;
      SeqExample e;
      e.prompt = {Vocab::kBosId};
      for (int t : model.vocab.encode(inst.question)) e.prompt.push_back(t);
      e.target = answer_tokens(model.vocab, inst.parametric_answer);
      sample_set.push_back(std::move(e));
    }
    const std::size_t top_k = selection.layers.size() *
                              static_cast<std::size_t>(model.config.d_ffn) *
                              static_cast<std::size_t>(model.config.d_model);
    plan.param_mask = snip_saliency(model, sample_set, selection.layers, top_k);
  } else {
    plan.layers = selection.layers;
  }
  plan.validate(model.config);
  return plan;
}

InterventionResult run_intervene(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};
  ToyTransformer model = load_model_checked(cfg);
  Benchmark bench = load_benchmark_checked(cfg);
  SelectionResult selection = load_selection_checked(cfg);

  std::vector<SeqExample> d_minus, d_plus;
  for (const QAInstance& inst : bench.instances) {
    SeqExample e;
    e.prompt = instance_context_prompt(model.vocab, inst);
    // Unfaithful instances score the recorded parametric answer; faithful
    // ones score the contextual answer.
    e.target = answer_tokens(
        model.vocab, inst.faithful == 0 ? inst.parametric_answer : inst.contextual_answer);
    (inst.faithful == 0 ? d_minus : d_plus).push_back(std::move(e));
  }

  InterventionResult res =
      intervention_sweep(model, d_minus, d_plus, selection.layers, cfg.intervention_lambdas);

  std::string csv = provenance_line(cfg) + "lambda,nll_unfaithful,nll_faithful\n";
  for (std::size_t i = 0; i < res.lambdas.size(); ++i) {
    csv += fmt(res.lambdas[i]) + "," + fmt(res.nll_unfaithful[i]) + "," +
           fmt(res.nll_faithful[i]) + "\n";
  }
  write_text(paths.intervention(), csv);
  return res;
}

AdaptResult run_adapt(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};
  ToyTransformer model = load_model_checked(cfg);
  Benchmark bench = load_benchmark_checked(cfg);
  SelectionResult selection = load_selection_checked(cfg);
  SuppressionPlan plan = pipeline_plan(cfg, model, selection, bench);

  std::vector<AdaptExample> train;
  for (const QAInstance& inst : subset_by_ids(bench, bench.train_ids, -1)) {
    train.push_back({inst.question, inst.context, inst.contextual_answer});
  }
  if (train.empty()) throw std::runtime_error("adapt: empty training split");

  AdaptResult result = train_adapter(model, plan, train, cfg.adapt);

  std::string csv = provenance_line(cfg) + "step,kat_loss,kpo_loss,gamma,combined\n";
  for (const auto& e : result.log) {
    csv += std::to_string(e.step) + "," + fmt(e.kat) + "," + fmt(e.kpo) + "," + fmt(e.gamma) +
           "," + fmt(e.combined) + "\n";
  }
  write_text(paths.adapt_log(), csv);

  nlohmann::ordered_json meta;
  meta["config_hash"] = cfg.config_hash;
  meta["seed"] = cfg.seed;
  meta["initial_mean_loss"] = result.initial_mean_loss;
  meta["final_mean_loss"] = result.final_mean_loss;
  meta["n_train"] = train.size();
  save_adapter(result.adapter, paths.adapter(), meta);
  return result;
}

EvalReport run_evaluate(const ExperimentConfig& cfg, const std::string& model_tag,
                        const std::string& plan_tag) {
  if (model_tag != "vanilla" && model_tag != "adapted") {
    throw ConfigError("evaluate: model_tag must be 'vanilla' or 'adapted'");
  }
  if (plan_tag != "none" && plan_tag != "suppress") {
    throw ConfigError("evaluate: plan_tag must be 'none' or 'suppress'");
  }
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};
  ToyTransformer model = load_model_checked(cfg);
  Benchmark bench = load_benchmark_checked(cfg);

  SuppressionPlan plan;  // identity by default
  plan.kind = SuppressionKind::FFN;
  plan.lambda = 1.0;
  if (plan_tag == "suppress") {
    SelectionResult selection = load_selection_checked(cfg);
    plan = pipeline_plan(cfg, model, selection, bench);
  }

  ToyTransformer evaluated = model;
  if (model_tag == "adapted") {
    require_exists(paths.adapter(), "adapt");
    auto meta = checkpoint_metadata(paths.adapter());
    check_hash(meta, paths.adapter(), cfg);
    Adapter adapter = load_adapter(paths.adapter());
    evaluated = merge_adapter(model, adapter);
  }

  // Evaluation runs on the unfaithful eval split.
  std::vector<QAInstance> subset = subset_by_ids(bench, bench.eval_ids, 0);
  if (subset.empty()) throw std::runtime_error("evaluate: eval split has no unfaithful instances");

  ModelView view = apply_plan(evaluated, plan);
  DecodeConfig decode;
  decode.max_new = cfg.eval.max_new;
  EvalReport report = evaluate(view, subset, decode);

  nlohmann::ordered_json j;
  j["config_hash"] = cfg.config_hash;
  j["seed"] = cfg.seed;
  j["model_tag"] = model_tag;
  j["plan_tag"] = plan_tag;
  j["n_instances"] = report.n_instances;
  j["conr"] = report.metrics.conr;
  j["memr"] = report.metrics.memr;
  if (report.metrics.mr_defined) j["mr"] = report.metrics.mr;
  else j["mr"] = nullptr;
  j["sim_to_parametric"] = report.sim_to_parametric;
  j["sim_to_contextual"] = report.sim_to_contextual;
  j["ppl_with_context"] = report.ppl_with_context;
  j["ppl_without_context"] = report.ppl_without_context;
  nlohmann::ordered_json buckets = nlohmann::ordered_json::array();
  for (const auto& b : report.buckets) {
    nlohmann::ordered_json bj;
    bj["freq"] = b.freq;
    bj["count"] = b.count;
    bj["conr"] = b.metrics.conr;
    bj["memr"] = b.metrics.memr;
    if (b.metrics.mr_defined) bj["mr"] = b.metrics.mr;
    else bj["mr"] = nullptr;
    buckets.push_back(bj);
  }
  j["buckets"] = buckets;
  write_text(paths.eval_json(model_tag, plan_tag), j.dump(2) + "\n");

  std::string csv = provenance_line(cfg) +
                    "model_tag,plan_tag,conr,memr,mr,sim_parametric,sim_contextual,ppl_ctx,"
                    "ppl_noctx,n\n";
  csv += model_tag + "," + plan_tag + "," + fmt(report.metrics.conr) + "," +
         fmt(report.metrics.memr) + "," +
         (report.metrics.mr_defined ? fmt(report.metrics.mr) : "nan") + "," +
         fmt(report.sim_to_parametric) + "," + fmt(report.sim_to_contextual) + "," +
         fmt(report.ppl_with_context) + "," + fmt(report.ppl_without_context) + "," +
         std::to_string(report.n_instances) + "\n";
  write_text(paths.eval_csv(model_tag, plan_tag), csv);
  return report;
}

void run_sweep(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  ArtifactPaths paths{cfg.out_dir};
  ToyTransformer model = load_model_checked(cfg);
  Benchmark bench = load_benchmark_checked(cfg);
  SelectionResult selection = load_selection_checked(cfg);

  std::vector<QAInstance> subset = subset_by_ids(bench, bench.eval_ids, 0);
  if (subset.empty()) throw std::runtime_error("sweep: eval split has no unfaithful instances");
  DecodeConfig decode;
  decode.max_new = cfg.eval.max_new;

  auto metrics_csv = [&](const ConrMemr& m) {
    return fmt(m.conr) + "," + fmt(m.memr) + "," + (m.mr_defined ? fmt(m.mr) : "nan");
  };

  // Zero-shot suppression strength curve.
  {
    std::string csv = provenance_line(cfg) + "lambda,conr,memr,mr\n";
    for (double lambda : cfg.sweep.lambda_list) {
      SuppressionPlan plan;
      plan.kind = SuppressionKind::FFN;
      plan.layers = selection.layers;
      plan.lambda = lambda;
      EvalReport r = evaluate(apply_plan(model, plan), subset, decode);
      csv += fmt(lambda) + "," + metrics_csv(r.metrics) + "\n";
    }
    write_text(paths.sweep_lambda(), csv);
  }

  std::vector<AdaptExample> train;
  for (const QAInstance& inst : subset_by_ids(bench, bench.train_ids, -1)) {
    train.push_back({inst.question, inst.context, inst.contextual_answer});
  }

  auto trained_metrics = [&](const SuppressionPlan& plan, const AdaptConfig& ac) {
    AdaptResult res = train_adapter(model, plan, train, ac);
    ToyTransformer merged = merge_adapter(model, res.adapter);
    EvalReport r = evaluate(apply_plan(merged, plan), subset, decode);
    return r.metrics;
  };

  // Suppression-count curve, retrained per grid point. Layer ranking comes
  // from the recorded per-layer stats table.
  {
    std::ifstream ls(paths.layer_stats());
    if (!ls) throw std::runtime_error("sweep: missing " + paths.layer_stats());
    std::string line;
    std::getline(ls, line);  // provenance
    std::getline(ls, line);  // header
    std::vector<LayerStats> stats;
    while (std::getline(ls, line)) {
      LayerStats s;
      if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf", &s.layer, &s.mean_ratio_unfaithful,
                      &s.mean_ratio_faithful, &s.gap, &s.pcc, &s.p_value) == 6) {
        stats.push_back(s);
      }
    }

    std::string csv = provenance_line(cfg) + "n,conr,memr,mr\n";
    for (int n : cfg.sweep.n_list) {
      SelectionResult sel_n =
          select_layers(stats, n, cfg.selection.strategy, cfg.stage_seed("selection"));
      SuppressionPlan plan;
      plan.kind = cfg.suppression.kind;
      plan.lambda = cfg.suppression.lambda;
      plan.layers = sel_n.layers;
      if (plan.kind == SuppressionKind::Parameter) plan = pipeline_plan(cfg, model, sel_n, bench);
      ConrMemr m = trained_metrics(plan, cfg.adapt);
      csv += std::to_string(n) + "," + metrics_csv(m) + "\n";
    }
    write_text(paths.sweep_topn(), csv);
  }

  // Loss-weight ratio curve, retrained per grid point.
  {
    SuppressionPlan plan = pipeline_plan(cfg, model, selection, bench);
    std::string csv = provenance_line(cfg) + "alpha,beta,conr,memr,mr\n";
    for (const auto& [alpha, beta] : cfg.sweep.alpha_beta_list) {
      AdaptConfig ac = cfg.adapt;
      ac.alpha = alpha;
      ac.beta = beta;
      ConrMemr m = trained_metrics(plan, ac);
      csv += fmt(alpha) + "," + fmt(beta) + "," + metrics_csv(m) + "\n";
    }
    write_text(paths.sweep_alphabeta(), csv);
  }
}

void run_all(const ExperimentConfig& cfg) {
  run_pretrain(cfg);
  run_build_benchmark(cfg);
  run_analyze(cfg);
  run_intervene(cfg);
  run_adapt(cfg);
  run_evaluate(cfg, "vanilla", "none");
  run_evaluate(cfg, "vanilla", "suppress");
  run_evaluate(cfg, "adapted", "suppress");
}

}  // namespace pmlab
