#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "pmlab/pipeline.hpp"

using namespace pmlab;
namespace fs = std::filesystem;

namespace {

// A fast configuration for pipeline plumbing tests.
nlohmann::ordered_json micro_config_json(const std::string& out_dir) {
  nlohmann::ordered_json j = default_config_json();
  j["seed"] = 11;
  j["model"] = {{"n_layers", 2}, {"d_model", 16}, {"d_ffn", 32}, {"n_heads", 2}, {"max_seq_len", 48}};
  j["data"] = {{"n_facts", 12},
               {"n_entities", 8},
               {"counterfactual_rate", 0.5},
               {"train_fraction", 0.5}};
  j["pretrain"] = {{"steps", 350}, {"lr", 3e-3}, {"batch", 8}};
  j["selection"]["n_layers_to_suppress"] = 1;
  j["selection"]["n_perm"] = 200;
  j["adapt"]["steps"] = 15;
  j["adapt"]["batch"] = 4;
  j["intervention"]["lambda_list"] = {0.0, 1.0};
  j["paths"]["out_dir"] = out_dir;
  return j;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config loading, overrides and validation") {
  TempDir dir("pmlab_cfg_test");
  const std::string cfg_path = (dir.path / "config.json").string();
  {
    std::ofstream f(cfg_path);
    f << R"({"seed": 7, "pretrain": {"steps": 5}})";
  }

  ExperimentConfig cfg = load_experiment_config(cfg_path);
  CHECK(cfg.seed == 7);
  CHECK(cfg.pretrain.steps == 5);
  // untouched keys keep their documented defaults
  CHECK(cfg.selection.n_layers_to_suppress == 8);
  CHECK(cfg.suppression.lambda == 0.0);
  CHECK(cfg.adapt.alpha == 0.5);
  CHECK(cfg.adapt.beta == 0.5);
  CHECK(cfg.elicitation.n == 5);
  CHECK(cfg.elicitation.min_freq == 3);
  CHECK(cfg.intervention_lambdas == Vector{0.0, 0.25, 0.5, 0.75, 1.0, 1.25});

  ExperimentConfig with_set =
      load_experiment_config(cfg_path, {"pretrain.steps=9", "suppression.lambda=0.25"});
  CHECK(with_set.pretrain.steps == 9);
  CHECK(with_set.suppression.lambda == 0.25);
  CHECK(with_set.config_hash != cfg.config_hash);

  ExperimentConfig with_out = load_experiment_config(cfg_path, {}, "elsewhere", 123);
  CHECK(with_out.out_dir == "elsewhere");
  CHECK(with_out.seed == 123);
  // out_dir is excluded from the hash; the seed is not
  CHECK(load_experiment_config(cfg_path, {}, "other", 7).config_hash == cfg.config_hash);

  {
    std::ofstream f(cfg_path);
    f << R"({"unknown_section": 1})";
  }
  CHECK_THROWS_AS(load_experiment_config(cfg_path), ConfigError);
  {
    std::ofstream f(cfg_path);
    f << R"({"adapt": {"alpha": -1}})";
  }
  CHECK_THROWS_AS(load_experiment_config(cfg_path), ConfigError);
}

TEST_CASE("pipeline end to end on a micro config") {
  TempDir dir("pmlab_pipe_test");
  ExperimentConfig cfg = experiment_config_from_json(micro_config_json((dir.path / "out").string()));
  ArtifactPaths paths{cfg.out_dir};

  auto pre = run_pretrain(cfg);
  CHECK(fs::exists(paths.checkpoint()));
  CHECK(fs::exists(paths.pretrain_log()));
  CHECK(fs::exists(paths.closed_book()));
  CHECK(pre.n_facts == 12);

  Benchmark bench = run_build_benchmark(cfg);
  CHECK(fs::exists(paths.benchmark()));
  CHECK(fs::exists(paths.benchmark_stats()));
  // stage counts are monotone along the pipeline
  CHECK(bench.counts.retained <= bench.counts.elicited);
  CHECK(bench.counts.elicited <= bench.counts.facts);
  REQUIRE(bench.counts.unfaithful > 0);
  REQUIRE(bench.counts.faithful > 0);

  // rerunning reproduces the benchmark byte for byte
  const std::string first = read_file(paths.benchmark());
  run_build_benchmark(cfg);
  CHECK(read_file(paths.benchmark()) == first);

  // schema: keys in exactly the contract order, LF endings
  {
    std::ifstream f(paths.benchmark());
    std::string line;
    REQUIRE(std::getline(f, line));
    auto j = nlohmann::ordered_json::parse(line);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    CHECK(keys == std::vector<std::string>{"id", "question", "context", "contextual_answer",
                                           "parametric_answer", "parametric_freq", "faithful"});
    CHECK(first.find("\r\n") == std::string::npos);
  }

  auto analysis = run_analyze(cfg);
  CHECK(fs::exists(paths.layer_stats()));
  CHECK(fs::exists(paths.selection()));
  CHECK(analysis.selection.layers.size() == 1);
  for (const auto& s : analysis.stats) {
    CHECK(s.pcc >= -1.0);
    CHECK(s.pcc <= 1.0);
    CHECK(s.p_value > 0.0);
    CHECK(s.p_value <= 1.0);
  }

  auto intervention = run_intervene(cfg);
  CHECK(fs::exists(paths.intervention()));
  CHECK(intervention.lambdas == Vector{0.0, 1.0});

  auto adapt_res = run_adapt(cfg);
  CHECK(fs::exists(paths.adapter()));
  CHECK(fs::exists(paths.adapt_log()));
  CHECK(adapt_res.log.size() == 15);

  auto vanilla = run_evaluate(cfg, "vanilla", "none");
  auto adapted = run_evaluate(cfg, "adapted", "suppress");
  CHECK(fs::exists(paths.eval_json("vanilla", "none")));
  CHECK(fs::exists(paths.eval_csv("adapted", "suppress")));
  CHECK(vanilla.n_instances > 0);
  CHECK(adapted.n_instances == vanilla.n_instances);

  CHECK_THROWS_AS(run_evaluate(cfg, "bogus", "none"), ConfigError);

  // eval artifacts embed the config hash and seed
  const std::string eval_csv = read_file(paths.eval_csv("vanilla", "none"));
  CHECK(eval_csv.find("config_hash=" + cfg.config_hash) != std::string::npos);
  CHECK(eval_csv.find("seed=" + std::to_string(cfg.seed)) != std::string::npos);

  // a config change makes downstream commands fail fast on stale artifacts
  nlohmann::ordered_json changed = micro_config_json((dir.path / "out").string());
  changed["seed"] = 12;
  ExperimentConfig cfg2 = experiment_config_from_json(changed);
  CHECK_THROWS_AS(run_analyze(cfg2), StaleArtifactError);
  CHECK_THROWS_AS(run_build_benchmark(cfg2), StaleArtifactError);
  try {
    run_analyze(cfg2);
  } catch (const StaleArtifactError& e) {
    CHECK(std::string(e.what()).find("checkpoint.pmck") != std::string::npos);
  }
}

TEST_CASE("missing artifacts are reported as missing, not stale") {
  TempDir dir("pmlab_missing_test");
  ExperimentConfig cfg = experiment_config_from_json(micro_config_json((dir.path / "none").string()));
  CHECK_THROWS_WITH_AS(run_build_benchmark(cfg),
                       doctest::Contains("missing artifact"), std::runtime_error);
}
