#include "pmlab/experiment.hpp"

#include <fstream>
#include <sstream>

namespace pmlab {

nlohmann::ordered_json default_config_json() {
  return nlohmann::ordered_json{
      {"seed", 42},
      {"model",
       {{"n_layers", 8}, {"d_model", 64}, {"d_ffn", 256}, {"n_heads", 4}, {"max_seq_len", 64}}},
      {"data",
       {{"n_facts", 200},
        {"n_entities", 120},
        {"counterfactual_rate", 0.5},
        {"train_fraction", 0.5}}},
      {"pretrain", {{"steps", 3000}, {"lr", 1e-2}, {"batch", 16}}},
      {"elicitation", {{"n", 5}, {"min_freq", 3}, {"temperature", 0.8}}},
      {"selection", {{"strategy", "ua_gap"}, {"n_layers_to_suppress", 8}, {"n_perm", 1000}}},
      {"suppression", {{"kind", "ffn"}, {"lambda", 0.0}}},
      {"adapt",
       {{"alpha", 0.5},
        {"beta", 0.5},
        {"gamma_start", 1.0},
        {"gamma_end", 5.0},
        {"rank", 4},
        {"lr", 1e-3},
        {"steps", 600},
        {"batch", 16}}},
      {"intervention", {{"lambda_list", {0.0, 0.25, 0.5, 0.75, 1.0, 1.25}}}},
      {"sweep",
       {{"lambda_list", {0.0, 0.25, 0.5, 0.75, 1.0}},
        {"n_list", {1, 2, 4, 6, 8}},
        {"alpha_beta_list",
         {{1.0, 0.0}, {0.75, 0.25}, {0.5, 0.5}, {0.25, 0.75}, {0.0, 1.0}}}}},
      {"eval", {{"max_new", 16}}},
      {"paths", {{"out_dir", "out"}}}};
}

namespace {

// Recursive merge of `user` onto `base`; unknown keys are config errors.
void merge_config(nlohmann::ordered_json& base, const nlohmann::ordered_json& user,
                  const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config: expected an object at '" + prefix + "'");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    if (base[key].is_object() && !base[key].empty() && value.is_object()) {
      merge_config(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

void apply_override(nlohmann::ordered_json& j, const std::string& setting) {
  const auto eq = setting.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: --set expects key.path=value, got '" + setting + "'");
  }
  const std::string keypath = setting.substr(0, eq);
  const std::string value_str = setting.substr(eq + 1);
  nlohmann::ordered_json value;
  try {
    value = nlohmann::ordered_json::parse(value_str);
  } catch (const nlohmann::json::exception&) {
    value = value_str;  // plain string
  }

  nlohmann::ordered_json* node = &j;
  std::istringstream in(keypath);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(in, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) throw ConfigError("config: unknown key '" + keypath + "'");
    node = &(*node)[parts[i]];
  }
  if (parts.empty() || !node->contains(parts.back())) {
    throw ConfigError("config: unknown key '" + keypath + "'");
  }
  (*node)[parts.back()] = value;
}

template <typename T>
T get_field(const nlohmann::ordered_json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

std::string config_hash_of(const nlohmann::ordered_json& effective) {
  nlohmann::ordered_json hashable = effective;
  hashable.erase("paths");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(hashable.dump())));
  return buf;
}

ExperimentConfig experiment_config_from_json(nlohmann::ordered_json j) {
  ExperimentConfig cfg;
  cfg.effective_json = j;
  cfg.config_hash = config_hash_of(j);

  try {
    cfg.seed = get_field<std::uint64_t>(j, "seed");

    const auto& jm = j.at("model");
    cfg.model.n_layers = get_field<int>(jm, "n_layers");
    cfg.model.d_model = get_field<int>(jm, "d_model");
    cfg.model.d_ffn = get_field<int>(jm, "d_ffn");
    cfg.model.n_heads = get_field<int>(jm, "n_heads");
    cfg.model.max_seq_len = get_field<int>(jm, "max_seq_len");
    cfg.model.seed = cfg.stage_seed("model.init");

    const auto& jd = j.at("data");
    cfg.data.n_facts = get_field<int>(jd, "n_facts");
    cfg.data.n_entities = get_field<int>(jd, "n_entities");
    cfg.data.counterfactual_rate = get_field<double>(jd, "counterfactual_rate");
    cfg.data.train_fraction = get_field<double>(jd, "train_fraction");

    const auto& jp = j.at("pretrain");
    cfg.pretrain.steps = get_field<int>(jp, "steps");
    cfg.pretrain.lr = get_field<double>(jp, "lr");
    cfg.pretrain.batch = get_field<int>(jp, "batch");

    const auto& je = j.at("elicitation");
    cfg.elicitation.n = get_field<int>(je, "n");
    cfg.elicitation.min_freq = get_field<int>(je, "min_freq");
    cfg.elicitation.temperature = get_field<double>(je, "temperature");

    const auto& js = j.at("selection");
    cfg.selection.strategy = selection_strategy_from_string(get_field<std::string>(js, "strategy"));
    cfg.selection.n_layers_to_suppress = get_field<int>(js, "n_layers_to_suppress");
    cfg.selection.n_perm = get_field<int>(js, "n_perm");

    const auto& ju = j.at("suppression");
    cfg.suppression.kind = suppression_kind_from_string(get_field<std::string>(ju, "kind"));
    cfg.suppression.lambda = get_field<double>(ju, "lambda");

    const auto& ja = j.at("adapt");
    cfg.adapt.alpha = get_field<double>(ja, "alpha");
    cfg.adapt.beta = get_field<double>(ja, "beta");
    cfg.adapt.gamma_start = get_field<double>(ja, "gamma_start");
    cfg.adapt.gamma_end = get_field<double>(ja, "gamma_end");
    cfg.adapt.rank = get_field<int>(ja, "rank");
    cfg.adapt.lr = get_field<double>(ja, "lr");
    cfg.adapt.steps = get_field<int>(ja, "steps");
    cfg.adapt.batch = get_field<int>(ja, "batch");
    cfg.adapt.seed = cfg.stage_seed("adapt");

    cfg.intervention_lambdas = j.at("intervention").at("lambda_list").get<Vector>();

    const auto& jw = j.at("sweep");
    cfg.sweep.lambda_list = jw.at("lambda_list").get<Vector>();
    cfg.sweep.n_list = jw.at("n_list").get<std::vector<int>>();
    cfg.sweep.alpha_beta_list.clear();
    for (const auto& pair : jw.at("alpha_beta_list")) {
      if (!pair.is_array() || pair.size() != 2) {
        throw ConfigError("config: sweep.alpha_beta_list entries must be [alpha, beta] pairs");
      }
      cfg.sweep.alpha_beta_list.emplace_back(pair[0].get<double>(), pair[1].get<double>());
    }

    cfg.eval.max_new = get_field<int>(j.at("eval"), "max_new");
    cfg.out_dir = get_field<std::string>(j.at("paths"), "out_dir");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  // Structural validation beyond per-field parsing.
  try {
    ModelConfig probe = cfg.model;
    probe.vocab_size = 2;  // placeholder; the vocabulary is data-derived
    probe.validate();
    AdaptConfig ac = cfg.adapt;
    ac.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (cfg.pretrain.steps < 0 || cfg.pretrain.batch < 1 || !(cfg.pretrain.lr > 0)) {
    throw ConfigError("config: bad pretrain section");
  }
  if (cfg.data.n_facts < 1 || cfg.data.n_entities < 2) throw ConfigError("config: bad data section");
  if (cfg.data.counterfactual_rate < 0.0 || cfg.data.counterfactual_rate > 1.0 ||
      cfg.data.train_fraction < 0.0 || cfg.data.train_fraction > 1.0) {
    throw ConfigError("config: rates must be in [0,1]");
  }
  if (cfg.elicitation.n < 1 || cfg.elicitation.min_freq < 1 ||
      cfg.elicitation.min_freq > cfg.elicitation.n || cfg.elicitation.temperature < 0.0) {
    throw ConfigError("config: bad elicitation section");
  }
  if (cfg.selection.n_layers_to_suppress < 1 || cfg.selection.n_perm < 100) {
    throw ConfigError("config: bad selection section");
  }
  if (cfg.suppression.lambda < 0.0) throw ConfigError("config: suppression lambda must be >= 0");
  if (cfg.intervention_lambdas.empty() || cfg.sweep.lambda_list.empty()) {
    throw ConfigError("config: lambda lists must be non-empty");
  }
  if (cfg.eval.max_new < 1) throw ConfigError("config: eval.max_new must be >= 1");
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides,
                                        const std::optional<std::string>& out_dir,
                                        const std::optional<std::uint64_t>& seed) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::ordered_json user;
  try {
    user = nlohmann::ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in " + path + ": " + e.what());
  }

  nlohmann::ordered_json effective = default_config_json();
  merge_config(effective, user, "");
  for (const auto& setting : overrides) apply_override(effective, setting);
  if (seed.has_value()) effective["seed"] = *seed;
  if (out_dir.has_value()) effective["paths"]["out_dir"] = *out_dir;
  return experiment_config_from_json(std::move(effective));
}

}  // namespace pmlab
