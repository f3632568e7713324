#include "pmlab/dataqa.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "pmlab/rng.hpp"

namespace pmlab {

namespace {

const std::vector<std::string> kRelations = {
    "capital", "color", "leader", "currency", "anthem", "emblem", "dialect", "founder"};

const std::vector<std::string> kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
const std::vector<std::string> kNuclei = {"a", "e", "i", "o", "u"};

std::string nonce_word(Rng& rng) {
  // Three CV syllables, e.g. "kemora".
  std::string w;
  for (int s = 0; s < 3; ++s) {
    w += kOnsets[rng.index(kOnsets.size())];
    w += kNuclei[rng.index(kNuclei.size())];
  }
  return w;
}

}  // namespace

std::vector<Fact> gen_factbase(int n_facts, int n_entities, std::uint64_t seed) {
  if (n_entities < 2) throw std::invalid_argument("gen_factbase: need at least 2 entities");
  if (n_facts < 1) throw std::invalid_argument("gen_factbase: need at least 1 fact");
  const std::size_t max_pairs = static_cast<std::size_t>(n_entities) * kRelations.size();
  if (static_cast<std::size_t>(n_facts) > max_pairs) {
    throw std::invalid_argument("gen_factbase: uniqueness of (subject, relation) is unsatisfiable");
  }

  Rng rng(derive_seed(seed, "factbase"));
  std::set<std::string> entity_set;
  while (static_cast<int>(entity_set.size()) < n_entities) entity_set.insert(nonce_word(rng));
  std::vector<std::string> entities(entity_set.begin(), entity_set.end());

  std::vector<Fact> facts;
  std::set<std::pair<std::string, std::string>> used;
  while (static_cast<int>(facts.size()) < n_facts) {
    Fact f;
    f.subject = entities[rng.index(entities.size())];
    f.relation = kRelations[rng.index(kRelations.size())];
    if (!used.insert({f.subject, f.relation}).second) continue;
    do {
      f.object = entities[rng.index(entities.size())];
    } while (f.object == f.subject);
    facts.push_back(std::move(f));
  }
  return facts;
}

std::vector<CorpusText> build_corpus(const std::vector<Fact>& facts) {
  if (facts.empty()) throw std::invalid_argument("build_corpus: empty fact base");
  std::vector<CorpusText> corpus;
  corpus.reserve(facts.size() * 5);
  for (const Fact& f : facts) {
    corpus.push_back({"the " + f.relation + " of " + f.subject + " is", f.object + " ."});
    corpus.push_back({f.subject + " has " + f.relation, f.object + " ."});
    corpus.push_back({"it is known that the " + f.relation + " of " + f.subject + " is",
                      f.object + " ."});
    corpus.push_back({question_for(f), f.object});
    // Passage-then-question form with the consistent fact. This gives the
    // model a context-reading pathway alongside the parametric one; the two
    // only disagree later, on counterfactual benchmark contexts.
    corpus.push_back({context_for(f, f.object) + " " + question_for(f), f.object});
  }
  return corpus;
}

std::string question_for(const Fact& fact) {
  return "Q: " + fact.relation + " of " + fact.subject + " ? A:";
}

std::string context_for(const Fact& fact, const std::string& context_object) {
  return "the " + fact.relation + " of " + fact.subject + " is " + context_object + " .";
}

Vocab build_vocab(const std::vector<Fact>& facts) {
  std::vector<std::string> texts;
  for (const auto& e : build_corpus(facts)) {
    texts.push_back(e.prompt);
    texts.push_back(e.completion);
  }
  return Vocab::build(texts);
}

std::vector<SeqExample> encode_corpus(const Vocab& vocab, const std::vector<CorpusText>& corpus) {
  std::vector<SeqExample> out;
  out.reserve(corpus.size());
  for (const auto& e : corpus) {
    SeqExample s;
    s.prompt.push_back(Vocab::kBosId);
    for (int t : vocab.encode(e.prompt)) s.prompt.push_back(t);
    s.target = vocab.encode(e.completion);
    s.target.push_back(Vocab::kEosId);
    out.push_back(std::move(s));
  }
  return out;
}

std::string normalize_answer(const std::string& s) {
  std::string cleaned;
  cleaned.reserve(s.size());
  for (unsigned char c : s) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::istringstream in(cleaned);
  std::string w, out;
  while (in >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::optional<std::pair<std::string, int>> majority_vote(const std::vector<std::string>& answers,
                                                         int min_freq) {
  std::map<std::string, int> counts;  // ordered: ties resolve to the smallest key
  for (const auto& a : answers) ++counts[normalize_answer(a)];
  std::string best;
  int best_count = 0;
  for (const auto& [answer, count] : counts) {
    if (count > best_count) {
      best = answer;
      best_count = count;
    }
  }
  if (best_count < min_freq) return std::nullopt;
  return std::make_pair(best, best_count);
}

std::optional<std::pair<std::string, int>> elicit(const ToyTransformer& model,
                                                  const std::string& question, int n,
                                                  double temperature, std::uint64_t seed,
                                                  int min_freq) {
  if (n < 1) throw std::invalid_argument("elicit: n must be >= 1");
  if (model.vocab.empty()) throw std::invalid_argument("elicit: model has no vocabulary");

  std::vector<int> prompt = {Vocab::kBosId};
  for (int t : model.vocab.encode(question)) prompt.push_back(t);

  std::vector<std::string> answers;
  for (int i = 0; i < n; ++i) {
    std::vector<int> continuation =
        sample(model, prompt, 4, temperature, derive_seed(seed, "elicit." + std::to_string(i)));
    answers.push_back(model.vocab.decode(continuation));
  }
  return majority_vote(answers, min_freq);
}

namespace {

bool is_token_sublist(const std::vector<std::string>& needle,
                      const std::vector<std::string>& haystack) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool match = true;
    for (std::size_t j = 0; j < needle.size(); ++j) {
      if (haystack[i + j] != needle[j]) {
        match = false;
        break;
      }
    }
    if (match) return true;
  }
  return false;
}

}  // namespace

int detect_conflict(const std::string& r_hat, const std::string& y_star,
                    const std::string& context) {
  (void)context;  // the oracle compares answers only
  const std::string a = normalize_answer(r_hat);
  const std::string b = normalize_answer(y_star);
  if (a == b) return a.empty() ? 0 : 1;
  const auto ta = Vocab::split(a);
  const auto tb = Vocab::split(b);
  if (is_token_sublist(ta, tb) || is_token_sublist(tb, ta)) return 1;
  return 0;
}

std::pair<std::vector<int>, std::vector<int>> split_instance_ids(int n_instances,
                                                                 double train_fraction,
                                                                 std::uint64_t seed) {
  if (train_fraction < 0.0 || train_fraction > 1.0) {
    throw std::invalid_argument("split_instance_ids: train_fraction must be in [0,1]");
  }
  std::vector<int> ids(static_cast<std::size_t>(n_instances));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, "benchmark.split"));
  rng.shuffle(ids);
  const auto n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(n_instances)));
  std::vector<int> train(ids.begin(), ids.begin() + n_train);
  std::vector<int> eval(ids.begin() + n_train, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(eval.begin(), eval.end());
  return {std::move(train), std::move(eval)};
}

Benchmark build_benchmark(const ToyTransformer& model, const std::vector<Fact>& facts,
                          const BenchmarkParams& params, std::uint64_t seed) {
  if (params.counterfactual_rate < 0.0 || params.counterfactual_rate > 1.0) {
    throw std::invalid_argument("build_benchmark: counterfactual_rate must be in [0,1]");
  }
  if (facts.empty()) throw std::invalid_argument("build_benchmark: empty fact base");
  if (model.vocab.empty()) throw std::invalid_argument("build_benchmark: model has no vocabulary");

  // Substitution pool: every answer entity, guaranteed in-vocabulary.
  std::set<std::string> object_set;
  for (const Fact& f : facts) {
    object_set.insert(f.object);
    if (!model.vocab.contains(f.subject) || !model.vocab.contains(f.relation) ||
        !model.vocab.contains(f.object)) {
      throw std::invalid_argument("build_benchmark: fact tokens missing from model vocabulary");
    }
  }
  std::vector<std::string> objects(object_set.begin(), object_set.end());
  if (objects.size() < 2 && params.counterfactual_rate > 0.0) {
    throw std::invalid_argument("build_benchmark: need at least 2 distinct objects for counterfactuals");
  }

  Rng cf_rng(derive_seed(seed, "benchmark.counterfactual"));
  Benchmark bench;
  bench.seed = seed;
  bench.counts.facts = static_cast<int>(facts.size());

  for (std::size_t fi = 0; fi < facts.size(); ++fi) {
    const Fact& fact = facts[fi];
    // Coin and substitute are drawn per fact so the stream stays aligned
    // regardless of elicitation outcomes.
    const bool counterfactual = cf_rng.uniform() < params.counterfactual_rate;
    std::string ctx_object = fact.object;
    if (counterfactual) {
      do {
        ctx_object = objects[cf_rng.index(objects.size())];
      } while (ctx_object == fact.object);
    }

    const std::string question = question_for(fact);
    ++bench.counts.elicited;
    auto voted = elicit(model, question, params.elicitation.n, params.elicitation.temperature,
                        derive_seed(seed, "benchmark.elicit." + std::to_string(fi)),
                        params.elicitation.min_freq);
    // Empty-normalized majority answers (pure punctuation) are as unreliable
    // as low-frequency ones; discard them with the same filter.
    if (!voted.has_value() || voted->first.empty()) continue;

    QAInstance inst;
    inst.id = static_cast<int>(bench.instances.size());
    inst.question = question;
    inst.context = context_for(fact, ctx_object);
    inst.contextual_answer = ctx_object;
    inst.parametric_answer = voted->first;
    inst.parametric_freq = voted->second;
    inst.faithful = detect_conflict(inst.parametric_answer, inst.contextual_answer, inst.context);
    ++bench.counts.retained;
    if (inst.faithful == 1) ++bench.counts.faithful;
    else ++bench.counts.unfaithful;
    ++bench.freq_histogram[inst.parametric_freq];
    bench.instances.push_back(std::move(inst));
  }

  auto [train, eval] = split_instance_ids(static_cast<int>(bench.instances.size()),
                                          params.train_fraction, seed);
  bench.train_ids = std::move(train);
  bench.eval_ids = std::move(eval);
  return bench;
}

std::string benchmark_to_jsonl(const Benchmark& benchmark) {
  std::string out;
  for (const QAInstance& inst : benchmark.instances) {
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["question"] = inst.question;
    j["context"] = inst.context;
    j["contextual_answer"] = inst.contextual_answer;
    j["parametric_answer"] = inst.parametric_answer;
    j["parametric_freq"] = inst.parametric_freq;
    j["faithful"] = inst.faithful;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_benchmark_jsonl(const std::string& path, const Benchmark& benchmark) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_benchmark_jsonl: cannot open " + path);
  const std::string body = benchmark_to_jsonl(benchmark);
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) throw std::runtime_error("write_benchmark_jsonl: write failed for " + path);
}

std::vector<QAInstance> read_benchmark_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_benchmark_jsonl: cannot open " + path);
  std::vector<QAInstance> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
    QAInstance inst;
    inst.id = j.at("id").get<int>();
    inst.question = j.at("question").get<std::string>();
    inst.context = j.at("context").get<std::string>();
    inst.contextual_answer = j.at("contextual_answer").get<std::string>();
    inst.parametric_answer = j.at("parametric_answer").get<std::string>();
    inst.parametric_freq = j.at("parametric_freq").get<int>();
    inst.faithful = j.at("faithful").get<int>();
    out.push_back(std::move(inst));
  }
  return out;
}

nlohmann::ordered_json benchmark_stats_json(const Benchmark& benchmark) {
  nlohmann::ordered_json j;
  j["seed"] = benchmark.seed;
  j["stage_counts"] = {{"facts", benchmark.counts.facts},
                       {"elicited", benchmark.counts.elicited},
                       {"retained", benchmark.counts.retained},
                       {"faithful", benchmark.counts.faithful},
                       {"unfaithful", benchmark.counts.unfaithful}};
  j["split"] = {{"train", benchmark.train_ids.size()}, {"eval", benchmark.eval_ids.size()}};
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (const auto& [freq, count] : benchmark.freq_histogram) {
    hist[std::to_string(freq)] = count;
  }
  j["freq_histogram"] = hist;
  return j;
}

}  // namespace pmlab
