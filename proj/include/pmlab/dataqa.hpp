#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmlab/model.hpp"

#include "json.hpp"

namespace pmlab {

struct Fact {
  std::string subject;
  std::string relation;
  std::string object;
};

struct QAInstance {
  int id = 0;
  std::string question;
  std::string context;
  std::string contextual_answer;  // y*
  std::string parametric_answer;  // r_hat
  int parametric_freq = 0;
  int faithful = 1;  // y_f
};

struct StageCounts {
  int facts = 0;
  int elicited = 0;
  int retained = 0;
  int faithful = 0;
  int unfaithful = 0;
};

struct Benchmark {
  std::vector<QAInstance> instances;  // retained only, ids sequential
  std::vector<int> train_ids;
  std::vector<int> eval_ids;
  std::uint64_t seed = 0;
  StageCounts counts;
  std::map<int, int> freq_histogram;  // parametric_freq -> instance count
};

// Synthetic facts over nonce entities and a closed relation set. Subjects,
// relations and objects are single vocabulary words; (subject, relation)
// pairs are unique.
std::vector<Fact> gen_factbase(int n_facts, int n_entities, std::uint64_t seed);

// The declarative surface forms plus the closed-book QA form. The prompt part
// determines the fact; loss is taken over the completion (object onward).
struct CorpusText {
  std::string prompt;
  std::string completion;
};
std::vector<CorpusText> build_corpus(const std::vector<Fact>& facts);

std::string question_for(const Fact& fact);
std::string context_for(const Fact& fact, const std::string& context_object);

// Vocabulary closed over the corpus and question forms.
Vocab build_vocab(const std::vector<Fact>& facts);
std::vector<SeqExample> encode_corpus(const Vocab& vocab, const std::vector<CorpusText>& corpus);

// lowercase, strip punctuation, drop articles {a, an, the}, collapse spaces
std::string normalize_answer(const std::string& s);

// Majority answer after normalization, or nullopt when the max frequency is
// below min_freq. Ties break toward the lexicographically smallest answer.
std::optional<std::pair<std::string, int>> majority_vote(const std::vector<std::string>& answers,
                                                         int min_freq);

struct ElicitParams {
  int n = 5;
  int min_freq = 3;
  double temperature = 0.8;
};

// n seeded closed-book samples for the query; returns the majority answer and
// its frequency, or nullopt when self-consistency filtering discards it.
std::optional<std::pair<std::string, int>> elicit(const ToyTransformer& model,
                                                  const std::string& question, int n,
                                                  double temperature, std::uint64_t seed,
                                                  int min_freq);

// Deterministic conflict oracle: faithful (1) iff the normalized answers are
// equal or one is a contiguous token subsequence of the other.
int detect_conflict(const std::string& r_hat, const std::string& y_star,
                    const std::string& context);

struct BenchmarkParams {
  double counterfactual_rate = 0.5;
  double train_fraction = 0.5;
  ElicitParams elicitation;
};

Benchmark build_benchmark(const ToyTransformer& model, const std::vector<Fact>& facts,
                          const BenchmarkParams& params, std::uint64_t seed);

// JSONL with exactly the keys id, question, context, contextual_answer,
// parametric_answer, parametric_freq, faithful, in that order; UTF-8, LF.
std::string benchmark_to_jsonl(const Benchmark& benchmark);
void write_benchmark_jsonl(const std::string& path, const Benchmark& benchmark);
std::vector<QAInstance> read_benchmark_jsonl(const std::string& path);

nlohmann::ordered_json benchmark_stats_json(const Benchmark& benchmark);

// Deterministic train/eval split over instance ids, derived from the
// benchmark seed; reproducible for consumers that only have the JSONL.
std::pair<std::vector<int>, std::vector<int>> split_instance_ids(int n_instances,
                                                                 double train_fraction,
                                                                 std::uint64_t seed);

}  // namespace pmlab
