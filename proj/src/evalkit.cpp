#include "pmlab/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pmlab {

namespace {

bool contains_tokens(const std::vector<std::string>& haystack,
                     const std::vector<std::string>& needle) {
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

ConrMemr conr_memr_from_flags(int n, int conr_hits, int memr_hits) {
  ConrMemr m;
  m.conr = 100.0 * conr_hits / n;
  m.memr = 100.0 * memr_hits / n;
  if (m.conr + m.memr > 0.0) {
    m.mr = m.memr / (m.memr + m.conr);
    m.mr_defined = true;
  }
  return m;
}

}  // namespace

ConrMemr conr_memr(const std::vector<std::string>& responses,
                   const std::vector<QAInstance>& instances) {
  if (instances.empty()) throw std::invalid_argument("conr_memr: empty dataset");
  if (responses.size() != instances.size()) throw std::invalid_argument("conr_memr: length mismatch");
  int conr_hits = 0, memr_hits = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto resp = Vocab::split(normalize_answer(responses[i]));
    const auto ystar = Vocab::split(normalize_answer(instances[i].contextual_answer));
    const auto rhat = Vocab::split(normalize_answer(instances[i].parametric_answer));
    const bool has_ystar = contains_tokens(resp, ystar);
    const bool has_rhat = contains_tokens(resp, rhat);
    if (has_ystar) ++conr_hits;
    else if (has_rhat) ++memr_hits;
  }
  return conr_memr_from_flags(static_cast<int>(instances.size()), conr_hits, memr_hits);
}

double token_f1(const std::string& a, const std::string& b) {
  const auto ta = Vocab::split(normalize_answer(a));
  const auto tb = Vocab::split(normalize_answer(b));
  if (ta.empty() || tb.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : ta) ++counts[t];
  int overlap = 0;
  for (const auto& t : tb) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  // 2PR/(P+R) with P = overlap/|a|, R = overlap/|b| reduces to 2o/(|a|+|b|).
  return 2.0 * overlap / static_cast<double>(ta.size() + tb.size());
}

std::pair<double, double> ppl_pair(const ModelView& view, const QAInstance& instance) {
  const Vocab& vocab = view.model().vocab;
  if (vocab.empty()) throw std::invalid_argument("ppl_pair: model has no vocabulary");

  std::vector<int> target = vocab.encode(instance.contextual_answer);
  target.push_back(Vocab::kEosId);

  std::vector<int> with_ctx = {Vocab::kBosId};
  for (int t : vocab.encode(instance.context)) with_ctx.push_back(t);
  for (int t : vocab.encode(instance.question)) with_ctx.push_back(t);

  std::vector<int> without_ctx = {Vocab::kBosId};
  for (int t : vocab.encode(instance.question)) without_ctx.push_back(t);

  const double nll_ctx = view.sequence_nll(with_ctx, target);
  const double nll_noctx = view.sequence_nll(without_ctx, target);
  return {std::exp(nll_ctx), std::exp(nll_noctx)};
}

EvalReport evaluate(const ModelView& view, const std::vector<QAInstance>& subset,
                    const DecodeConfig& decode) {
  if (subset.empty()) throw std::invalid_argument("evaluate: empty subset");
  const Vocab& vocab = view.model().vocab;
  if (vocab.empty()) throw std::invalid_argument("evaluate: model has no vocabulary");

  EvalReport report;
  report.n_instances = static_cast<int>(subset.size());

  std::vector<std::string> responses;
  responses.reserve(subset.size());
  double sim_param = 0.0, sim_ctx = 0.0, ppl_ctx = 0.0, ppl_noctx = 0.0;
  for (const QAInstance& inst : subset) {
    std::vector<int> prompt = {Vocab::kBosId};
    for (int t : vocab.encode(inst.context)) prompt.push_back(t);
    for (int t : vocab.encode(inst.question)) prompt.push_back(t);
    std::vector<int> continuation =
        view.sample(prompt, decode.max_new, decode.temperature, /*seed=*/0);
    std::string response = vocab.decode(continuation);
    sim_param += token_f1(response, inst.parametric_answer);
    sim_ctx += token_f1(response, inst.contextual_answer);
    auto [pc, pn] = ppl_pair(view, inst);
    ppl_ctx += pc;
    ppl_noctx += pn;
    responses.push_back(std::move(response));
  }

  report.metrics = conr_memr(responses, subset);
  report.sim_to_parametric = sim_param / subset.size();
  report.sim_to_contextual = sim_ctx / subset.size();
  report.ppl_with_context = ppl_ctx / subset.size();
  report.ppl_without_context = ppl_noctx / subset.size();

  // Per-frequency buckets (self-consistency strata).
  std::map<int, std::vector<std::size_t>> bucket_ids;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    bucket_ids[subset[i].parametric_freq].push_back(i);
  }
  for (const auto& [freq, ids] : bucket_ids) {
    std::vector<std::string> bucket_responses;
    std::vector<QAInstance> bucket_instances;
    for (std::size_t i : ids) {
      bucket_responses.push_back(responses[i]);
      bucket_instances.push_back(subset[i]);
    }
    BucketStats b;
    b.freq = freq;
    b.count = static_cast<int>(ids.size());
    b.metrics = conr_memr(bucket_responses, bucket_instances);
    report.buckets.push_back(std::move(b));
  }
  return report;
}

}  // namespace pmlab
