#include "pmlab/vocab.hpp"

#include <set>
#include <sstream>
#include <stdexcept>

namespace pmlab {

std::vector<std::string> Vocab::split(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (auto& w : split(t)) words.insert(std::move(w));
  }
  words.erase(kBosToken);
  words.erase(kEosToken);
  Vocab v;
  v.tokens_.push_back(kBosToken);
  v.tokens_.push_back(kEosToken);
  for (const auto& w : words) v.tokens_.push_back(w);
  for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i) v.ids_[v.tokens_[i]] = i;
  return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != kBosToken || tokens[1] != kEosToken) {
    throw std::invalid_argument("Vocab::from_tokens: list must start with the BOS/EOS markers");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i) {
    if (!v.ids_.emplace(v.tokens_[static_cast<std::size_t>(i)], i).second) {
      throw std::invalid_argument("Vocab::from_tokens: duplicate token");
    }
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw std::invalid_argument("Vocab: unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocab: token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  for (const auto& w : split(text)) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kBosId || id == kEosId) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

}  // namespace pmlab
