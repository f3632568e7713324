#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

namespace pmlab {

// Whitespace word-level vocabulary over a closed token set. Ids 0 and 1 are
// reserved for the begin/end-of-sequence markers; remaining tokens are
// assigned in sorted order so construction is deterministic.
class Vocab {
 public:
  static constexpr int kBosId = 0;
  static constexpr int kEosId = 1;
  static constexpr const char* kBosToken = "<s>";
  static constexpr const char* kEosToken = "</s>";

  Vocab() = default;

  static Vocab build(const std::vector<std::string>& texts);

  // Rebuild from an explicit token list (e.g. a checkpoint manifest). The
  // list must start with the BOS/EOS markers and contain no duplicates.
  static Vocab from_tokens(std::vector<std::string> tokens);

  static std::vector<std::string> split(const std::string& text);

  int size() const { return static_cast<int>(tokens_.size()); }
  bool empty() const { return tokens_.empty(); }

  int id(const std::string& token) const;  // throws on unknown token
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(int id) const;

  // Encode a whitespace-separated string; no BOS/EOS are added.
  std::vector<int> encode(const std::string& text) const;
  // Join tokens with single spaces, skipping BOS/EOS markers.
  std::string decode(std::span<const int> ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

}  // namespace pmlab
