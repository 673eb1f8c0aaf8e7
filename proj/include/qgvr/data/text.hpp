#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qgvr::data {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kSosId = 2;
inline constexpr int kEosId = 3;
/// Separator between utterances in a flattened dialogue context.
inline constexpr int kSepId = 4;
/// Stands in for the (empty) context of a dialogue's first turn.
inline constexpr int kEmptyContextId = 5;
inline constexpr int kReservedCount = 6;

/// Lowercases, splits on whitespace and splits . , ? ! ' " into their own tokens.
std::vector<std::string> tokenize(std::string_view text);

bool is_punctuation(std::string_view token);
/// Common English function words ("the", "what", "does", ...).
bool is_stopword(std::string_view token);

class Vocabulary {
 public:
  /// Only the reserved tokens.
  Vocabulary();

  /// Tokens seen at least `min_count` times get ids, ordered by descending
  /// frequency and then lexicographically. Throws on an empty corpus.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_count = 2);

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  int id(const std::string& token) const;  // kUnkId when absent
  const std::string& token(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  /// Maps ids back to tokens, skipping PAD and SOS and stopping at EOS.
  std::vector<std::string> decode(const std::vector<int>& ids) const;
  std::string to_text(const std::vector<int>& ids) const;

  std::size_t min_count() const { return min_count_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
  std::size_t min_count_ = 2;
};

std::string join(const std::vector<std::string>& tokens);

}  // namespace qgvr::data
