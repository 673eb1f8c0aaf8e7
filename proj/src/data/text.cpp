#include "qgvr/data/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace qgvr::data {

namespace {

constexpr std::string_view kPunctuation = ".,?!'\"";
// English stop words (the NLTK list; contractions appear as their split pieces).
const std::set<std::string, std::less<>> kStopWords = {
    "a", "about", "above", "after", "again", "against", "ain", "all", "am", "an", "and", "any", "are", "aren",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "couldn", "d", "did", "didn", "do", "does", "doesn", "doing", "don", "down", "during", "each", "few",
    "for", "from", "further", "had", "hadn", "has", "hasn", "have", "haven", "having", "he", "her", "here",
    "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "isn", "it", "its",
    "itself", "just", "ll", "m", "ma", "me", "mightn", "more", "most", "mustn", "my", "myself", "needn", "no",
    "nor", "not", "now", "o", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves",
    "out", "over", "own", "re", "s", "same", "shan", "she", "should", "shouldn", "so", "some", "such", "t",
    "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "to", "too", "under", "until", "up", "ve", "very", "was", "wasn", "we", "were",
    "weren", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with", "won", "wouldn",
    "y", "you", "your", "yours", "yourself", "yourselves"};

const std::vector<std::string> kReserved = {"<pad>", "<unk>", "<sos>", "<eos>", "<sep>", "<empty>"};

}  // namespace

bool is_punctuation(std::string_view token) {
  return token.size() == 1 && kPunctuation.find(token[0]) != std::string_view::npos;
}

bool is_stopword(std::string_view token) { return kStopWords.find(token) != kStopWords.end(); }

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      flush();
    } else if (kPunctuation.find(raw) != std::string_view::npos) {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return out;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s.push_back(' ');
    s += t;
  }
  return s;
}

Vocabulary::Vocabulary() : tokens_(kReserved) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_count) {
  if (sentences.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& s : sentences) {
    for (const auto& t : s) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [token, n] : counts) {
    if (n >= min_count && std::find(kReserved.begin(), kReserved.end(), token) == kReserved.end()) {
      kept.emplace_back(token, n);
    }
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary v;
  v.min_count_ = min_count;
  for (auto& [token, n] : kept) {
    v.ids_[token] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(token);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kSosId) continue;
    out.push_back(token(id));
  }
  return out;
}

std::string Vocabulary::to_text(const std::vector<int>& ids) const { return join(decode(ids)); }

nlohmann::json Vocabulary::to_json() const { return {{"min_count", min_count_}, {"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    throw std::invalid_argument("vocabulary does not start with the reserved tokens");
  }
  v.tokens_ = std::move(tokens);
  v.ids_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  v.min_count_ = j.value("min_count", std::size_t{2});
  return v;
}

}  // namespace qgvr::data
