#include "qgvr/data/corpus.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "qgvr/data/text.hpp"

namespace qgvr::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(sizeof(float) == 4);

float from_little_endian(const unsigned char* b) {
  std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                       static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  return std::bit_cast<float>(bits);
}

void to_little_endian(float v, unsigned char* b) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

struct Sidecar {
  std::size_t length;
  std::size_t dim;
};

Sidecar read_sidecar(const fs::path& dir, const std::string& video_id, std::size_t expected_dim) {
  const auto path = dir / (video_id + ".json");
  if (!fs::exists(path)) throw DataError("missing features for video '" + video_id + "' (no " + path.string() + ")");
  const json j = read_json_file(path);
  Sidecar s{};
  try {
    if (j.value("video_id", video_id) != video_id) {
      throw DataError("sidecar " + path.string() + " names a different video");
    }
    s.length = j.at("L").get<std::size_t>();
    s.dim = j.at("dim").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError("bad sidecar for video '" + video_id + "': " + e.what());
  }
  if (s.length == 0 || s.dim == 0) throw DataError("video '" + video_id + "' has empty features");
  if (expected_dim != 0 && s.dim != expected_dim) {
    throw DataError("video '" + video_id + "' has feature dim " + std::to_string(s.dim) + ", expected " +
                    std::to_string(expected_dim));
  }
  return s;
}

}  // namespace

void write_features(const fs::path& dir, const std::string& video_id, const FrameFeatures& features) {
  if (features.values.size() != features.length * features.dim) {
    throw std::invalid_argument("feature values do not match L x dim for " + video_id);
  }
  fs::create_directories(dir);
  std::vector<unsigned char> bytes(features.values.size() * 4);
  for (std::size_t i = 0; i < features.values.size(); ++i) to_little_endian(features.values[i], bytes.data() + 4 * i);
  {
    std::ofstream out(dir / (video_id + ".bin"), std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write features for " + video_id);
  }
  std::ofstream side(dir / (video_id + ".json"));
  side << json{{"video_id", video_id}, {"L", features.length}, {"dim", features.dim}}.dump() << '\n';
}

FrameFeatures read_features(const fs::path& dir, const std::string& video_id, std::size_t expected_dim) {
  const Sidecar s = read_sidecar(dir, video_id, expected_dim);
  const auto path = dir / (video_id + ".bin");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing feature payload for video '" + video_id + "' (" + path.string() + ")");
  const std::size_t count = s.length * s.dim;
  std::vector<unsigned char> bytes(count * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size() || in.peek() != std::char_traits<char>::eof()) {
    throw DataError("feature payload for video '" + video_id + "' does not hold " + std::to_string(s.length) + "x" +
                    std::to_string(s.dim) + " float32 values");
  }
  FrameFeatures f{s.length, s.dim, std::vector<float>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    f.values[i] = from_little_endian(bytes.data() + 4 * i);
    if (!std::isfinite(f.values[i])) throw DataError("non-finite feature value in video '" + video_id + "'");
  }
  return f;
}

FeatureStore::FeatureStore(fs::path dir, std::size_t expected_dim) : dir_(std::move(dir)), dim_(expected_dim) {}

void FeatureStore::add(const std::string& video_id, FrameFeatures features) {
  if (features.length == 0 || features.dim == 0 || features.values.size() != features.length * features.dim) {
    throw DataError("inconsistent features for video '" + video_id + "'");
  }
  if (dim_ == 0) dim_ = features.dim;
  if (features.dim != dim_) throw DataError("video '" + video_id + "' has feature dim " + std::to_string(features.dim));
  Entry e;
  e.length = features.length;
  e.data = std::move(features);
  entries_[video_id] = std::move(e);
}

void FeatureStore::index(const std::string& video_id) {
  if (entries_.count(video_id)) return;
  if (dir_.empty()) throw DataError("missing features for video '" + video_id + "'");
  const Sidecar s = read_sidecar(dir_, video_id, dim_);
  if (dim_ == 0) dim_ = s.dim;
  if (!fs::exists(dir_ / (video_id + ".bin"))) throw DataError("missing feature payload for video '" + video_id + "'");
  entries_[video_id].length = s.length;
}

bool FeatureStore::contains(const std::string& video_id) const { return entries_.count(video_id) != 0; }

std::size_t FeatureStore::length(const std::string& video_id) const {
  auto it = entries_.find(video_id);
  if (it == entries_.end()) throw DataError("missing features for video '" + video_id + "'");
  return it->second.length;
}

const FrameFeatures& FeatureStore::get(const std::string& video_id) const {
  auto it = entries_.find(video_id);
  if (it == entries_.end()) throw DataError("missing features for video '" + video_id + "'");
  if (!it->second.data) it->second.data = read_features(dir_, video_id, dim_);
  return *it->second.data;
}

std::vector<std::string> FeatureStore::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, e] : entries_) out.push_back(id);
  return out;
}

Corpus load_avsd(const fs::path& json_path, const fs::path& features_dir, std::size_t expected_dim) {
  const json doc = read_json_file(json_path);
  Corpus corpus;
  corpus.features = FeatureStore(features_dir, expected_dim);
  try {
    for (const auto& d : doc.at("dialogs")) {
      DialogueExample ex;
      const auto& id = d.at("image_id");
      ex.video_id = id.is_string() ? id.get<std::string>() : id.dump();
      ex.caption = d.value("caption", "");
      for (const auto& t : d.at("dialog")) {
        Turn turn;
        turn.question = t.at("question").get<std::string>();
        turn.answer = t.at("answer").get<std::string>();
        if (tokenize(turn.question).empty() || tokenize(turn.answer).empty()) {
          throw DataError("empty question or answer in dialogue for video '" + ex.video_id + "'");
        }
        if (t.contains("focus")) turn.focus = t.at("focus").get<std::vector<FrameRange>>();
        ex.turns.push_back(std::move(turn));
      }
      if (ex.turns.empty()) throw DataError("dialogue for video '" + ex.video_id + "' has no turns");
      corpus.features.index(ex.video_id);
      corpus.dialogues.push_back(std::move(ex));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed dialogue file " + json_path.string() + ": " + e.what());
  }
  return corpus;
}

void save_avsd(const fs::path& json_path, const std::vector<DialogueExample>& dialogues) {
  json list = json::array();
  for (const auto& ex : dialogues) {
    json turns = json::array();
    for (const auto& t : ex.turns) {
      json jt{{"question", t.question}, {"answer", t.answer}};
      if (!t.focus.empty()) jt["focus"] = t.focus;
      turns.push_back(std::move(jt));
    }
    json d{{"image_id", ex.video_id}, {"dialog", std::move(turns)}};
    if (!ex.caption.empty()) d["caption"] = ex.caption;
    list.push_back(std::move(d));
  }
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  std::ofstream out(json_path);
  if (!out) throw DataError("cannot write " + json_path.string());
  out << json{{"dialogs", std::move(list)}}.dump(1) << '\n';
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats s;
  s.dialogues = corpus.dialogues.size();
  double q = 0, a = 0, l = 0;
  for (const auto& d : corpus.dialogues) {
    for (const auto& t : d.turns) {
      q += static_cast<double>(tokenize(t.question).size());
      a += static_cast<double>(tokenize(t.answer).size());
    }
    s.turns += d.turns.size();
    l += static_cast<double>(corpus.features.length(d.video_id));
  }
  if (s.turns) {
    s.mean_question_tokens = q / static_cast<double>(s.turns);
    s.mean_answer_tokens = a / static_cast<double>(s.turns);
  }
  if (s.dialogues) s.mean_feature_length = l / static_cast<double>(s.dialogues);
  return s;
}

}  // namespace qgvr::data
