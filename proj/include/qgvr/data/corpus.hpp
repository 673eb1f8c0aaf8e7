#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qgvr::data {

/// Malformed or missing input data. The CLI maps it to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Frame-level features of one video, row-major [length, dim].
struct FrameFeatures {
  std::size_t length = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  const float* row(std::size_t l) const { return values.data() + l * dim; }
};

/// Half-open frame range [first, second).
using FrameRange = std::pair<std::size_t, std::size_t>;

struct Turn {
  std::string question;
  std::string answer;
  /// Frames the question is about, when the corpus records it (synthetic data does).
  std::vector<FrameRange> focus;
};

struct DialogueExample {
  std::string video_id;
  std::vector<Turn> turns;
  std::string caption;
};

/// Features keyed by video id. Directory-backed stores read `<id>.json`
/// sidecars up front and the `<id>.bin` payloads on first access.
class FeatureStore {
 public:
  FeatureStore() = default;
  /// `expected_dim` of 0 accepts any width.
  FeatureStore(std::filesystem::path dir, std::size_t expected_dim);

  void add(const std::string& video_id, FrameFeatures features);
  bool contains(const std::string& video_id) const;
  /// Length from the sidecar, without loading the payload.
  std::size_t length(const std::string& video_id) const;
  std::size_t dim() const { return dim_; }
  const FrameFeatures& get(const std::string& video_id) const;
  /// Registers a video's sidecar; throws DataError naming the id if it is missing or inconsistent.
  void index(const std::string& video_id);
  std::vector<std::string> ids() const;

 private:
  struct Entry {
    std::size_t length = 0;
    mutable std::optional<FrameFeatures> data;
  };
  std::filesystem::path dir_;
  std::size_t dim_ = 0;
  std::map<std::string, Entry> entries_;
};

/// Writes `<dir>/<id>.bin` (little-endian float32) and its `<id>.json` sidecar.
void write_features(const std::filesystem::path& dir, const std::string& video_id, const FrameFeatures& features);
FrameFeatures read_features(const std::filesystem::path& dir, const std::string& video_id, std::size_t expected_dim = 0);

struct Corpus {
  std::vector<DialogueExample> dialogues;
  FeatureStore features;
};

/// Reads an AVSD-style dialogue file ({"dialogs": [{"image_id", "dialog": [{"question", "answer"}], ...}]})
/// and links every dialogue to its features in `features_dir`.
Corpus load_avsd(const std::filesystem::path& json_path, const std::filesystem::path& features_dir,
                 std::size_t expected_dim = 0);

/// Writes dialogues in the same schema (plus the optional "focus" frame ranges).
void save_avsd(const std::filesystem::path& json_path, const std::vector<DialogueExample>& dialogues);

/// Corpus totals used for ingestion sanity checks.
struct CorpusStats {
  std::size_t dialogues = 0;
  std::size_t turns = 0;
  double mean_question_tokens = 0.0;
  double mean_answer_tokens = 0.0;
  double mean_feature_length = 0.0;
};

CorpusStats corpus_stats(const Corpus& corpus);

}  // namespace qgvr::data
