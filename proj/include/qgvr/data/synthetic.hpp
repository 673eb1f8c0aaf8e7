#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qgvr/data/corpus.hpp"

namespace qgvr::data {

/// Planted-pattern corpus: every video is split into equal segments, each
/// segment shows one of `patterns` activities, and questions ask what happens
/// in a given segment. Frame f of segment j is marker_j + pattern_{perm(j)} + noise,
/// where the noise has zero mean over each video's frames, so every video has
/// the same frame mean and only the queried segment determines the answer.
struct SyntheticSpec {
  std::size_t num_videos = 64;
  std::size_t frames = 40;
  std::size_t segments = 8;
  std::size_t patterns = 8;
  std::size_t feature_dim = 64;
  std::size_t turns = 1;
  /// Share of questions asking about two segments at once.
  double two_segment_fraction = 0.0;
  double marker_scale = 1.0;
  double pattern_scale = 1.0;
  double noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticCorpus {
  SyntheticSpec spec;
  std::vector<DialogueExample> dialogues;
  std::map<std::string, FrameFeatures> features;
  /// Pattern index planted in each segment, per video id.
  std::map<std::string, std::vector<std::size_t>> layout;

  FeatureStore store() const;
};

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

/// Writes `<dir>/dialogs.json` and `<dir>/features/`, readable with load_avsd.
void save_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

/// Segment number words used in the questions ("one", "two", ...).
const std::string& segment_word(std::size_t segment);

}  // namespace qgvr::data
