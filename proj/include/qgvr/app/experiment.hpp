#pragma once

// End-to-end pipeline pieces shared by the command-line tool and the
// acceptance checks: run configuration, data loading, training with
// validation, decoding and scoring, checkpoints.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qgvr/data/batching.hpp"
#include "qgvr/metrics/metrics.hpp"
#include "qgvr/seq2seq/decoding.hpp"
#include "qgvr/seq2seq/training.hpp"

namespace qgvr::app {

namespace fs = std::filesystem;

/// Environment variable that overrides the configured data root.
inline constexpr const char* kDataRootEnv = "QGVR_DATA_ROOT";

/// Thrown for invalid configurations and flag combinations (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  fs::path root = "data";
  std::string train = "train.json";
  std::string val = "val.json";
  std::string test = "test.json";
  std::string features = "features";
  std::size_t min_count = 2;
  bool prepend_caption = false;

  fs::path resolve(const std::string& file) const { return root / file; }
};

struct RunConfig {
  DataConfig data;
  seq2seq::ModelConfig model;  // vocab_size is filled in from the vocabulary
  seq2seq::TrainOptions train;
  double learning_rate = 2e-4;
  /// Validation instances decoded for BLEU-4 during training (0: all).
  std::size_t val_limit = 0;

  nlohmann::json to_json() const;
  /// Missing keys keep the values in `base`; unknown keys throw UsageError.
  static RunConfig from_json(const nlohmann::json& j, RunConfig base);
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;
};

RunConfig load_run_config(const fs::path& path, RunConfig base = {});

/// One split, encoded against a fixed vocabulary.
struct Dataset {
  std::vector<data::DialogueExample> dialogues;
  std::vector<data::TrainingInstance> instances;
  data::FeatureStore features;
};

data::Vocabulary build_vocabulary(const std::vector<data::DialogueExample>& train, const DataConfig& config);
Dataset load_split(const DataConfig& config, const std::string& file, const data::Vocabulary& vocab,
                   const seq2seq::ModelConfig& model);
/// Same, from dialogues and features already in memory.
Dataset make_dataset(std::vector<data::DialogueExample> dialogues, data::FeatureStore features,
                     const data::Vocabulary& vocab, const DataConfig& config, const seq2seq::ModelConfig& model);

struct Evaluation {
  metrics::MetricReport report;
  std::vector<seq2seq::DecodeResult> decoded;
  std::vector<std::string> hypotheses;
  std::vector<std::string> references;
  double exact_match = 0.0;  // share of answers reproduced token for token
};

/// Decodes every instance (beam width from the model config; 1 = greedy) and scores it.
Evaluation evaluate_model(const seq2seq::Model& model, const Dataset& data, const data::Vocabulary& vocab,
                          std::optional<std::size_t> beam_width = std::nullopt, std::size_t limit = 0);

struct TeacherForcedStats {
  double loss = 0.0;
  double token_accuracy = 0.0;  // argmax of every teacher-forced step against the gold token
};

TeacherForcedStats teacher_forced_stats(const seq2seq::Model& model, const Dataset& data, std::size_t batch_size = 32);

struct TrainingRun {
  seq2seq::Model model;
  ad::AdamState adam;
  seq2seq::TrainResult result;
};

struct TrainCallbacks {
  std::function<void(const seq2seq::LogEntry&)> log;
  /// Receives the model whenever validation BLEU-4 improves.
  std::function<void(const seq2seq::Model&, const ad::AdamState&, std::size_t)> on_best;
};

/// Trains from scratch with config.train.seed. Validation (if `val` is given)
/// decodes greedily and drives early stopping; the returned model is the
/// best validated one when validation ran, otherwise the last one.
TrainingRun train_model(const RunConfig& config, const data::Vocabulary& vocab, const Dataset& train,
                        const Dataset* val, const TrainCallbacks& callbacks = {});

/// Checkpoint with the run configuration and vocabulary as metadata.
void save_model(const fs::path& path, const seq2seq::Model& model, const data::Vocabulary& vocab,
                const RunConfig& config, const ad::AdamState* adam = nullptr);

struct LoadedModel {
  seq2seq::Model model;
  data::Vocabulary vocab;
  RunConfig config;
};

LoadedModel load_model(const fs::path& path);

/// Writes `config.json` (the fully resolved configuration) into `dir`.
void echo_config(const fs::path& dir, const nlohmann::json& resolved);

}  // namespace qgvr::app
