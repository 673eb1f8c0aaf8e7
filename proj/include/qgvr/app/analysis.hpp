#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "qgvr/app/experiment.hpp"

namespace qgvr::app {

// Attention and gate dumps ------------------------------------------------

struct AttentionRow {
  std::string question_id;
  std::size_t token_index = 0;
  std::size_t frame_index = 0;
  double weight = 0.0;
};

struct GateRow {
  std::string question_id;
  std::size_t dim_index = 0;
  double gate_weight = 0.0;
};

struct QuestionDump {
  std::string question_id;
  std::vector<std::string> tokens;
  std::vector<std::vector<double>> attention;  // K x L
  std::vector<double> gate;                    // d_f
};

/// Runs the video module for each requested instance (all when `ids` is empty).
/// Throws data::DataError for an unknown question id.
std::vector<QuestionDump> dump_attention(const seq2seq::Model& model, const Dataset& data,
                                         const data::Vocabulary& vocab, const std::vector<std::string>& ids);

void write_attention_csv(const fs::path& path, const std::vector<QuestionDump>& dumps);
void write_gate_csv(const fs::path& path, const std::vector<QuestionDump>& dumps);
std::vector<AttentionRow> read_attention_csv(const fs::path& path);
std::vector<GateRow> read_gate_csv(const fs::path& path);

// Attention localisation ----------------------------------------------------

struct Localization {
  double mean_mass = 0.0;        // attention mass inside the focus range, averaged over tokens
  double argmax_in_focus = 0.0;  // share of tokens whose most attended frame lies in the focus range
  std::size_t tokens = 0;
};

enum class TokenFilter {
  content,  // neither punctuation nor a stop word
  words,    // any token but punctuation
};

/// Over the question tokens of instances with exactly one focus range.
Localization attention_localization(const seq2seq::Model& model, const Dataset& data, const data::Vocabulary& vocab,
                                    TokenFilter filter = TokenFilter::content);

// Ablations ------------------------------------------------------------------

struct Variant {
  std::string label;
  bool tok_summ = true;
  bool gating = true;
};

/// full, -TokSumm, -Gating, -TokSumm-Gating.
const std::vector<Variant>& ablation_variants();

struct AblationRow {
  Variant variant;
  metrics::MetricReport report;
  double exact_match = 0.0;
  std::size_t steps = 0;
};

std::string format_ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);

// Multi-run summaries -----------------------------------------------------------

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
};

MeanStd mean_std(const std::vector<double>& values);

/// BLEU-1..4, ROUGE-L, CIDEr.
inline constexpr std::array<const char*, 6> kScoreNames = {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"};
std::array<double, 6> scores_of(const metrics::MetricReport& report);

struct ReferenceScores {
  std::string name;
  std::array<double, 6> mean;
};

/// Published AVSD test-set scores of this architecture, for rough comparison.
const ReferenceScores& reference_scores(data::DialogueMode mode);

nlohmann::json summarize_runs(const std::vector<metrics::MetricReport>& reports, const ReferenceScores* compare,
                              double tolerance = 0.15);

// Benchmark ------------------------------------------------------------------

struct BenchmarkRow {
  std::size_t frames = 0;
  std::size_t tokens = 0;
  double summarize_ms = 0.0;  // per-token attention summary with gating
  double bilstm_ms = 0.0;     // bidirectional LSTM over the frames
  double ratio = 0.0;         // bilstm_ms / summarize_ms
};

struct BenchmarkOptions {
  std::vector<std::size_t> lengths = {32, 64, 128, 179, 256, 512};
  std::size_t tokens = 8;
  std::size_t feature_dim = 256;
  std::size_t baseline_hidden = 128;
  std::size_t trials = 100;
  std::uint64_t seed = 0;
};

/// Times both paths on random weights and inputs after checking their output shapes.
std::vector<BenchmarkRow> run_benchmark(const BenchmarkOptions& options);
void write_benchmark_csv(const fs::path& path, const std::vector<BenchmarkRow>& rows);
std::vector<BenchmarkRow> read_benchmark_csv(const fs::path& path);

}  // namespace qgvr::app
