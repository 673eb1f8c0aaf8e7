#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace qgvr::metrics {

using Tokens = std::vector<std::string>;

struct EvalPair {
  Tokens hypothesis;
  std::vector<Tokens> references;  // at least one
};

using EvalCorpus = std::vector<EvalPair>;

/// Corpus BLEU-n (clipped n-gram precision, uniform weights over orders 1..n,
/// brevity penalty against the closest reference length), times 100.
double bleu(const EvalCorpus& corpus, int n);

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure per pair (best precision and recall over references),
/// averaged over the corpus, times 100.
double rouge_l(const EvalCorpus& corpus, double beta = kRougeBeta);

struct CiderOptions {
  /// Gaussian length penalty width; 0 disables it (plain CIDEr). 6 with
  /// clip_counts gives the CIDEr-D variant.
  double sigma = 0.0;
  bool clip_counts = false;
};

/// Per-pair CIDEr: TF-IDF n-gram cosine for n = 1..4 (document frequencies
/// over the references of the whole corpus), averaged over orders and
/// references, times 10.
std::vector<double> cider_per_pair(const EvalCorpus& corpus, const CiderOptions& options = {});
/// Mean of cider_per_pair. Needs at least two pairs.
double cider(const EvalCorpus& corpus, const CiderOptions& options = {});

enum class Tokenization {
  internal,   // the data module's tokenizer (lowercase, punctuation split)
  whitespace  // plain whitespace split, for comparing against external toolkits
};

Tokens tokenize_for_metrics(const std::string& line, Tokenization mode);

struct MetricReport {
  double bleu[4] = {0, 0, 0, 0};
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t pairs = 0;
  std::size_t hypothesis_tokens = 0;
  double rouge_beta = kRougeBeta;
  CiderOptions cider_options;
  Tokenization tokenization = Tokenization::internal;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

MetricReport evaluate(const EvalCorpus& corpus, const CiderOptions& cider_options = {});

/// Aligned plain-text files, one sentence per line. A reference line may hold
/// several references separated by " ||| ".
EvalCorpus read_corpus(const std::filesystem::path& hypotheses, const std::filesystem::path& references,
                       Tokenization mode = Tokenization::internal);

MetricReport evaluate_files(const std::filesystem::path& hypotheses, const std::filesystem::path& references,
                            Tokenization mode = Tokenization::internal, const CiderOptions& cider_options = {});

}  // namespace qgvr::metrics
