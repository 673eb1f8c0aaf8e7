#pragma once

#include <vector>

#include "qgvr/seq2seq/model.hpp"

namespace qgvr::seq2seq {

struct DecodeResult {
  std::vector<int> tokens;  // emitted ids, without <sos> and <eos>
  bool finished = false;    // ended with <eos>
  double log_prob = 0.0;
  double score = 0.0;
  /// Question and dialogue attention weights per emitted step (greedy decoding only).
  std::vector<std::vector<double>> att_q;
  std::vector<std::vector<double>> att_d;
};

/// Ranking score of a hypothesis: log-probability, divided by the number of
/// emitted tokens (including <eos>) when `length_normalize` is set.
double hypothesis_score(double log_prob, std::size_t length, bool length_normalize);

/// log softmax of one row of logits.
std::vector<double> log_softmax(std::span<const double> logits);

/// Decoding works on encoder memories for a single example (batch of one).
DecodeResult decode_greedy(const Model& model, const EncoderMemory& memory, std::size_t max_len);

/// Keeps the `width` best partial hypotheses per step among all one-token
/// extensions. Extensions ending in <eos> are set aside as finished and never
/// extended. Returns the best finished hypothesis, or the best unfinished one
/// when none finished within max_len.
DecodeResult decode_beam(const Model& model, const EncoderMemory& memory, std::size_t width, std::size_t max_len);

/// Decodes every instance on its own (no padding), width 1 meaning greedy.
std::vector<DecodeResult> decode_instances(const Model& model, const std::vector<data::TrainingInstance>& instances,
                                           const data::FeatureStore& features, std::size_t width, std::size_t max_len);

}  // namespace qgvr::seq2seq
