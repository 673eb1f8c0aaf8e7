#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qgvr/ad/ops.hpp"
#include "qgvr/ad/parameters.hpp"
#include "qgvr/data/batching.hpp"
#include "qgvr/video/guided_summary.hpp"

namespace qgvr::seq2seq {

using data::DialogueMode;

struct ModelConfig {
  DialogueMode mode = DialogueMode::multi_turn;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 256;
  std::size_t feature_dim = video::kFeatureDim;
  std::size_t raw_feature_dim = video::kRawFeatureDim;
  std::size_t guide_hidden = 128;     // per direction; 2x must equal feature_dim
  std::size_t question_hidden = 128;  // per direction
  std::size_t dialogue_hidden = 128;  // per direction
  std::size_t decoder_hidden = 256;   // must equal 2 * question_hidden (h_0 = q_sen)
  std::size_t attention_dim = 256;
  std::size_t gate_hidden = 256;
  double dropout = 0.2;
  std::size_t beam_width = 3;
  std::size_t max_decode_len = 20;
  bool tie_embeddings = true;
  bool length_normalize = true;
  double init_bound = 0.08;
  double forget_bias = 1.0;
  video::QgvrConfig qgvr;

  /// Throws std::invalid_argument naming the first inconsistent field.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Encoder outputs for a batch, plus cached attention keys.
struct EncoderMemory {
  video::GuidedVideoSummary video;
  ad::Tensor q_tok;  // [B, K, 2H_q]
  ad::Tensor q_sen;  // [B, 2H_q]
  ad::Tensor d_tok;  // [B, M, 2H_d]; undefined in single-turn mode
  std::vector<std::uint8_t> q_mask;
  std::vector<std::uint8_t> d_mask;
  ad::Tensor q_keys;   // q_tok projected by the memory rows of the attention matrix
  ad::Tensor q_query;  // rows of the attention matrix applied to the decoder state
  ad::Tensor d_keys;
  ad::Tensor d_query;
  ad::Tensor output_weight;  // [H_out, V]
  std::size_t batch = 0;
};

struct DecoderStep {
  ad::Tensor logits;  // [B, V]
  ad::LstmState state;
  ad::Tensor att_q;  // [B, K]
  ad::Tensor att_d;  // [B, M], undefined in single-turn mode
};

struct AttentionResult {
  ad::Tensor weights;  // [B, T]
  ad::Tensor context;  // [B, D]
};

/// Additive attention: e_t = v . tanh(W [h ; m_t]), softmax over t, context = sum_t a_t m_t.
/// h is [B, H], memory [B, T, D], w [(H + D), A], v [A]. `mask` ([B, T]) marks valid rows.
AttentionResult bahdanau_attend(const ad::Tensor& h, const ad::Tensor& memory, const ad::Tensor& w,
                                const ad::Tensor& v, std::span<const std::uint8_t> mask = {});

/// Same computation with the memory projection precomputed: keys = memory * w[H:, :], w_h = w[:H, :].
AttentionResult bahdanau_attend_keys(const ad::Tensor& h, const ad::Tensor& memory, const ad::Tensor& keys,
                                     const ad::Tensor& w_h, const ad::Tensor& v, std::span<const std::uint8_t> mask);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ad::ModelParameters& parameters() { return params_; }
  const ad::ModelParameters& parameters() const { return params_; }
  const ad::Tensor& param(const std::string& name) const { return params_.tensor(name); }

  /// Merges the question, dialogue and decoder embeddings and the output
  /// projection into one shared [V, E] matrix (taking the question
  /// embedding's values). A bridge H_dec -> E is added when the widths differ.
  void tie_embeddings();
  bool tied() const { return config_.tie_embeddings; }

  video::QgvrWeights qgvr_weights() const;

  /// Video-augmented question encoder: BiLSTM over question embeddings
  /// concatenated with their gated video summaries.
  ad::BiLstmOutput encode_question(const ad::Tensor& question_embeds, const ad::Tensor& gated,
                                   std::span<const std::size_t> lengths, const ad::DropoutContext& dropout = {}) const;
  ad::BiLstmOutput encode_dialogue(const ad::Tensor& context_embeds, std::span<const std::size_t> lengths,
                                   const ad::DropoutContext& dropout = {}) const;

  EncoderMemory encode(const data::Batch& batch, const ad::DropoutContext& dropout = {}) const;
  ad::LstmState initial_state(const EncoderMemory& memory) const;
  ad::Tensor embed_decoder(std::span<const int> ids) const;  // [n, E]
  DecoderStep decoder_step(const EncoderMemory& memory, const ad::LstmState& state, const ad::Tensor& y_prev_embed,
                           const ad::DropoutContext& dropout = {}) const;

  /// Teacher-forced logits for every answer position, [B, N - 1, V].
  ad::Tensor forward(const data::Batch& batch, const ad::DropoutContext& dropout = {}) const;
  /// Mean cross-entropy over non-pad answer positions.
  ad::Tensor loss(const data::Batch& batch, const ad::DropoutContext& dropout = {}) const;

 private:
  void build(std::mt19937_64& rng);
  ad::LstmWeights lstm(const std::string& prefix) const;
  const ad::Tensor& question_table() const;
  const ad::Tensor& dialogue_table() const;
  const ad::Tensor& decoder_table() const;

  ModelConfig config_;
  ad::ModelParameters params_;
};

}  // namespace qgvr::seq2seq
