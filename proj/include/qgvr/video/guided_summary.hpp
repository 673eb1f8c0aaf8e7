#pragma once

#include <cstdint>
#include <span>

#include "qgvr/ad/ops.hpp"

namespace qgvr::video {

/// Width of the pre-extracted I3D-RGB frame features.
inline constexpr std::size_t kRawFeatureDim = 2048;
/// Width the frames are projected to; also the token representation width.
inline constexpr std::size_t kFeatureDim = 256;

enum class Similarity { trilinear, dot };

struct QgvrConfig {
  bool tok_summ = true;  // false: one sentence-level summary shared by every token
  bool gating = true;    // false: gate is exactly ones
  Similarity similarity = Similarity::trilinear;
};

struct QgvrWeights {
  ad::Tensor w_proj;  // [raw, d_f], no bias
  ad::LstmWeights guide_forward;
  ad::LstmWeights guide_backward;
  ad::Tensor w_sim;  // [3 d_f]
  ad::Tensor w_g1;   // [gate_hidden, d_f]
  ad::Tensor b_g1;   // [d_f]
  ad::Tensor w_g2;   // [d_f, gate_hidden]
  ad::Tensor b_g2;   // [gate_hidden]
};

struct GuideEncoding {
  ad::Tensor tokens;    // x_tok, [B, K, d_f]
  ad::Tensor sentence;  // x_sen, [B, d_f]
};

struct TokenSummary {
  ad::Tensor attention;  // [B, K, L], rows are distributions over frames
  ad::Tensor summaries;  // [B, K, d_f]
};

/// Per-question-token video representation together with the intermediate
/// quantities that are worth inspecting (attention maps, gate).
struct GuidedVideoSummary {
  ad::Tensor projected;  // r, [B, L, d_f]
  GuideEncoding guide;
  ad::Tensor attention;  // [B, K, L]
  ad::Tensor summaries;  // v, [B, K, d_f]
  ad::Tensor gate;       // g, [B, d_f]
  ad::Tensor gated;      // v^g, [B, K, d_f]
};

/// r = raw * W_proj. Accepts [L, raw] or [B, L, raw].
ad::Tensor project_frames(const ad::Tensor& raw, const ad::Tensor& w_proj);

/// Bidirectional guide encoder over embedded question tokens [B, K, E].
GuideEncoding encode_guide(const ad::Tensor& question, std::span<const std::size_t> lengths,
                           const ad::LstmWeights& forward, const ad::LstmWeights& backward,
                           const ad::DropoutContext& dropout = {});

/// s[k, l] = W_sim . [x_k ; r_l ; x_k * r_l]. Inputs are [K, D] and [L, D], or
/// batched [B, K, D] and [B, L, D]; W_sim is [3D]. No bias.
ad::Tensor trilinear_scores(const ad::Tensor& x_tok, const ad::Tensor& frames, const ad::Tensor& w_sim);

/// s[k, l] = x_k . r_l, kept for comparison against the trilinear form.
ad::Tensor dot_scores(const ad::Tensor& x_tok, const ad::Tensor& frames);

/// Row-wise softmax over frames followed by the attention-weighted sum of the
/// frame features. `frame_mask` ([B, L], optional) marks valid frames;
/// masked frames get weight exactly 0.
TokenSummary summarize_per_token(const ad::Tensor& scores, const ad::Tensor& frames,
                                 std::span<const std::uint8_t> frame_mask = {});

/// g = sigmoid(W_g1 relu(W_g2 x_sen + b_g2) + b_g1). x_sen is [D] or [B, D].
ad::Tensor compute_gate(const ad::Tensor& x_sen, const ad::Tensor& w_g1, const ad::Tensor& b_g1,
                        const ad::Tensor& w_g2, const ad::Tensor& b_g2);

/// v^g_k = v_k * g for every token k. summaries [K, D] with g [D], or [B, K, D] with [B, D].
ad::Tensor apply_gate(const ad::Tensor& summaries, const ad::Tensor& gate);

/// Ablation without per-token summaries: x_sen queries the frames once and
/// the single summary is repeated for each of the `tokens` positions.
TokenSummary summarize_sentence_level(const ad::Tensor& x_sen, const ad::Tensor& frames, const ad::Tensor& w_sim,
                                      std::size_t tokens, std::span<const std::uint8_t> frame_mask = {},
                                      Similarity similarity = Similarity::trilinear);

/// Full question-guided video representation for a padded batch.
/// question: [B, K, E] embeddings; raw_frames: [B, L, raw]; frame_mask: [B, L] (empty means all valid).
GuidedVideoSummary run_qgvr(const ad::Tensor& question, std::span<const std::size_t> question_lengths,
                            const ad::Tensor& raw_frames, std::span<const std::uint8_t> frame_mask,
                            const QgvrWeights& weights, const QgvrConfig& config,
                            const ad::DropoutContext& dropout = {});

}  // namespace qgvr::video
