#include "qgvr/video/guided_summary.hpp"

#include <Eigen/Core>

namespace qgvr::video {

using ad::Shape;
using ad::ShapeError;
using ad::Tensor;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using VecC = Eigen::Map<const Eigen::VectorXd>;
using Vec = Eigen::Map<Eigen::VectorXd>;

Tensor batched(const Tensor& t) {
  if (t.rank() == 3) return t;
  if (t.rank() == 2) return ad::reshape(t, {1, t.dim(0), t.dim(1)});
  throw ShapeError("expected a [N, D] or [B, N, D] tensor, got " + ad::shape_str(t.shape()));
}

Tensor unbatched_like(const Tensor& result, const Tensor& reference) {
  if (reference.rank() == 3) return result;
  Shape s(result.shape().begin() + 1, result.shape().end());
  return ad::reshape(result, std::move(s));
}

std::vector<std::uint8_t> expand_mask(std::span<const std::uint8_t> frame_mask, std::size_t batch,
                                      std::size_t tokens, std::size_t frames) {
  if (frame_mask.empty()) return std::vector<std::uint8_t>(batch * tokens * frames, 1);
  if (frame_mask.size() != batch * frames) throw ShapeError("frame mask does not match [B, L]");
  std::vector<std::uint8_t> out(batch * tokens * frames);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < tokens; ++k) {
      std::copy_n(frame_mask.data() + b * frames, frames, out.data() + (b * tokens + k) * frames);
    }
  }
  return out;
}

// Fused trilinear kernel on batched operands.
Tensor trilinear_batched(const Tensor& x, const Tensor& r, const Tensor& w) {
  const std::size_t batch = x.dim(0), tokens = x.dim(1), width = x.dim(2), frames = r.dim(1);
  if (r.dim(0) != batch || r.dim(2) != width) {
    throw ShapeError("trilinear_scores: token rows " + ad::shape_str(x.shape()) + " vs frames " +
                     ad::shape_str(r.shape()));
  }
  if (w.rank() != 1 || w.dim(0) != 3 * width) {
    throw ShapeError("trilinear_scores: W_sim must be [" + std::to_string(3 * width) + "], got " +
                     ad::shape_str(w.shape()));
  }
  const double* wv = w.values().data();
  VecC w1(wv, width), w2(wv + width, width), w3(wv + 2 * width, width);
  std::vector<double> out(batch * tokens * frames);
  for (std::size_t b = 0; b < batch; ++b) {
    MapC xb(x.values().data() + b * tokens * width, tokens, width);
    MapC rb(r.values().data() + b * frames * width, frames, width);
    Map s(out.data() + b * tokens * frames, tokens, frames);
    const Eigen::VectorXd token_term = xb * w1;
    const Eigen::VectorXd frame_term = rb * w2;
    s.noalias() = (xb * w3.asDiagonal()) * rb.transpose();
    s.colwise() += token_term;
    s.rowwise() += frame_term.transpose();
  }
  return ad::make_op("trilinear", {batch, tokens, frames}, std::move(out), {x, r, w},
                     [batch, tokens, width, frames](ad::detail::Node& self) {
                       const double* xv = self.parents[0]->value.data();
                       const double* rv = self.parents[1]->value.data();
                       const double* wv = self.parents[2]->value.data();
                       VecC w1(wv, width), w2(wv + width, width), w3(wv + 2 * width, width);
                       auto gx = self.parent_grad(0);
                       auto gr = self.parent_grad(1);
                       auto gw = self.parent_grad(2);
                       for (std::size_t b = 0; b < batch; ++b) {
                         MapC g(self.grad.data() + b * tokens * frames, tokens, frames);
                         MapC xb(xv + b * tokens * width, tokens, width);
                         MapC rb(rv + b * frames * width, frames, width);
                         const Eigen::VectorXd row_sum = g.rowwise().sum();
                         const Eigen::VectorXd col_sum = g.colwise().sum().transpose();
                         const RowMat g_r = g * rb;               // [K, D]
                         if (!gx.empty()) {
                           Map dx(gx.data() + b * tokens * width, tokens, width);
                           dx.noalias() += row_sum * w1.transpose();
                           dx.noalias() += g_r * w3.asDiagonal();
                         }
                         if (!gr.empty()) {
                           Map dr(gr.data() + b * frames * width, frames, width);
                           dr.noalias() += col_sum * w2.transpose();
                           dr.noalias() += (g.transpose() * xb) * w3.asDiagonal();
                         }
                         if (!gw.empty()) {
                           Vec(gw.data(), width).noalias() += xb.transpose() * row_sum;
                           Vec(gw.data() + width, width).noalias() += rb.transpose() * col_sum;
                           Vec(gw.data() + 2 * width, width).noalias() +=
                               xb.cwiseProduct(g_r).colwise().sum().transpose();
                         }
                       }
                     });
}

}  // namespace

Tensor project_frames(const Tensor& raw, const Tensor& w_proj) {
  if (raw.rank() < 2 || raw.shape().back() != w_proj.dim(0)) {
    throw ShapeError("project_frames: frames " + ad::shape_str(raw.shape()) + " do not match projection " +
                     ad::shape_str(w_proj.shape()));
  }
  return ad::matmul(raw, w_proj);
}

GuideEncoding encode_guide(const Tensor& question, std::span<const std::size_t> lengths,
                           const ad::LstmWeights& forward, const ad::LstmWeights& backward,
                           const ad::DropoutContext& dropout) {
  if (question.rank() != 3 || question.dim(1) == 0) throw ShapeError("encode_guide: question must be [B, K, E]");
  auto out = ad::bilstm(question, lengths, forward, backward, dropout);
  return {out.tokens, out.sentence};
}

Tensor trilinear_scores(const Tensor& x_tok, const Tensor& frames, const Tensor& w_sim) {
  if (x_tok.rank() != frames.rank()) throw ShapeError("trilinear_scores: rank mismatch between tokens and frames");
  return unbatched_like(trilinear_batched(batched(x_tok), batched(frames), w_sim), x_tok);
}

Tensor dot_scores(const Tensor& x_tok, const Tensor& frames) {
  if (x_tok.rank() != frames.rank()) throw ShapeError("dot_scores: rank mismatch between tokens and frames");
  return unbatched_like(ad::bmm(batched(x_tok), batched(frames), true), x_tok);
}

TokenSummary summarize_per_token(const Tensor& scores, const Tensor& frames, std::span<const std::uint8_t> frame_mask) {
  if (scores.rank() != frames.rank()) throw ShapeError("summarize_per_token: rank mismatch");
  Tensor s = batched(scores);
  Tensor r = batched(frames);
  if (s.dim(0) != r.dim(0) || s.dim(2) != r.dim(1)) {
    throw ShapeError("summarize_per_token: scores " + ad::shape_str(scores.shape()) + " vs frames " +
                     ad::shape_str(frames.shape()));
  }
  Tensor attention = frame_mask.empty() ? ad::softmax(s)
                                        : ad::masked_softmax(s, expand_mask(frame_mask, s.dim(0), s.dim(1), s.dim(2)));
  Tensor summaries = ad::bmm(attention, r);
  return {unbatched_like(attention, scores), unbatched_like(summaries, scores)};
}

Tensor compute_gate(const Tensor& x_sen, const Tensor& w_g1, const Tensor& b_g1, const Tensor& w_g2,
                    const Tensor& b_g2) {
  if (x_sen.shape().back() != w_g2.dim(0) || w_g2.dim(1) != w_g1.dim(0)) {
    throw ShapeError("compute_gate: x_sen " + ad::shape_str(x_sen.shape()) + " incompatible with W_g2 " +
                     ad::shape_str(w_g2.shape()) + " / W_g1 " + ad::shape_str(w_g1.shape()));
  }
  Tensor hidden = ad::relu(ad::add_bias(ad::matmul(x_sen, w_g2), b_g2));
  return ad::sigmoid(ad::add_bias(ad::matmul(hidden, w_g1), b_g1));
}

Tensor apply_gate(const Tensor& summaries, const Tensor& gate) {
  if (summaries.rank() == 2) {
    if (gate.rank() != 1) throw ShapeError("apply_gate: expected gate [D] for summaries [K, D]");
    return ad::reshape(ad::mul_expand(ad::reshape(summaries, {1, summaries.dim(0), summaries.dim(1)}),
                                      ad::reshape(gate, {1, gate.dim(0)})),
                       summaries.shape());
  }
  return ad::mul_expand(summaries, gate);
}

TokenSummary summarize_sentence_level(const Tensor& x_sen, const Tensor& frames, const Tensor& w_sim,
                                      std::size_t tokens, std::span<const std::uint8_t> frame_mask,
                                      Similarity similarity) {
  const bool single = x_sen.rank() == 1;
  Tensor query = single ? ad::reshape(x_sen, {1, 1, x_sen.dim(0)}) : ad::reshape(x_sen, {x_sen.dim(0), 1, x_sen.dim(1)});
  Tensor r = batched(frames);
  Tensor scores = similarity == Similarity::trilinear ? trilinear_batched(query, r, w_sim) : ad::bmm(query, r, true);
  TokenSummary one = summarize_per_token(scores, r, frame_mask);
  TokenSummary out{ad::expand(one.attention, 1, tokens), ad::expand(one.summaries, 1, tokens)};
  if (single) {
    out.attention = ad::reshape(out.attention, {tokens, r.dim(1)});
    out.summaries = ad::reshape(out.summaries, {tokens, r.dim(2)});
  }
  return out;
}

GuidedVideoSummary run_qgvr(const Tensor& question, std::span<const std::size_t> question_lengths,
                            const Tensor& raw_frames, std::span<const std::uint8_t> frame_mask,
                            const QgvrWeights& weights, const QgvrConfig& config, const ad::DropoutContext& dropout) {
  if (question.rank() != 3 || raw_frames.rank() != 3 || question.dim(0) != raw_frames.dim(0)) {
    throw ShapeError("run_qgvr: expected question [B, K, E] and frames [B, L, raw]");
  }
  GuidedVideoSummary out;
  out.projected = project_frames(raw_frames, weights.w_proj);
  out.guide = encode_guide(question, question_lengths, weights.guide_forward, weights.guide_backward, dropout);
  if (out.guide.tokens.dim(2) != out.projected.dim(2)) {
    throw ShapeError("run_qgvr: token representation width " + std::to_string(out.guide.tokens.dim(2)) +
                     " differs from projected frame width " + std::to_string(out.projected.dim(2)));
  }
  const std::size_t tokens = question.dim(1);
  TokenSummary summary;
  if (config.tok_summ) {
    Tensor scores = config.similarity == Similarity::trilinear
                        ? trilinear_scores(out.guide.tokens, out.projected, weights.w_sim)
                        : dot_scores(out.guide.tokens, out.projected);
    summary = summarize_per_token(scores, out.projected, frame_mask);
  } else {
    summary = summarize_sentence_level(out.guide.sentence, out.projected, weights.w_sim, tokens, frame_mask,
                                       config.similarity);
  }
  out.attention = summary.attention;
  out.summaries = summary.summaries;
  if (config.gating) {
    out.gate = compute_gate(out.guide.sentence, weights.w_g1, weights.b_g1, weights.w_g2, weights.b_g2);
    out.gated = apply_gate(out.summaries, out.gate);
  } else {
    out.gate = Tensor::full({question.dim(0), out.projected.dim(2)}, 1.0);
    out.gated = out.summaries;
  }
  return out;
}

}  // namespace qgvr::video
