#include "qgvr/seq2seq/model.hpp"

#include <stdexcept>

namespace qgvr::seq2seq {

using ad::InitSpec;
using ad::Shape;
using ad::ShapeError;
using ad::Tensor;
using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (vocab_size <= static_cast<std::size_t>(data::kEosId)) fail("vocab_size must cover the reserved tokens");
  for (auto [name, v] : {std::pair<const char*, std::size_t>{"embed_dim", embed_dim},
                         {"feature_dim", feature_dim},
                         {"raw_feature_dim", raw_feature_dim},
                         {"guide_hidden", guide_hidden},
                         {"question_hidden", question_hidden},
                         {"dialogue_hidden", dialogue_hidden},
                         {"decoder_hidden", decoder_hidden},
                         {"attention_dim", attention_dim},
                         {"gate_hidden", gate_hidden},
                         {"beam_width", beam_width},
                         {"max_decode_len", max_decode_len}}) {
    if (v == 0) fail(std::string(name) + " must be positive");
  }
  if (2 * guide_hidden != feature_dim) fail("2 * guide_hidden must equal feature_dim");
  if (decoder_hidden != 2 * question_hidden) fail("decoder_hidden must equal 2 * question_hidden");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(init_bound > 0.0)) fail("init_bound must be positive");
}

json to_json(const ModelConfig& c) {
  return {{"mode", data::to_string(c.mode)},
          {"vocab_size", c.vocab_size},
          {"embed_dim", c.embed_dim},
          {"feature_dim", c.feature_dim},
          {"raw_feature_dim", c.raw_feature_dim},
          {"guide_hidden", c.guide_hidden},
          {"question_hidden", c.question_hidden},
          {"dialogue_hidden", c.dialogue_hidden},
          {"decoder_hidden", c.decoder_hidden},
          {"attention_dim", c.attention_dim},
          {"gate_hidden", c.gate_hidden},
          {"dropout", c.dropout},
          {"beam_width", c.beam_width},
          {"max_decode_len", c.max_decode_len},
          {"tie_embeddings", c.tie_embeddings},
          {"length_normalize", c.length_normalize},
          {"init_bound", c.init_bound},
          {"forget_bias", c.forget_bias},
          {"tok_summ", c.qgvr.tok_summ},
          {"gating", c.qgvr.gating},
          {"similarity", c.qgvr.similarity == video::Similarity::trilinear ? "trilinear" : "dot"}};
}

ModelConfig config_from_json(const json& j, ModelConfig c) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "mode") c.mode = data::parse_mode(value.get<std::string>());
      else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "embed_dim") c.embed_dim = value.get<std::size_t>();
      else if (key == "feature_dim") c.feature_dim = value.get<std::size_t>();
      else if (key == "raw_feature_dim") c.raw_feature_dim = value.get<std::size_t>();
      else if (key == "guide_hidden") c.guide_hidden = value.get<std::size_t>();
      else if (key == "question_hidden") c.question_hidden = value.get<std::size_t>();
      else if (key == "dialogue_hidden") c.dialogue_hidden = value.get<std::size_t>();
      else if (key == "decoder_hidden") c.decoder_hidden = value.get<std::size_t>();
      else if (key == "attention_dim") c.attention_dim = value.get<std::size_t>();
      else if (key == "gate_hidden") c.gate_hidden = value.get<std::size_t>();
      else if (key == "dropout") c.dropout = value.get<double>();
      else if (key == "beam_width") c.beam_width = value.get<std::size_t>();
      else if (key == "max_decode_len") c.max_decode_len = value.get<std::size_t>();
      else if (key == "tie_embeddings") c.tie_embeddings = value.get<bool>();
      else if (key == "length_normalize") c.length_normalize = value.get<bool>();
      else if (key == "init_bound") c.init_bound = value.get<double>();
      else if (key == "forget_bias") c.forget_bias = value.get<double>();
      else if (key == "tok_summ") c.qgvr.tok_summ = value.get<bool>();
      else if (key == "gating") c.qgvr.gating = value.get<bool>();
      else if (key == "similarity") {
        const auto s = value.get<std::string>();
        if (s == "trilinear") c.qgvr.similarity = video::Similarity::trilinear;
        else if (s == "dot") c.qgvr.similarity = video::Similarity::dot;
        else throw std::invalid_argument("similarity must be trilinear or dot");
      } else {
        throw std::invalid_argument("unknown key");
      }
    } catch (const json::exception& e) {
      throw std::invalid_argument("model config field '" + key + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("model config field '" + key + "': " + e.what());
    }
  }
  return c;
}

namespace {

void length_mask(std::span<const std::size_t> lengths, std::size_t width, std::vector<std::uint8_t>& mask) {
  mask.assign(lengths.size() * width, 0);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    if (lengths[b] == 0 || lengths[b] > width) throw ShapeError("sequence length outside [1, padded width]");
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * width), lengths[b], 1);
  }
}

}  // namespace

AttentionResult bahdanau_attend_keys(const Tensor& h, const Tensor& memory, const Tensor& keys, const Tensor& w_h,
                                     const Tensor& v, std::span<const std::uint8_t> mask) {
  const std::size_t batch = memory.dim(0), steps = memory.dim(1), width = memory.dim(2), att = w_h.dim(1);
  if (h.rank() != 2 || h.dim(0) != batch || keys.shape() != Shape{batch, steps, att} || v.shape() != Shape{att}) {
    throw ShapeError("bahdanau_attend: inconsistent shapes h " + ad::shape_str(h.shape()) + ", memory " +
                     ad::shape_str(memory.shape()) + ", keys " + ad::shape_str(keys.shape()));
  }
  Tensor hidden = ad::tanh(ad::add_expand(keys, ad::matmul(h, w_h)));
  Tensor scores = ad::reshape(ad::matmul(hidden, ad::reshape(v, {att, 1})), {batch, steps});
  Tensor weights = mask.empty() ? ad::softmax(scores) : ad::masked_softmax(scores, mask);
  Tensor context = ad::reshape(ad::bmm(ad::reshape(weights, {batch, 1, steps}), memory), {batch, width});
  return {weights, context};
}

AttentionResult bahdanau_attend(const Tensor& h, const Tensor& memory, const Tensor& w, const Tensor& v,
                                std::span<const std::uint8_t> mask) {
  if (memory.rank() == 2) {
    if (h.rank() != 1) throw ShapeError("bahdanau_attend: unbatched memory needs an unbatched h");
    auto r = bahdanau_attend(ad::reshape(h, {1, h.dim(0)}), ad::reshape(memory, {1, memory.dim(0), memory.dim(1)}),
                             w, v, mask);
    return {ad::reshape(r.weights, {memory.dim(0)}), ad::reshape(r.context, {memory.dim(1)})};
  }
  if (memory.rank() != 3 || h.rank() != 2) throw ShapeError("bahdanau_attend: expected h [B, H] and memory [B, T, D]");
  const std::size_t hidden = h.dim(1), width = memory.dim(2);
  if (w.rank() != 2 || w.dim(0) != hidden + width) {
    throw ShapeError("bahdanau_attend: W must have H + D = " + std::to_string(hidden + width) + " rows, got " +
                     ad::shape_str(w.shape()));
  }
  Tensor keys = ad::matmul(memory, ad::slice(w, 0, hidden, width));
  return bahdanau_attend_keys(h, memory, keys, ad::slice(w, 0, 0, hidden), v, mask);
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

void Model::build(std::mt19937_64& rng) {
  const auto& c = config_;
  const auto uni = InitSpec::uniform(c.init_bound);
  const bool multi = c.mode == DialogueMode::multi_turn;
  auto add_lstm = [&](const std::string& prefix, std::size_t in, std::size_t hidden) {
    params_.add(prefix + ".W_x", {in, 4 * hidden}, uni, rng);
    params_.add(prefix + ".W_h", {hidden, 4 * hidden}, uni, rng);
    params_.add(prefix + ".b", {4 * hidden}, InitSpec::lstm_bias(c.forget_bias), rng);
  };

  if (c.tie_embeddings) {
    params_.add("embed.shared", {c.vocab_size, c.embed_dim}, uni, rng);
  } else {
    params_.add("embed.question", {c.vocab_size, c.embed_dim}, uni, rng);
    if (multi) params_.add("embed.dialogue", {c.vocab_size, c.embed_dim}, uni, rng);
    params_.add("embed.decoder", {c.vocab_size, c.embed_dim}, uni, rng);
  }
  params_.add("frames.W_proj", {c.raw_feature_dim, c.feature_dim}, uni, rng);
  add_lstm("guide.fw", c.embed_dim, c.guide_hidden);
  add_lstm("guide.bw", c.embed_dim, c.guide_hidden);
  params_.add("qgvr.W_sim", {3 * c.feature_dim}, uni, rng);
  params_.add("qgvr.W_g2", {c.feature_dim, c.gate_hidden}, uni, rng);
  params_.add("qgvr.b_g2", {c.gate_hidden}, InitSpec::zeros(), rng);
  params_.add("qgvr.W_g1", {c.gate_hidden, c.feature_dim}, uni, rng);
  params_.add("qgvr.b_g1", {c.feature_dim}, InitSpec::zeros(), rng);
  add_lstm("ques.fw", c.embed_dim + c.feature_dim, c.question_hidden);
  add_lstm("ques.bw", c.embed_dim + c.feature_dim, c.question_hidden);
  if (multi) {
    add_lstm("dial.fw", c.embed_dim, c.dialogue_hidden);
    add_lstm("dial.bw", c.embed_dim, c.dialogue_hidden);
  }
  params_.add("dec.att_q.W", {c.decoder_hidden + 2 * c.question_hidden, c.attention_dim}, uni, rng);
  params_.add("dec.att_q.v", {c.attention_dim}, uni, rng);
  std::size_t dec_in = c.embed_dim + 2 * c.question_hidden;
  if (multi) {
    params_.add("dec.att_d.W", {c.decoder_hidden + 2 * c.dialogue_hidden, c.attention_dim}, uni, rng);
    params_.add("dec.att_d.v", {c.attention_dim}, uni, rng);
    dec_in += 2 * c.dialogue_hidden;
  }
  add_lstm("dec.lstm", dec_in, c.decoder_hidden);
  if (c.tie_embeddings) {
    if (c.decoder_hidden != c.embed_dim) params_.add("dec.W_bridge", {c.decoder_hidden, c.embed_dim}, uni, rng);
  } else {
    params_.add("dec.W_out", {c.decoder_hidden, c.vocab_size}, uni, rng);
  }
  params_.add("dec.b_out", {c.vocab_size}, InitSpec::zeros(), rng);
}

void Model::tie_embeddings() {
  if (config_.tie_embeddings) throw std::logic_error("tie_embeddings: embeddings are already shared");
  const Tensor source = params_.tensor("embed.question");
  if (source.dim(1) != config_.embed_dim) throw ShapeError("tie_embeddings: embedding width differs from embed_dim");
  for (const char* name : {"embed.question", "embed.dialogue", "embed.decoder", "dec.W_out"}) {
    if (params_.contains(name)) params_.remove(name);
  }
  params_.add("embed.shared", Tensor::from(source.shape(), {source.values().begin(), source.values().end()}, true),
              InitSpec::uniform(config_.init_bound));
  if (config_.decoder_hidden != config_.embed_dim) {
    std::mt19937_64 rng(config_.vocab_size * 7919 + config_.embed_dim);
    params_.add("dec.W_bridge", {config_.decoder_hidden, config_.embed_dim}, InitSpec::uniform(config_.init_bound), rng);
  }
  config_.tie_embeddings = true;
}

ad::LstmWeights Model::lstm(const std::string& prefix) const {
  return {params_.tensor(prefix + ".W_x"), params_.tensor(prefix + ".W_h"), params_.tensor(prefix + ".b")};
}

const Tensor& Model::question_table() const {
  return params_.tensor(config_.tie_embeddings ? "embed.shared" : "embed.question");
}

const Tensor& Model::dialogue_table() const {
  return params_.tensor(config_.tie_embeddings ? "embed.shared" : "embed.dialogue");
}

const Tensor& Model::decoder_table() const {
  return params_.tensor(config_.tie_embeddings ? "embed.shared" : "embed.decoder");
}

video::QgvrWeights Model::qgvr_weights() const {
  return {params_.tensor("frames.W_proj"), lstm("guide.fw"),         lstm("guide.bw"),
          params_.tensor("qgvr.W_sim"),    params_.tensor("qgvr.W_g1"), params_.tensor("qgvr.b_g1"),
          params_.tensor("qgvr.W_g2"),     params_.tensor("qgvr.b_g2")};
}

ad::BiLstmOutput Model::encode_question(const Tensor& question_embeds, const Tensor& gated,
                                        std::span<const std::size_t> lengths, const ad::DropoutContext& dropout) const {
  if (question_embeds.rank() != 3 || gated.rank() != 3 || question_embeds.dim(0) != gated.dim(0) ||
      question_embeds.dim(1) != gated.dim(1)) {
    throw ShapeError("encode_question: question " + ad::shape_str(question_embeds.shape()) +
                     " and gated summaries " + ad::shape_str(gated.shape()) + " differ in batch or length");
  }
  return ad::bilstm(ad::concat({question_embeds, gated}, 2), lengths, lstm("ques.fw"), lstm("ques.bw"), dropout);
}

ad::BiLstmOutput Model::encode_dialogue(const Tensor& context_embeds, std::span<const std::size_t> lengths,
                                        const ad::DropoutContext& dropout) const {
  if (config_.mode != DialogueMode::multi_turn) throw std::logic_error("encode_dialogue: single-turn model");
  if (context_embeds.rank() != 3 || context_embeds.dim(1) == 0) {
    throw std::invalid_argument("encode_dialogue: empty dialogue context in multi-turn mode");
  }
  return ad::bilstm(context_embeds, lengths, lstm("dial.fw"), lstm("dial.bw"), dropout);
}

EncoderMemory Model::encode(const data::Batch& batch, const ad::DropoutContext& dropout) const {
  const auto& c = config_;
  if (batch.frames.dim(2) != c.raw_feature_dim) {
    throw ShapeError("frame features have width " + std::to_string(batch.frames.dim(2)) + ", model expects " +
                     std::to_string(c.raw_feature_dim));
  }
  EncoderMemory mem;
  mem.batch = batch.size;
  Tensor q_emb = ad::embedding(question_table(), batch.question, {batch.size, batch.question_len});
  mem.video = video::run_qgvr(q_emb, batch.question_lengths, batch.frames, batch.frame_mask, qgvr_weights(), c.qgvr,
                              dropout);
  auto q = encode_question(q_emb, mem.video.gated, batch.question_lengths, dropout);
  mem.q_tok = q.tokens;
  mem.q_sen = q.sentence;
  length_mask(batch.question_lengths, batch.question_len, mem.q_mask);
  const Tensor& wq = params_.tensor("dec.att_q.W");
  mem.q_keys = ad::matmul(mem.q_tok, ad::slice(wq, 0, c.decoder_hidden, 2 * c.question_hidden));
  mem.q_query = ad::slice(wq, 0, 0, c.decoder_hidden);
  if (c.mode == DialogueMode::multi_turn) {
    if (!batch.has_context()) throw std::invalid_argument("multi-turn model needs a dialogue context for every instance");
    Tensor d_emb = ad::embedding(dialogue_table(), batch.context, {batch.size, batch.context_len});
    mem.d_tok = encode_dialogue(d_emb, batch.context_lengths, dropout).tokens;
    length_mask(batch.context_lengths, batch.context_len, mem.d_mask);
    const Tensor& wd = params_.tensor("dec.att_d.W");
    mem.d_keys = ad::matmul(mem.d_tok, ad::slice(wd, 0, c.decoder_hidden, 2 * c.dialogue_hidden));
    mem.d_query = ad::slice(wd, 0, 0, c.decoder_hidden);
  }
  mem.output_weight = c.tie_embeddings ? ad::transpose(params_.tensor("embed.shared")) : params_.tensor("dec.W_out");
  return mem;
}

ad::LstmState Model::initial_state(const EncoderMemory& memory) const {
  return {memory.q_sen, Tensor::zeros({memory.batch, config_.decoder_hidden})};
}

Tensor Model::embed_decoder(std::span<const int> ids) const {
  return ad::embedding(decoder_table(), ids, {ids.size()});
}

DecoderStep Model::decoder_step(const EncoderMemory& mem, const ad::LstmState& state, const Tensor& y_prev_embed,
                                const ad::DropoutContext& dropout) const {
  DecoderStep out;
  auto aq = bahdanau_attend_keys(state.h, mem.q_tok, mem.q_keys, mem.q_query, params_.tensor("dec.att_q.v"), mem.q_mask);
  out.att_q = aq.weights;
  std::vector<Tensor> parts{y_prev_embed, aq.context};
  if (config_.mode == DialogueMode::multi_turn) {
    auto adlg =
        bahdanau_attend_keys(state.h, mem.d_tok, mem.d_keys, mem.d_query, params_.tensor("dec.att_d.v"), mem.d_mask);
    out.att_d = adlg.weights;
    parts.push_back(adlg.context);
  }
  out.state = ad::lstm_cell(dropout.apply(ad::concat(parts, 1)), state, lstm("dec.lstm"));
  Tensor h = dropout.apply(out.state.h);
  if (config_.tie_embeddings && config_.decoder_hidden != config_.embed_dim) {
    h = ad::matmul(h, params_.tensor("dec.W_bridge"));
  }
  out.logits = ad::add_bias(ad::matmul(h, mem.output_weight), params_.tensor("dec.b_out"));
  return out;
}

Tensor Model::forward(const data::Batch& batch, const ad::DropoutContext& dropout) const {
  if (batch.answer_len < 2) throw std::invalid_argument("answers need at least <sos> and <eos>");
  EncoderMemory mem = encode(batch, dropout);
  ad::LstmState state = initial_state(mem);
  std::vector<Tensor> logits;
  std::vector<int> ids(batch.size);
  for (std::size_t n = 0; n + 1 < batch.answer_len; ++n) {
    for (std::size_t b = 0; b < batch.size; ++b) ids[b] = batch.answer[b * batch.answer_len + n];
    auto step = decoder_step(mem, state, embed_decoder(ids), dropout);
    state = step.state;
    logits.push_back(step.logits);
  }
  return ad::stack(logits, 1);
}

Tensor Model::loss(const data::Batch& batch, const ad::DropoutContext& dropout) const {
  Tensor logits = forward(batch, dropout);
  const std::size_t steps = batch.answer_len - 1;
  std::vector<int> targets(batch.size * steps);
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t n = 0; n < steps; ++n) targets[b * steps + n] = batch.answer[b * batch.answer_len + n + 1];
  }
  return ad::cross_entropy_loss(ad::reshape(logits, {batch.size * steps, config_.vocab_size}), targets, data::kPadId);
}

}  // namespace qgvr::seq2seq
