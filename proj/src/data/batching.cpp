#include "qgvr/data/batching.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace qgvr::data {

std::string to_string(DialogueMode mode) { return mode == DialogueMode::single_turn ? "single_turn" : "multi_turn"; }

DialogueMode parse_mode(const std::string& text) {
  if (text == "single_turn" || text == "single") return DialogueMode::single_turn;
  if (text == "multi_turn" || text == "multi") return DialogueMode::multi_turn;
  throw std::invalid_argument("unknown dialogue mode '" + text + "' (expected single_turn or multi_turn)");
}

std::vector<TrainingInstance> make_instances(const DialogueExample& example, const Vocabulary& vocab,
                                             const InstanceOptions& options) {
  std::vector<TrainingInstance> out;
  std::vector<int> history;
  if (options.prepend_caption && !example.caption.empty()) {
    history = vocab.encode(tokenize(example.caption));
    history.push_back(kSepId);
  }
  for (std::size_t t = 0; t < example.turns.size(); ++t) {
    const auto& turn = example.turns[t];
    TrainingInstance inst;
    inst.video_id = example.video_id;
    inst.question_id = example.video_id + "#" + std::to_string(t);
    inst.turn = t;
    inst.question = vocab.encode(tokenize(turn.question));
    const auto answer = vocab.encode(tokenize(turn.answer));
    inst.answer.reserve(answer.size() + 2);
    inst.answer.push_back(kSosId);
    inst.answer.insert(inst.answer.end(), answer.begin(), answer.end());
    inst.answer.push_back(kEosId);
    inst.focus = turn.focus;
    if (options.mode == DialogueMode::multi_turn) {
      inst.context = history.empty() ? std::vector<int>{kEmptyContextId} : history;
    }
    history.insert(history.end(), inst.question.begin(), inst.question.end());
    history.push_back(kSepId);
    history.insert(history.end(), answer.begin(), answer.end());
    history.push_back(kSepId);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<TrainingInstance> make_instances(const std::vector<DialogueExample>& examples, const Vocabulary& vocab,
                                             const InstanceOptions& options) {
  std::vector<TrainingInstance> out;
  for (const auto& ex : examples) {
    auto part = make_instances(ex, vocab, options);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::vector<std::vector<std::string>> corpus_sentences(const std::vector<DialogueExample>& examples,
                                                       bool include_captions) {
  std::vector<std::vector<std::string>> out;
  for (const auto& ex : examples) {
    if (include_captions && !ex.caption.empty()) out.push_back(tokenize(ex.caption));
    for (const auto& t : ex.turns) {
      out.push_back(tokenize(t.question));
      out.push_back(tokenize(t.answer));
    }
  }
  return out;
}

namespace {

void pad_rows(const std::vector<const std::vector<int>*>& rows, std::vector<int>& out, std::vector<std::size_t>& lengths,
              std::size_t& width) {
  width = 0;
  for (const auto* r : rows) width = std::max(width, r->size());
  out.assign(rows.size() * width, kPadId);
  lengths.clear();
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b]->begin(), rows[b]->end(), out.begin() + static_cast<std::ptrdiff_t>(b * width));
    lengths.push_back(rows[b]->size());
  }
}

}  // namespace

Batch make_batch(const std::vector<const TrainingInstance*>& items, const FeatureStore& features) {
  if (items.empty()) throw std::invalid_argument("make_batch: no instances");
  Batch batch;
  batch.size = items.size();
  batch.instances = items;
  std::vector<const std::vector<int>*> q, c, a;
  bool with_context = !items.front()->context.empty();
  for (const auto* inst : items) {
    if (inst->question.empty()) throw DataError("instance " + inst->question_id + " has an empty question");
    if (inst->context.empty() == with_context) {
      throw std::invalid_argument("make_batch: instances mix single-turn and multi-turn contexts");
    }
    q.push_back(&inst->question);
    c.push_back(&inst->context);
    a.push_back(&inst->answer);
    batch.question_ids.push_back(inst->question_id);
  }
  pad_rows(q, batch.question, batch.question_lengths, batch.question_len);
  pad_rows(a, batch.answer, batch.answer_lengths, batch.answer_len);
  if (with_context) pad_rows(c, batch.context, batch.context_lengths, batch.context_len);

  std::size_t dim = 0;
  std::vector<const FrameFeatures*> feats;
  for (const auto* inst : items) {
    feats.push_back(&features.get(inst->video_id));
    batch.frame_len = std::max(batch.frame_len, feats.back()->length);
    if (dim != 0 && feats.back()->dim != dim) throw DataError("feature widths differ inside a batch");
    dim = feats.back()->dim;
  }
  std::vector<double> frames(batch.size * batch.frame_len * dim, 0.0);
  batch.frame_mask.assign(batch.size * batch.frame_len, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& f = *feats[b];
    std::copy(f.values.begin(), f.values.end(), frames.begin() + static_cast<std::ptrdiff_t>(b * batch.frame_len * dim));
    std::fill_n(batch.frame_mask.begin() + static_cast<std::ptrdiff_t>(b * batch.frame_len), f.length, 1);
  }
  batch.frames = ad::Tensor::from({batch.size, batch.frame_len, dim}, std::move(frames));
  return batch;
}

BatchIterator::BatchIterator(const std::vector<TrainingInstance>& instances, const FeatureStore& features,
                             std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : instances_(&instances), features_(&features), batch_size_(batch_size), shuffle_(shuffle), rng_(seed) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (instances.empty()) throw std::invalid_argument("no training instances");
  order_.resize(instances.size());
  reshuffle();
}

void BatchIterator::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::size_t BatchIterator::batches_per_epoch() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch BatchIterator::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::vector<const TrainingInstance*> items;
  for (std::size_t i = cursor_; i < end; ++i) items.push_back(&(*instances_)[order_[i]]);
  cursor_ = end;
  return make_batch(items, *features_);
}

std::vector<Batch> BatchIterator::epoch() {
  if (cursor_ != 0) {
    ++epoch_;
    reshuffle();
  }
  std::vector<Batch> out;
  for (std::size_t i = 0; i < batches_per_epoch(); ++i) out.push_back(next());
  return out;
}

}  // namespace qgvr::data
