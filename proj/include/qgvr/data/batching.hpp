#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qgvr/ad/tensor.hpp"
#include "qgvr/data/corpus.hpp"
#include "qgvr/data/text.hpp"

namespace qgvr::data {

enum class DialogueMode { single_turn, multi_turn };

std::string to_string(DialogueMode mode);
DialogueMode parse_mode(const std::string& text);

struct TrainingInstance {
  std::string question_id;  // "<video_id>#<turn>"
  std::string video_id;
  std::size_t turn = 0;
  std::vector<int> question;
  std::vector<int> context;  // empty in single-turn mode
  std::vector<int> answer;   // <sos> ... <eos>
  std::vector<FrameRange> focus;
};

struct InstanceOptions {
  DialogueMode mode = DialogueMode::multi_turn;
  /// Put the dialogue's caption (followed by <sep>) at the start of every context.
  bool prepend_caption = false;
};

/// One instance per turn. In multi-turn mode the context of turn t is
/// q_1 <sep> a_1 <sep> ... q_{t-1} <sep> a_{t-1} <sep>, and the first
/// turn gets the single <empty> token.
std::vector<TrainingInstance> make_instances(const DialogueExample& example, const Vocabulary& vocab,
                                             const InstanceOptions& options = {});
std::vector<TrainingInstance> make_instances(const std::vector<DialogueExample>& examples, const Vocabulary& vocab,
                                             const InstanceOptions& options = {});

/// Every question and answer of the corpus, tokenized (captions too when requested).
std::vector<std::vector<std::string>> corpus_sentences(const std::vector<DialogueExample>& examples,
                                                       bool include_captions = false);

/// Padded mini-batch. Integer arrays are row-major [B, max length] and padded with kPadId.
struct Batch {
  std::size_t size = 0;
  std::size_t question_len = 0;
  std::size_t context_len = 0;
  std::size_t answer_len = 0;
  std::size_t frame_len = 0;
  std::vector<int> question;
  std::vector<std::size_t> question_lengths;
  std::vector<int> context;
  std::vector<std::size_t> context_lengths;
  std::vector<int> answer;
  std::vector<std::size_t> answer_lengths;
  ad::Tensor frames;                    // [B, L, dim], zero rows past each video's end
  std::vector<std::uint8_t> frame_mask;  // [B, L]
  std::vector<std::string> question_ids;
  std::vector<const TrainingInstance*> instances;

  bool has_context() const { return context_len > 0; }
};

Batch make_batch(const std::vector<const TrainingInstance*>& items, const FeatureStore& features);

/// Epoch-wise shuffled batches, reproducible from the seed.
class BatchIterator {
 public:
  BatchIterator(const std::vector<TrainingInstance>& instances, const FeatureStore& features,
                std::size_t batch_size, std::uint64_t seed, bool shuffle = true);

  /// Next batch; starts a new (reshuffled) epoch when the current one is exhausted.
  Batch next();
  /// All batches of one fresh epoch, ceil(N / batch_size) of them.
  std::vector<Batch> epoch();
  std::size_t batches_per_epoch() const;
  std::size_t epoch_index() const { return epoch_; }

 private:
  void reshuffle();

  const std::vector<TrainingInstance>* instances_;
  const FeatureStore* features_;
  std::size_t batch_size_;
  bool shuffle_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace qgvr::data
