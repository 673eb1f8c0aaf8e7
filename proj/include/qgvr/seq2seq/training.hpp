#pragma once

#include <functional>
#include <optional>
#include <random>

#include "qgvr/ad/optim.hpp"
#include "qgvr/seq2seq/model.hpp"

namespace qgvr::seq2seq {

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// Teacher-forced forward pass with dropout, backward, clipping, one Adam
/// update. Throws ad::NumericError (with the step number) on a non-finite
/// loss or gradient; parameters are left untouched in that case.
StepStats train_step(Model& model, const data::Batch& batch, ad::AdamState& adam, std::mt19937_64& dropout_rng,
                     double clip_threshold = ad::kDefaultClipThreshold);

struct TrainOptions {
  std::size_t max_steps = 100000;
  std::size_t batch_size = 32;
  std::size_t eval_every = 500;
  std::size_t patience = 10;  // evaluations without improvement before stopping
  std::uint64_t seed = 0;
  double clip_threshold = ad::kDefaultClipThreshold;
  /// Stop once the mean loss over the last `eval_every` steps falls below this (0 disables).
  double target_loss = 0.0;
};

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> val_bleu4;
};

struct TrainResult {
  std::size_t steps = 0;
  double final_loss = 0.0;
  std::optional<double> best_val_bleu4;
  std::size_t best_step = 0;
  bool early_stopped = false;
};

struct TrainHooks {
  /// Validation BLEU-4 of the current model; early stopping is off without it.
  std::function<double(const Model&)> validate;
  std::function<void(const LogEntry&)> log;
  /// Called whenever validation improves (e.g. to save the best checkpoint).
  std::function<void(const Model&, const ad::AdamState&, std::size_t step)> on_best;
};

TrainResult train(Model& model, data::BatchIterator& batches, ad::AdamState& adam, const TrainOptions& options,
                  const TrainHooks& hooks = {});

}  // namespace qgvr::seq2seq
