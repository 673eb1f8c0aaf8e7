#include "qgvr/seq2seq/training.hpp"

#include <cmath>
#include <sstream>

namespace qgvr::seq2seq {

StepStats train_step(Model& model, const data::Batch& batch, ad::AdamState& adam, std::mt19937_64& dropout_rng,
                     double clip_threshold) {
  auto& params = model.parameters();
  params.zero_grad();
  const ad::DropoutContext dropout{model.config().dropout, true, &dropout_rng};
  StepStats stats;
  ad::Tensor loss;
  try {
    loss = model.loss(batch, dropout);
  } catch (const ad::NumericError& e) {
    throw ad::NumericError("forward pass at step " + std::to_string(adam.step + 1) + ": " + e.what());
  }
  stats.loss = loss.item();
  ad::backward(loss);
  stats.grad_norm = ad::clip_gradients(params, clip_threshold);
  if (!std::isfinite(stats.grad_norm)) {
    std::ostringstream os;
    os << "non-finite gradient norm at step " << adam.step + 1 << " (loss " << stats.loss << ")";
    for (const auto& p : params.items()) {
      for (double g : p.tensor.grad()) {
        if (!std::isfinite(g)) {
          os << "; first offending parameter " << p.name;
          break;
        }
      }
    }
    params.zero_grad();
    throw ad::NumericError(os.str());
  }
  ad::adam_step(adam, params);
  return stats;
}

TrainResult train(Model& model, data::BatchIterator& batches, ad::AdamState& adam, const TrainOptions& options,
                  const TrainHooks& hooks) {
  std::mt19937_64 dropout_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult result;
  std::size_t stale = 0;
  double window_loss = 0.0;
  std::size_t window = 0;
  for (std::size_t step = 1; step <= options.max_steps; ++step) {
    const auto stats = train_step(model, batches.next(), adam, dropout_rng, options.clip_threshold);
    result.steps = step;
    result.final_loss = stats.loss;
    window_loss += stats.loss;
    ++window;
    LogEntry entry{step, stats.loss, stats.grad_norm, std::nullopt};
    const bool eval_now = options.eval_every > 0 && step % options.eval_every == 0;
    if (eval_now && hooks.validate) {
      const double val = hooks.validate(model);
      entry.val_bleu4 = val;
      if (!result.best_val_bleu4 || val > *result.best_val_bleu4) {
        result.best_val_bleu4 = val;
        result.best_step = step;
        stale = 0;
        if (hooks.on_best) hooks.on_best(model, adam, step);
      } else {
        ++stale;
      }
    }
    if (hooks.log) hooks.log(entry);
    if (eval_now) {
      const double mean = window_loss / static_cast<double>(window);
      window_loss = 0.0;
      window = 0;
      if (hooks.validate && stale >= options.patience) {
        result.early_stopped = true;
        break;
      }
      if (options.target_loss > 0.0 && mean < options.target_loss) break;
    }
  }
  return result;
}

}  // namespace qgvr::seq2seq
