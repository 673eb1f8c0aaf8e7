#include "qgvr/app/experiment.hpp"

#include <fstream>

#include "qgvr/ad/checkpoint.hpp"

namespace qgvr::app {

using nlohmann::json;

json RunConfig::to_json() const {
  return {{"data",
           {{"root", data.root.string()},
            {"train", data.train},
            {"val", data.val},
            {"test", data.test},
            {"features", data.features},
            {"min_count", data.min_count},
            {"prepend_caption", data.prepend_caption}}},
          {"model", seq2seq::to_json(model)},
          {"train",
           {{"max_steps", train.max_steps},
            {"batch_size", train.batch_size},
            {"eval_every", train.eval_every},
            {"patience", train.patience},
            {"seed", train.seed},
            {"clip_threshold", train.clip_threshold},
            {"target_loss", train.target_loss},
            {"learning_rate", learning_rate},
            {"val_limit", val_limit}}}};
}

namespace {

template <typename T>
void read_field(const json& section, const std::string& where, const std::string& key, T& out) {
  try {
    out = section.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) { return from_json(j, RunConfig{}); }

RunConfig RunConfig::from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw UsageError("run config must be a JSON object");
  for (const auto& [section, body] : j.items()) {
    if (section == "model") {
      try {
        c.model = seq2seq::config_from_json(body, c.model);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      continue;
    }
    if (!body.is_object()) throw UsageError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      if (section == "data") {
        if (key == "root") {
          std::string root;
          read_field(body, section, key, root);
          c.data.root = root;
        } else if (key == "train") read_field(body, section, key, c.data.train);
        else if (key == "val") read_field(body, section, key, c.data.val);
        else if (key == "test") read_field(body, section, key, c.data.test);
        else if (key == "features") read_field(body, section, key, c.data.features);
        else if (key == "min_count") read_field(body, section, key, c.data.min_count);
        else if (key == "prepend_caption") read_field(body, section, key, c.data.prepend_caption);
        else throw UsageError("unknown config key data." + key);
      } else if (section == "train") {
        if (key == "max_steps") read_field(body, section, key, c.train.max_steps);
        else if (key == "batch_size") read_field(body, section, key, c.train.batch_size);
        else if (key == "eval_every") read_field(body, section, key, c.train.eval_every);
        else if (key == "patience") read_field(body, section, key, c.train.patience);
        else if (key == "seed") read_field(body, section, key, c.train.seed);
        else if (key == "clip_threshold") read_field(body, section, key, c.train.clip_threshold);
        else if (key == "target_loss") read_field(body, section, key, c.train.target_loss);
        else if (key == "learning_rate") read_field(body, section, key, c.learning_rate);
        else if (key == "val_limit") read_field(body, section, key, c.val_limit);
        else throw UsageError("unknown config key train." + key);
      } else {
        throw UsageError("unknown config section '" + section + "'");
      }
    }
  }
  return c;
}

void RunConfig::validate() const {
  auto model_check = model;
  if (model_check.vocab_size == 0) model_check.vocab_size = 16;
  try {
    model_check.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (train.batch_size == 0) throw UsageError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
  if (!(train.clip_threshold > 0.0)) throw UsageError("clip_threshold must be positive");
  if (data.min_count == 0) throw UsageError("min_count must be at least 1");
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw UsageError("config file " + path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j, std::move(base));
}

data::Vocabulary build_vocabulary(const std::vector<data::DialogueExample>& train, const DataConfig& config) {
  if (train.empty()) throw data::DataError("training split has no dialogues");
  return data::Vocabulary::build(data::corpus_sentences(train, config.prepend_caption), config.min_count);
}

Dataset make_dataset(std::vector<data::DialogueExample> dialogues, data::FeatureStore features,
                     const data::Vocabulary& vocab, const DataConfig& config, const seq2seq::ModelConfig& model) {
  Dataset d;
  d.instances = data::make_instances(dialogues, vocab, {model.mode, config.prepend_caption});
  d.dialogues = std::move(dialogues);
  d.features = std::move(features);
  return d;
}

Dataset load_split(const DataConfig& config, const std::string& file, const data::Vocabulary& vocab,
                   const seq2seq::ModelConfig& model) {
  auto corpus = data::load_avsd(config.resolve(file), config.resolve(config.features), model.raw_feature_dim);
  return make_dataset(std::move(corpus.dialogues), std::move(corpus.features), vocab, config, model);
}

Evaluation evaluate_model(const seq2seq::Model& model, const Dataset& data, const data::Vocabulary& vocab,
                          std::optional<std::size_t> beam_width, std::size_t limit) {
  const std::size_t n = limit == 0 ? data.instances.size() : std::min(limit, data.instances.size());
  if (n == 0) throw data::DataError("nothing to evaluate");
  const std::vector<data::TrainingInstance> subset(data.instances.begin(),
                                                   data.instances.begin() + static_cast<std::ptrdiff_t>(n));
  Evaluation ev;
  ev.decoded = seq2seq::decode_instances(model, subset, data.features, beam_width.value_or(model.config().beam_width),
                                         model.config().max_decode_len);
  metrics::EvalCorpus corpus;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<int> gold(subset[i].answer.begin() + 1, subset[i].answer.end() - 1);
    exact += ev.decoded[i].tokens == gold;
    ev.hypotheses.push_back(vocab.to_text(ev.decoded[i].tokens));
    ev.references.push_back(vocab.to_text(gold));
    corpus.push_back({vocab.decode(ev.decoded[i].tokens), {vocab.decode(gold)}});
  }
  ev.report = metrics::evaluate(corpus);
  ev.exact_match = static_cast<double>(exact) / static_cast<double>(n);
  return ev;
}

TeacherForcedStats teacher_forced_stats(const seq2seq::Model& model, const Dataset& data, std::size_t batch_size) {
  ad::NoGradGuard guard;
  const std::size_t V = model.config().vocab_size;
  double loss_sum = 0.0, tokens = 0.0, correct = 0.0;
  for (std::size_t start = 0; start < data.instances.size(); start += batch_size) {
    std::vector<const data::TrainingInstance*> items;
    for (std::size_t i = start; i < std::min(start + batch_size, data.instances.size()); ++i) {
      items.push_back(&data.instances[i]);
    }
    const auto batch = data::make_batch(items, data.features);
    const auto logits = model.forward(batch);
    const std::size_t steps = batch.answer_len - 1;
    const auto vals = logits.values();
    for (std::size_t b = 0; b < batch.size; ++b) {
      for (std::size_t n = 0; n < steps; ++n) {
        const int target = batch.answer[b * batch.answer_len + n + 1];
        if (target == data::kPadId) continue;
        const auto row = vals.subspan((b * steps + n) * V, V);
        const auto lp = seq2seq::log_softmax(row);
        loss_sum -= lp[static_cast<std::size_t>(target)];
        correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == target;
        tokens += 1.0;
      }
    }
  }
  if (tokens == 0.0) throw data::DataError("no answer tokens to score");
  return {loss_sum / tokens, correct / tokens};
}

TrainingRun train_model(const RunConfig& config, const data::Vocabulary& vocab, const Dataset& train,
                        const Dataset* val, const TrainCallbacks& callbacks) {
  auto model_config = config.model;
  model_config.vocab_size = vocab.size();
  seq2seq::Model model(model_config, config.train.seed);
  auto adam = ad::AdamState::for_parameters(model.parameters(), {config.learning_rate, 0.85, 0.997, 1e-6});
  if (train.instances.empty()) throw data::DataError("training split has no instances");
  data::BatchIterator batches(train.instances, train.features, config.train.batch_size, config.train.seed + 1);

  std::vector<std::vector<double>> best;
  seq2seq::TrainHooks hooks;
  hooks.log = callbacks.log;
  if (val != nullptr && !val->instances.empty()) {
    hooks.validate = [&](const seq2seq::Model& m) {
      return evaluate_model(m, *val, vocab, 1, config.val_limit).report.bleu[3];
    };
    hooks.on_best = [&](const seq2seq::Model& m, const ad::AdamState& a, std::size_t step) {
      best.clear();
      for (const auto& p : m.parameters().items()) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
      if (callbacks.on_best) callbacks.on_best(m, a, step);
    };
  }
  auto result = seq2seq::train(model, batches, adam, config.train, hooks);
  if (!best.empty()) {
    auto& items = model.parameters().items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      std::copy(best[i].begin(), best[i].end(), items[i].tensor.mutable_values().begin());
    }
  }
  return {std::move(model), std::move(adam), result};
}

void save_model(const fs::path& path, const seq2seq::Model& model, const data::Vocabulary& vocab,
                const RunConfig& config, const ad::AdamState* adam) {
  auto run = config;
  run.model = model.config();
  ad::save_checkpoint(path, model.parameters(), adam, {{"run", run.to_json()}, {"vocab", vocab.to_json()}});
}

LoadedModel load_model(const fs::path& path) {
  json meta;
  try {
    meta = ad::read_checkpoint_metadata(path);
  } catch (const ad::CheckpointError& e) {
    throw data::DataError(e.what());
  }
  if (!meta.contains("run") || !meta.contains("vocab")) {
    throw data::DataError(path.string() + " carries no run configuration or vocabulary");
  }
  auto config = RunConfig::from_json(meta.at("run"));
  auto vocab = data::Vocabulary::from_json(meta.at("vocab"));
  if (config.model.vocab_size != vocab.size()) {
    throw data::DataError("checkpoint vocabulary has " + std::to_string(vocab.size()) + " entries, model expects " +
                          std::to_string(config.model.vocab_size));
  }
  seq2seq::Model model(config.model, 0);
  try {
    ad::load_checkpoint(path, model.parameters(), nullptr);
  } catch (const ad::CheckpointError& e) {
    throw data::DataError(e.what());
  }
  return {std::move(model), std::move(vocab), std::move(config)};
}

void echo_config(const fs::path& dir, const json& resolved) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config.json");
  out << resolved.dump(2) << "\n";
  if (!out) throw data::DataError("cannot write " + (dir / "config.json").string());
}

}  // namespace qgvr::app
