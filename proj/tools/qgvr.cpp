// qgvr: train, evaluate, decode and inspect the question-guided video QA model.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "qgvr/ad/checkpoint.hpp"
#include "qgvr/app/analysis.hpp"
#include "qgvr/data/synthetic.hpp"

namespace {

using namespace qgvr;
using app::RunConfig;
using app::UsageError;
using nlohmann::json;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Flags that override the configuration. Unset flags leave the config alone.
struct Overrides {
  std::string config_file;
  std::optional<std::string> data_root;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode, similarity;
  bool no_tok_summ = false, no_gating = false, untied = false;
  std::optional<std::size_t> embed_dim, feature_dim, raw_feature_dim, guide_hidden, question_hidden, dialogue_hidden,
      decoder_hidden, attention_dim, gate_hidden, beam, max_decode_len;
  std::optional<double> dropout, init_bound;
  std::optional<std::size_t> steps, batch_size, eval_every, patience, val_limit, min_count;
  std::optional<double> lr, target_loss;

  void add_common(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON run configuration (flags take precedence)");
    cmd->add_option("--data-root", data_root, std::string("Data directory (overrides $") + app::kDataRootEnv + ")");
    cmd->add_option("--seed", seed, "Random seed");
  }

  void add_model(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "single or multi (turn)")->check(CLI::IsMember({"single", "multi"}));
    cmd->add_flag("--no-tok-summ", no_tok_summ, "Sentence-level video summary instead of per-token");
    cmd->add_flag("--no-gating", no_gating, "Disable the feature gate");
    cmd->add_option("--similarity", similarity)->check(CLI::IsMember({"trilinear", "dot"}));
    cmd->add_flag("--untied", untied, "Separate question, dialogue and decoder embeddings");
    cmd->add_option("--embed-dim", embed_dim);
    cmd->add_option("--feature-dim", feature_dim);
    cmd->add_option("--raw-feature-dim", raw_feature_dim);
    cmd->add_option("--guide-hidden", guide_hidden);
    cmd->add_option("--question-hidden", question_hidden);
    cmd->add_option("--dialogue-hidden", dialogue_hidden);
    cmd->add_option("--decoder-hidden", decoder_hidden);
    cmd->add_option("--attention-dim", attention_dim);
    cmd->add_option("--gate-hidden", gate_hidden);
    cmd->add_option("--dropout", dropout);
    cmd->add_option("--init-bound", init_bound, "Parameters start uniform in [-b, b]");
    cmd->add_option("--max-decode-len", max_decode_len);
  }

  void add_beam(CLI::App* cmd) { cmd->add_option("--beam", beam, "Beam width (1 = greedy, default 3)"); }

  void add_training(CLI::App* cmd) {
    cmd->add_option("--steps", steps, "Maximum training steps (default 100000)");
    cmd->add_option("--batch-size", batch_size, "Examples per batch");
    cmd->add_option("--eval-every", eval_every, "Steps between validations");
    cmd->add_option("--patience", patience, "Validations without improvement before stopping");
    cmd->add_option("--lr", lr, "Adam step size");
    cmd->add_option("--val-limit", val_limit, "Validation instances decoded per check (0 = all)");
    cmd->add_option("--target-loss", target_loss, "Stop once the windowed training loss drops below this");
    cmd->add_option("--min-count", min_count, "Minimum token count for the vocabulary");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_file.empty()) c = app::load_run_config(config_file, c);
    if (const char* env = std::getenv(app::kDataRootEnv); env != nullptr && *env != '\0') c.data.root = env;
    if (data_root) c.data.root = *data_root;
    if (seed) c.train.seed = *seed;
    auto& m = c.model;
    if (mode) m.mode = data::parse_mode(*mode);
    if (similarity) m.qgvr.similarity = *similarity == "dot" ? video::Similarity::dot : video::Similarity::trilinear;
    if (no_tok_summ) m.qgvr.tok_summ = false;
    if (no_gating) m.qgvr.gating = false;
    if (untied) m.tie_embeddings = false;
    auto set = [](auto& field, const auto& flag) {
      if (flag) field = *flag;
    };
    set(m.embed_dim, embed_dim);
    set(m.feature_dim, feature_dim);
    set(m.raw_feature_dim, raw_feature_dim);
    set(m.guide_hidden, guide_hidden);
    set(m.question_hidden, question_hidden);
    set(m.dialogue_hidden, dialogue_hidden);
    set(m.decoder_hidden, decoder_hidden);
    set(m.attention_dim, attention_dim);
    set(m.gate_hidden, gate_hidden);
    set(m.beam_width, beam);
    set(m.max_decode_len, max_decode_len);
    set(m.dropout, dropout);
    set(m.init_bound, init_bound);
    set(c.train.max_steps, steps);
    set(c.train.batch_size, batch_size);
    set(c.train.eval_every, eval_every);
    set(c.train.patience, patience);
    set(c.learning_rate, lr);
    set(c.val_limit, val_limit);
    set(c.train.target_loss, target_loss);
    set(c.data.min_count, min_count);
    c.validate();
    return c;
  }
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw data::DataError(what + " not found: " + p.string());
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw data::DataError("cannot write " + path.string());
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  for (const auto& l : lines) out << l << "\n";
  if (!out) throw data::DataError("cannot write " + path.string());
}

struct Prepared {
  data::Vocabulary vocab;
  app::Dataset train;
  std::optional<app::Dataset> val;
};

Prepared prepare(const RunConfig& c) {
  require_file(c.data.root, "data root");
  require_file(c.data.resolve(c.data.train), "training split");
  require_file(c.data.resolve(c.data.features), "feature directory");
  auto corpus = data::load_avsd(c.data.resolve(c.data.train), c.data.resolve(c.data.features), c.model.raw_feature_dim);
  Prepared p{app::build_vocabulary(corpus.dialogues, c.data), {}, std::nullopt};
  p.train = app::make_dataset(std::move(corpus.dialogues), std::move(corpus.features), p.vocab, c.data, c.model);
  if (fs::exists(c.data.resolve(c.data.val))) p.val = app::load_split(c.data, c.data.val, p.vocab, c.model);
  return p;
}

// The split used for final scores: test if present, else validation.
const std::string& eval_split(const RunConfig& c) {
  return fs::exists(c.data.resolve(c.data.test)) ? c.data.test : c.data.val;
}

app::TrainingRun train_logged(const RunConfig& c, const Prepared& p, const fs::path& out_dir) {
  std::ofstream log;
  if (!out_dir.empty()) log.open(out_dir / "train_log.jsonl");
  app::TrainCallbacks cb;
  cb.log = [&](const seq2seq::LogEntry& e) {
    if (log.is_open()) {
      json line{{"step", e.step}, {"loss", e.loss}, {"grad_norm", e.grad_norm}, {"val_bleu4", nullptr}};
      if (e.val_bleu4) line["val_bleu4"] = *e.val_bleu4;
      log << line.dump() << "\n" << std::flush;
    }
    if (e.val_bleu4) {
      std::cerr << "step " << e.step << " loss " << e.loss << " val BLEU-4 " << *e.val_bleu4 << "\n";
    } else if (c.train.eval_every > 0 && e.step % c.train.eval_every == 0) {
      std::cerr << "step " << e.step << " loss " << e.loss << "\n";
    }
  };
  if (!out_dir.empty()) {
    cb.on_best = [&](const seq2seq::Model& m, const ad::AdamState& a, std::size_t) {
      app::save_model(out_dir / "best.ckpt.json", m, p.vocab, c, &a);
    };
  }
  return app::train_model(c, p.vocab, p.train, p.val ? &*p.val : nullptr, cb);
}

int cmd_train(const RunConfig& c, const fs::path& out) {
  const auto p = prepare(c);
  app::echo_config(out, c.to_json());
  auto run = train_logged(c, p, out);
  app::save_model(out / "model.ckpt.json", run.model, p.vocab, c, &run.adam);
  json summary{{"steps", run.result.steps},
               {"final_loss", run.result.final_loss},
               {"early_stopped", run.result.early_stopped},
               {"vocab_size", p.vocab.size()}};
  if (run.result.best_val_bleu4) {
    summary["best_val_bleu4"] = *run.result.best_val_bleu4;
    summary["best_step"] = run.result.best_step;
  }
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

app::Dataset split_for(const app::LoadedModel& m, const RunConfig& c, const std::string& split,
                       const std::string& input) {
  auto data_config = m.config.data;
  data_config.root = c.data.root;
  data_config.features = c.data.features;
  const fs::path file = input.empty() ? data_config.resolve(split) : fs::path(input);
  require_file(file, "input dialogues");
  auto corpus = data::load_avsd(file, data_config.resolve(data_config.features), m.model.config().raw_feature_dim);
  return app::make_dataset(std::move(corpus.dialogues), std::move(corpus.features), m.vocab, data_config,
                           m.model.config());
}

std::string split_name(const std::string& flag, const RunConfig& c) {
  if (flag.empty()) return eval_split(c);
  if (flag == "train") return c.data.train;
  if (flag == "val") return c.data.val;
  if (flag == "test") return c.data.test;
  return flag;
}

int cmd_evaluate(const RunConfig& c, const std::string& hyp, const std::string& ref, const std::string& checkpoint,
                 const std::string& split, std::size_t multi_run, bool compare, const std::optional<std::size_t>& beam,
                 const fs::path& out) {
  const int sources = !hyp.empty() + !checkpoint.empty() + (multi_run > 0);
  if (sources != 1) throw UsageError("evaluate needs exactly one of --hyp/--ref, --checkpoint or --multi-run");
  if (compare && multi_run == 0) throw UsageError("--compare-reference only applies to --multi-run");
  json report;
  if (!hyp.empty()) {
    if (ref.empty()) throw UsageError("--hyp needs --ref");
    require_file(hyp, "hypothesis file");
    require_file(ref, "reference file");
    report = metrics::evaluate_files(hyp, ref).to_json();
  } else if (!checkpoint.empty()) {
    require_file(checkpoint, "checkpoint");
    const auto m = app::load_model(checkpoint);
    const auto data = split_for(m, c, split_name(split, c), "");
    const auto ev = app::evaluate_model(m.model, data, m.vocab, beam);
    report = ev.report.to_json();
    report["exact_match"] = ev.exact_match;
    if (!out.empty()) {
      write_lines(out / "hypotheses.txt", ev.hypotheses);
      write_lines(out / "references.txt", ev.references);
    }
  } else {
    std::vector<metrics::MetricReport> reports;
    for (std::size_t r = 0; r < multi_run; ++r) {
      auto run_config = c;
      run_config.train.seed = c.train.seed + r;
      const auto p = prepare(run_config);
      std::cerr << "run " << r + 1 << "/" << multi_run << " (seed " << run_config.train.seed << ")\n";
      auto run = train_logged(run_config, p, {});
      const auto data = app::load_split(c.data, eval_split(c), p.vocab, c.model);
      reports.push_back(app::evaluate_model(run.model, data, p.vocab).report);
    }
    report = app::summarize_runs(reports, compare ? &app::reference_scores(c.model.mode) : nullptr);
  }
  if (!out.empty()) {
    app::echo_config(out, c.to_json());
    write_json(out / "metrics.json", report);
  }
  std::cout << report.dump(2) << "\n";
  return kOk;
}

int cmd_infer(const RunConfig& c, const std::string& checkpoint, const std::string& split, const std::string& input,
              const std::optional<std::size_t>& beam, const fs::path& out, const std::string& attention_json) {
  require_file(checkpoint, "checkpoint");
  const auto m = app::load_model(checkpoint);
  const auto data = split_for(m, c, split_name(split, c), input);
  const std::size_t width = beam.value_or(m.model.config().beam_width);
  const auto decoded = seq2seq::decode_instances(m.model, data.instances, data.features, width,
                                                 m.model.config().max_decode_len);
  std::vector<std::string> lines;
  for (const auto& d : decoded) lines.push_back(m.vocab.to_text(d.tokens));
  write_lines(out, lines);
  if (!attention_json.empty()) {
    // Per-step attention comes from greedy decoding, which records it.
    json steps = json::array();
    for (const auto& inst : data.instances) {
      const auto mem = m.model.encode(data::make_batch({&inst}, data.features));
      const auto g = seq2seq::decode_greedy(m.model, mem, m.model.config().max_decode_len);
      steps.push_back({{"question_id", inst.question_id},
                       {"tokens", m.vocab.decode(g.tokens)},
                       {"question_attention", g.att_q},
                       {"dialogue_attention", g.att_d}});
    }
    write_json(attention_json, steps);
  }
  app::echo_config(out.has_parent_path() ? out.parent_path() : fs::path("."), c.to_json());
  std::cerr << "wrote " << lines.size() << " answers to " << out << "\n";
  return kOk;
}

int cmd_ablate(const RunConfig& c, const fs::path& out) {
  app::echo_config(out, c.to_json());
  std::vector<app::AblationRow> rows;
  for (const auto& v : app::ablation_variants()) {
    auto vc = c;
    vc.model.qgvr.tok_summ = v.tok_summ;
    vc.model.qgvr.gating = v.gating;
    const auto p = prepare(vc);
    std::cerr << "variant " << v.label << "\n";
    auto run = train_logged(vc, p, {});
    const auto data = app::load_split(vc.data, eval_split(vc), p.vocab, vc.model);
    const auto ev = app::evaluate_model(run.model, data, p.vocab);
    rows.push_back({v, ev.report, ev.exact_match, run.result.steps});
    app::save_model(out / ("model" + std::string(v.label == "full" ? "" : v.label) + ".ckpt.json"), run.model, p.vocab,
                    vc);
  }
  const auto table = app::format_ablation_table(rows);
  write_json(out / "ablation.json", app::ablation_to_json(rows));
  write_lines(out / "ablation.txt", {table});
  std::cout << table;
  return kOk;
}

int cmd_dump(const RunConfig& c, const std::string& checkpoint, const std::string& split,
             const std::vector<std::string>& ids, const fs::path& out) {
  require_file(checkpoint, "checkpoint");
  const auto m = app::load_model(checkpoint);
  const auto data = split_for(m, c, split_name(split, c), "");
  const auto dumps = app::dump_attention(m.model, data, m.vocab, ids);
  app::echo_config(out, c.to_json());
  app::write_attention_csv(out / "attention.csv", dumps);
  app::write_gate_csv(out / "gates.csv", dumps);
  json tokens = json::object();
  for (const auto& d : dumps) tokens[d.question_id] = d.tokens;
  write_json(out / "tokens.json", tokens);
  std::cerr << "dumped " << dumps.size() << " questions to " << out << "\n";
  return kOk;
}

int cmd_benchmark(const app::BenchmarkOptions& o, const fs::path& out) {
  const auto rows = app::run_benchmark(o);
  app::echo_config(out, {{"lengths", o.lengths},
                         {"tokens", o.tokens},
                         {"feature_dim", o.feature_dim},
                         {"baseline_hidden", o.baseline_hidden},
                         {"trials", o.trials},
                         {"seed", o.seed}});
  app::write_benchmark_csv(out / "benchmark.csv", rows);
  std::printf("%8s %8s %14s %12s %8s\n", "frames", "tokens", "summarize_ms", "bilstm_ms", "ratio");
  for (const auto& r : rows) {
    std::printf("%8zu %8zu %14.4f %12.4f %8.2f\n", r.frames, r.tokens, r.summarize_ms, r.bilstm_ms, r.ratio);
  }
  return kOk;
}

int cmd_synth(const data::SyntheticSpec& spec, const fs::path& out) {
  const auto corpus = data::generate_synthetic(spec);
  data::save_synthetic(corpus, out);
  // The planted-pattern corpus is meant to be fitted, so every split is the same set.
  fs::rename(out / "dialogs.json", out / "train.json");
  fs::copy_file(out / "train.json", out / "val.json", fs::copy_options::overwrite_existing);
  fs::copy_file(out / "train.json", out / "test.json", fs::copy_options::overwrite_existing);
  std::cerr << "wrote " << corpus.dialogues.size() << " dialogues to " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Question-guided video representations for video question answering"};
  cli.require_subcommand(1);
  Overrides ov;
  std::string out, hyp, ref, checkpoint, split, input, attention_json;
  std::size_t multi_run = 0;
  bool compare = false;
  std::vector<std::string> ids;

  auto* train = cli.add_subcommand("train", "Train a model and save checkpoints");
  ov.add_common(train);
  ov.add_model(train);
  ov.add_beam(train);
  ov.add_training(train);
  train->add_option("--out", out, "Output directory")->required();

  auto* evaluate = cli.add_subcommand("evaluate", "Score hypotheses, a checkpoint, or several training runs");
  ov.add_common(evaluate);
  ov.add_model(evaluate);
  ov.add_beam(evaluate);
  ov.add_training(evaluate);
  evaluate->add_option("--hyp", hyp, "Hypothesis file, one answer per line");
  evaluate->add_option("--ref", ref, "Reference file; several references separated by ' ||| '");
  evaluate->add_option("--checkpoint", checkpoint);
  evaluate->add_option("--split", split, "train, val, test or a file name under the data root");
  evaluate->add_option("--multi-run", multi_run, "Train and score this many seeds, report mean and std");
  evaluate->add_flag("--compare-reference", compare, "Compare multi-run means with published scores (15% band)");
  evaluate->add_option("--out", out, "Output directory");

  auto* infer = cli.add_subcommand("infer", "Decode answers with a trained model");
  ov.add_common(infer);
  ov.add_beam(infer);
  infer->add_option("--checkpoint", checkpoint)->required();
  infer->add_option("--split", split);
  infer->add_option("--input", input, "Dialogue JSON to answer (instead of a split)");
  infer->add_option("--out", out, "Answers file")->required();
  infer->add_option("--attention-json", attention_json, "Also write per-step decoder attention");

  auto* ablate = cli.add_subcommand("ablate", "Train and score the four video-module variants");
  ov.add_common(ablate);
  ov.add_model(ablate);
  ov.add_beam(ablate);
  ov.add_training(ablate);
  ablate->add_option("--out", out, "Output directory")->required();

  auto* dump = cli.add_subcommand("dump-attention", "Write frame attention and gate weights as CSV");
  ov.add_common(dump);
  dump->add_option("--checkpoint", checkpoint)->required();
  dump->add_option("--split", split);
  dump->add_option("--ids", ids, "Question ids (<video>#<turn>); all when omitted")->delimiter(',');
  dump->add_option("--out", out, "Output directory")->required();

  app::BenchmarkOptions bench;
  auto* benchmark = cli.add_subcommand("benchmark", "Time attention summaries against a BiLSTM over frames");
  benchmark->add_option("--lengths", bench.lengths, "Frame counts")->delimiter(',');
  benchmark->add_option("--tokens", bench.tokens, "Question tokens");
  benchmark->add_option("--trials", bench.trials, "Timed repetitions per length");
  benchmark->add_option("--seed", bench.seed);
  benchmark->add_option("--out", out, "Output directory")->required();

  data::SyntheticSpec spec;
  auto* synth = cli.add_subcommand("synth", "Generate the planted-pattern corpus");
  synth->add_option("--videos", spec.num_videos);
  synth->add_option("--frames", spec.frames);
  synth->add_option("--segments", spec.segments);
  synth->add_option("--patterns", spec.patterns);
  synth->add_option("--dim", spec.feature_dim, "Feature width");
  synth->add_option("--turns", spec.turns);
  synth->add_option("--two-segment-fraction", spec.two_segment_fraction);
  synth->add_option("--noise", spec.noise);
  synth->add_option("--seed", spec.seed);
  synth->add_option("--out", out, "Output directory")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*benchmark) return cmd_benchmark(bench, out);
    if (*synth) return cmd_synth(spec, out);
    const RunConfig c = ov.resolve();
    if (*train) return cmd_train(c, out);
    if (*evaluate) return cmd_evaluate(c, hyp, ref, checkpoint, split, multi_run, compare, ov.beam, out);
    if (*infer) return cmd_infer(c, checkpoint, split, input, ov.beam, out, attention_json);
    if (*ablate) return cmd_ablate(c, out);
    if (*dump) return cmd_dump(c, checkpoint, split, ids, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ad::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
