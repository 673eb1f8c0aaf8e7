// Desk-scale acceptance run. Prints one "A<n> PASS|FAIL ..." line per
// criterion and exits non-zero when any criterion fails. Criteria can be
// picked on the command line: `acceptance A1 A6`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "qgvr/app/analysis.hpp"
#include "qgvr/data/synthetic.hpp"

using namespace qgvr;
using seq2seq::DialogueMode;
using seq2seq::Model;
using seq2seq::ModelConfig;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, a);
  return buf;
}

// Toy models -------------------------------------------------------------------

ModelConfig toy_config(DialogueMode mode, std::size_t vocab, std::size_t raw) {
  ModelConfig c;
  c.mode = mode;
  c.vocab_size = vocab;
  c.embed_dim = 4;
  c.feature_dim = 4;
  c.raw_feature_dim = raw;
  c.guide_hidden = 2;
  c.question_hidden = 2;
  c.dialogue_hidden = 3;
  c.decoder_hidden = 4;
  c.attention_dim = 3;
  c.gate_hidden = 3;
  c.dropout = 0.0;
  c.init_bound = 0.5;
  return c;
}

data::FrameFeatures random_frames(std::size_t frames, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  data::FrameFeatures f{frames, dim, std::vector<float>(frames * dim)};
  for (auto& x : f.values) x = u(rng);
  return f;
}

std::vector<int> random_ids(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<int> out(n);
  for (auto& t : out) t = data::kReservedCount + static_cast<int>(rng() % (vocab - data::kReservedCount));
  return out;
}

data::TrainingInstance toy_instance(const std::string& video, std::vector<int> question, std::vector<int> context,
                                    const std::vector<int>& answer) {
  data::TrainingInstance t;
  t.video_id = video;
  t.question_id = video + "#0";
  t.question = std::move(question);
  t.context = std::move(context);
  t.answer = {data::kSosId};
  t.answer.insert(t.answer.end(), answer.begin(), answer.end());
  t.answer.push_back(data::kEosId);
  return t;
}

data::Batch batch_of(const std::vector<data::TrainingInstance>& items, const data::FeatureStore& store) {
  std::vector<const data::TrainingInstance*> ptrs;
  for (const auto& i : items) ptrs.push_back(&i);
  return data::make_batch(ptrs, store);
}

// A1 ---------------------------------------------------------------------------

Verdict gradient_integrity() {
  // K=4 question tokens, L=6 frames, M=5 context tokens, V=20, three decoder steps.
  constexpr std::size_t K = 4, L = 6, M = 5, V = 20, kRaw = 5;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    auto c = toy_config(DialogueMode::multi_turn, V, kRaw);
    c.tie_embeddings = seed % 2 == 0;
    Model m(c, seed);
    data::FeatureStore store;
    store.add("v", random_frames(L, kRaw, rng));
    const auto batch = batch_of({toy_instance("v", random_ids(K, V, rng), random_ids(M, V, rng), random_ids(2, V, rng))},
                                store);
    const auto res = testing::check_gradients([&] { return m.loss(batch); }, m.parameters(), 1e-5);
    checked += res.checked;
    if (res.max_rel_error > worst) {
      worst = res.max_rel_error;
      where = res.worst + " seed " + std::to_string(seed);
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0, "max rel err " + fmt("%.3g", worst) + " at " + where + ", " +
                                            std::to_string(checked) + " entries, " + fmt("%.1f", secs) + " s"};
}

// A2, A3, A4: training on the planted-pattern corpus ---------------------------

// Every video is asked about each of its segments, so a model cannot get by
// on remembering one answer per video.
data::SyntheticCorpus planted_corpus(std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.turns = spec.segments;
  spec.seed = seed;
  return data::generate_synthetic(spec);
}

app::RunConfig planted_recipe(std::size_t feature_dim, std::uint64_t seed) {
  app::RunConfig rc;
  rc.data.min_count = 1;
  auto& m = rc.model;
  m.mode = DialogueMode::single_turn;
  m.raw_feature_dim = feature_dim;
  m.embed_dim = 64;
  m.feature_dim = 64;
  m.guide_hidden = 32;
  m.question_hidden = 32;
  m.dialogue_hidden = 32;
  m.decoder_hidden = 64;
  m.attention_dim = 64;
  m.gate_hidden = 64;
  m.init_bound = 0.4;
  rc.learning_rate = 1e-3;
  rc.train.batch_size = 32;
  rc.train.max_steps = 2000;
  rc.train.seed = seed;
  return rc;
}

struct PlantedRun {
  data::Vocabulary vocab;
  app::Dataset data;
  std::unique_ptr<Model> model;
  double train_seconds = 0.0;
  std::size_t steps = 0;
};

PlantedRun train_planted(std::uint64_t seed, bool tok_summ, bool gating, bool verbose) {
  auto corpus = planted_corpus(seed);
  auto rc = planted_recipe(corpus.spec.feature_dim, seed);
  rc.model.qgvr.tok_summ = tok_summ;
  rc.model.qgvr.gating = gating;
  PlantedRun run;
  run.vocab = app::build_vocabulary(corpus.dialogues, rc.data);
  run.data = app::make_dataset(corpus.dialogues, corpus.store(), run.vocab, rc.data, rc.model);
  rc.model.vocab_size = run.vocab.size();
  run.model = std::make_unique<Model>(rc.model, rc.train.seed);
  auto adam = ad::AdamState::for_parameters(run.model->parameters(), {rc.learning_rate, 0.85, 0.997, 1e-6});
  data::BatchIterator batches(run.data.instances, run.data.features, rc.train.batch_size, rc.train.seed + 1);
  std::mt19937_64 dropout_rng(rc.train.seed + 2);
  const auto t0 = Clock::now();
  for (std::size_t step = 1; step <= rc.train.max_steps; ++step) {
    const auto s = seq2seq::train_step(*run.model, batches.next(), adam, dropout_rng, rc.train.clip_threshold);
    if (verbose && step % 250 == 0) {
      std::cout << "  step " << step << " loss " << fmt("%.4f", s.loss) << " (" << fmt("%.0f", seconds_since(t0))
                << " s)" << std::endl;
    }
  }
  run.train_seconds = seconds_since(t0);
  run.steps = rc.train.max_steps;
  return run;
}

std::unique_ptr<PlantedRun> shared_run;

PlantedRun& planted_run() {
  if (!shared_run) {
    std::cout << "training on the planted-pattern corpus" << std::endl;
    shared_run = std::make_unique<PlantedRun>(train_planted(1, true, true, true));
  }
  return *shared_run;
}

Verdict overfit_oracle() {
  auto& run = planted_run();
  const auto t0 = Clock::now();
  const auto tf = app::teacher_forced_stats(*run.model, run.data);
  const auto ev = app::evaluate_model(*run.model, run.data, run.vocab, 1);
  const double secs = run.train_seconds + seconds_since(t0);
  const bool pass = tf.token_accuracy >= 0.99 && tf.loss < 0.05 && ev.exact_match >= 0.95 && secs < 600.0;
  return {pass, std::to_string(run.data.dialogues.size()) + " videos, V=" + std::to_string(run.vocab.size()) + ", " +
                    std::to_string(run.steps) + " steps: token acc " + fmt("%.4f", tf.token_accuracy) + ", loss " +
                    fmt("%.4f", tf.loss) + ", greedy exact " + fmt("%.4f", ev.exact_match) + ", " + fmt("%.0f", secs) +
                    " s"};
}

Verdict attention_localization() {
  auto& run = planted_run();
  const auto content = app::attention_localization(*run.model, run.data, run.vocab, app::TokenFilter::content);
  const auto words = app::attention_localization(*run.model, run.data, run.vocab, app::TokenFilter::words);
  const bool pass = content.mean_mass > 0.6 && content.argmax_in_focus >= 0.9;
  return {pass, "content tokens (" + std::to_string(content.tokens) + "): mass " + fmt("%.3f", content.mean_mass) +
                    ", argmax in segment " + fmt("%.3f", content.argmax_in_focus) + "; all words: mass " +
                    fmt("%.3f", words.mean_mass) + ", argmax " + fmt("%.3f", words.argmax_in_focus)};
}

Verdict ablation_plumbing() {
  // Structural checks on random toy models.
  double tok_diff = 0.0, gate_diff = 0.0;
  bool gate_ones = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    data::FeatureStore store;
    store.add("v", random_frames(7, 5, rng));
    const auto batch = batch_of({toy_instance("v", random_ids(6, 12, rng), {data::kEmptyContextId}, {7})}, store);
    for (const auto& v : app::ablation_variants()) {
      auto c = toy_config(DialogueMode::multi_turn, 12, 5);
      c.qgvr.tok_summ = v.tok_summ;
      c.qgvr.gating = v.gating;
      Model m(c, seed);
      ad::NoGradGuard guard;
      const auto mem = m.encode(batch);
      const auto& s = mem.video.summaries;
      const auto& g = mem.video.gated;
      const std::size_t K = s.dim(1), D = s.dim(2);
      if (!v.tok_summ) {
        for (std::size_t k = 1; k < K; ++k)
          for (std::size_t d = 0; d < D; ++d) tok_diff = std::max(tok_diff, std::abs(s.at(0, k, d) - s.at(0, 0, d)));
      }
      if (!v.gating) {
        for (std::size_t i = 0; i < s.values().size(); ++i)
          gate_diff = std::max(gate_diff, std::abs(g.values()[i] - s.values()[i]));
        for (double x : mem.video.gate.values()) gate_ones = gate_ones && x == 1.0;
      }
    }
  }

  // Directional check: full model against -TokSumm-Gating on five corpora.
  std::vector<double> full, plain;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (bool ablated : {false, true}) {
      auto run = train_planted(seed, !ablated, !ablated, false);
      const double acc = app::evaluate_model(*run.model, run.data, run.vocab, 1).exact_match;
      (ablated ? plain : full).push_back(acc);
    }
    per_seed << " s" << seed << " " << fmt("%.3f", full.back()) << "/" << fmt("%.3f", plain.back());
    std::cout << "  seed " << seed << ": full " << full.back() << ", -TokSumm-Gating " << plain.back() << std::endl;
  }
  const double mf = app::mean_std(full).mean, mp = app::mean_std(plain).mean;
  const bool pass = tok_diff == 0.0 && gate_diff == 0.0 && gate_ones && mf >= mp;
  return {pass, "-TokSumm row diff " + fmt("%g", tok_diff) + ", -Gating |gated - v| " + fmt("%g", gate_diff) +
                    ", accuracy full " + fmt("%.3f", mf) + " vs -TokSumm-Gating " + fmt("%.3f", mp) + " (" +
                    per_seed.str().substr(1) + ")"};
}

// A5 ---------------------------------------------------------------------------

Verdict decoding_equivalence() {
  std::size_t greedy_ok = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const bool multi = seed % 2 == 1;
    auto c = toy_config(multi ? DialogueMode::multi_turn : DialogueMode::single_turn, 10, 5);
    c.init_bound = 1.5;
    Model m(c, seed);
    data::FeatureStore store;
    store.add("v", random_frames(3 + seed % 5, 5, rng));
    const auto ctx = multi ? random_ids(4, 10, rng) : std::vector<int>{};
    const auto mem = m.encode(batch_of({toy_instance("v", random_ids(3, 10, rng), ctx, {6})}, store));
    const auto g = seq2seq::decode_greedy(m, mem, 6);
    const auto b = seq2seq::decode_beam(m, mem, 1, 6);
    greedy_ok += g.tokens == b.tokens && g.finished == b.finished && g.log_prob == b.log_prob;
  }

  constexpr std::size_t V = 5, kMax = 3;
  std::size_t exhaustive_ok = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    auto c = toy_config(DialogueMode::single_turn, V, 5);
    c.init_bound = 2.0;
    c.length_normalize = seed % 2 == 0;
    Model m(c, 100 + seed);
    data::FeatureStore store;
    store.add("v", random_frames(4, 5, rng));
    const auto mem = m.encode(batch_of({toy_instance("v", {1, 4, 0}, {}, {4})}, store));
    ad::NoGradGuard guard;
    double best = -1e300;
    std::vector<int> best_tokens;
    std::function<void(std::vector<int>, ad::LstmState, int, double)> walk = [&](std::vector<int> seq,
                                                                                 ad::LstmState state, int prev,
                                                                                 double lp) {
      const auto step = m.decoder_step(mem, state, m.embed_decoder(std::vector<int>{prev}));
      const auto lsm = seq2seq::log_softmax(step.logits.values());
      for (int v = 0; v < static_cast<int>(V); ++v) {
        const double total = lp + lsm[static_cast<std::size_t>(v)];
        if (v == data::kEosId) {
          const double s = seq2seq::hypothesis_score(total, seq.size() + 1, c.length_normalize);
          if (s > best + 1e-12 || (std::abs(s - best) <= 1e-12 && seq < best_tokens)) {
            best = s;
            best_tokens = seq;
          }
        } else if (seq.size() + 1 < kMax) {
          auto next = seq;
          next.push_back(v);
          walk(next, step.state, v, total);
        }
      }
    };
    walk({}, m.initial_state(mem), data::kSosId, 0.0);
    const auto beam = seq2seq::decode_beam(m, mem, 125, kMax);
    exhaustive_ok += beam.finished && beam.tokens == best_tokens && std::abs(beam.score - best) <= 1e-10 * std::abs(best);
  }
  return {greedy_ok == 50 && exhaustive_ok == 20, "greedy == width 1 on " + std::to_string(greedy_ok) +
                                                     "/50 models; width 125 == exhaustive optimum on " +
                                                     std::to_string(exhaustive_ok) + "/20 models (V=5, max_len 3)"};
}

// A6 ---------------------------------------------------------------------------

metrics::Tokens words_of(const std::string& s) {
  return metrics::tokenize_for_metrics(s, metrics::Tokenization::whitespace);
}

Verdict metric_oracles() {
  using metrics::EvalCorpus;
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  const double b2 = metrics::bleu({{words_of("the cat sat"), {words_of("the cat sat down")}}}, 2);
  const double hand = 100.0 * std::exp(1.0 - 4.0 / 3.0) * std::sqrt(1.0 * 1.0);  // p1 = p2 = 1, BP = e^(1 - 4/3)
  expect(std::abs(b2 - hand) < 1e-9, "BLEU-2 example");

  EvalCorpus identity{{words_of("a man is slicing bread"), {words_of("a man is slicing bread")}},
                      {words_of("the dog runs across grass"), {words_of("the dog runs across grass")}},
                      {words_of("two kids play with water"), {words_of("two kids play with water")}}};
  const auto id = metrics::evaluate(identity);
  for (double b : id.bleu) expect(std::abs(b - 100.0) < 1e-9, "identity BLEU");
  expect(std::abs(id.rouge_l - 100.0) < 1e-9, "identity ROUGE-L");
  for (double s : metrics::cider_per_pair(identity)) expect(std::abs(s - 10.0) < 1e-9, "identity CIDEr per pair");

  EvalCorpus disjoint{{words_of("x y z w"), {words_of("a b c d")}}, {words_of("p q r s"), {words_of("e f g h")}}};
  const auto dj = metrics::evaluate(disjoint);
  for (double b : dj.bleu) expect(b == 0.0, "disjoint BLEU");
  expect(dj.rouge_l == 0.0 && dj.cider == 0.0, "disjoint ROUGE-L/CIDEr");

  std::mt19937_64 rng(17);
  auto word = [&](const std::string& p, std::size_t n) { return p + std::to_string(rng() % n); };
  for (int trial = 0; trial < 100; ++trial) {
    EvalCorpus corpus, same, apart;
    for (std::size_t i = 0, pairs = 2 + rng() % 6; i < pairs; ++i) {
      metrics::EvalPair p;
      for (std::size_t j = 0, n = 1 + rng() % 8; j < n; ++j) p.hypothesis.push_back(word("w", 6));
      for (std::size_t r = 0, nr = 1 + rng() % 3; r < nr; ++r) {
        metrics::Tokens ref;
        for (std::size_t j = 0, n = 1 + rng() % 8; j < n; ++j) ref.push_back(word("w", 6));
        p.references.push_back(ref);
      }
      corpus.push_back(p);
      metrics::Tokens ref, other;
      for (std::size_t j = 0, n = 4 + rng() % 5; j < n; ++j) ref.push_back(word("t", 50));
      for (std::size_t j = 0, n = 1 + rng() % 6; j < n; ++j) other.push_back(word("z", 50));
      same.push_back({ref, {ref}});
      apart.push_back({other, {ref}});
    }
    auto shuffled = corpus;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto r = metrics::evaluate(corpus), rs = metrics::evaluate(shuffled);
    const auto ri = metrics::evaluate(same), ra = metrics::evaluate(apart);
    for (int n = 0; n < 4; ++n) {
      expect(r.bleu[n] >= 0.0 && r.bleu[n] <= 100.0 + 1e-9, "BLEU range");
      expect(std::abs(r.bleu[n] - rs.bleu[n]) <= 1e-9, "BLEU order invariance");
      expect(std::abs(ri.bleu[n] - 100.0) <= 1e-9 && ra.bleu[n] == 0.0, "BLEU identity/disjoint");
    }
    expect(r.rouge_l >= 0.0 && r.rouge_l <= 100.0 + 1e-9, "ROUGE-L range");
    expect(std::abs(r.rouge_l - rs.rouge_l) <= 1e-9, "ROUGE-L order invariance");
    expect(std::abs(ri.rouge_l - 100.0) <= 1e-9 && ra.rouge_l == 0.0, "ROUGE-L identity/disjoint");
    expect(r.cider >= 0.0 && std::abs(r.cider - rs.cider) <= 1e-9, "CIDEr range and order invariance");
    for (double s : metrics::cider_per_pair(apart)) expect(s == 0.0, "CIDEr disjoint");
    for (double s : metrics::cider_per_pair(same)) expect(s <= 10.0 + 1e-9, "CIDEr identity bound");
  }
  std::set<std::string> unique(failures.begin(), failures.end());
  std::string detail = "BLEU-2 example " + fmt("%.10f", b2) + " (hand " + fmt("%.10f", hand) + ")";
  for (const auto& f : unique) detail += "; failed: " + f;
  if (unique.empty()) detail += "; identity, disjoint and 100 random corpora hold";
  return {unique.empty(), detail};
}

// A7 ---------------------------------------------------------------------------

Verdict efficiency() {
  app::BenchmarkOptions opt;
  opt.trials = 100;
  const auto rows = app::run_benchmark(opt);
  std::cout << "  frames tokens summarize_ms bilstm_ms ratio\n";
  double ratio_179 = 0.0;
  for (const auto& r : rows) {
    std::cout << "  " << r.frames << " " << r.tokens << " " << fmt("%.4f", r.summarize_ms) << " "
              << fmt("%.4f", r.bilstm_ms) << " " << fmt("%.1f", r.ratio) << "\n";
    if (r.frames == 179 && r.tokens == 8) ratio_179 = r.ratio;
  }
  return {ratio_179 > 1.0, "L=179, K=8: BiLSTM / per-token summary time ratio " + fmt("%.1f", ratio_179)};
}

// A8 ---------------------------------------------------------------------------

Verdict invariant_suites() {
  std::vector<std::string> suites;
  std::stringstream ss(QGVR_UNIT_TESTS);
  for (std::string item; std::getline(ss, item, ',');) suites.push_back(item);
  const auto t0 = Clock::now();
  std::vector<std::string> failed;
  for (const auto& exe : suites) {
    const std::string cmd = "\"" + exe + "\" --minimal > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) failed.push_back(exe.substr(exe.find_last_of('/') + 1));
  }
  const double secs = seconds_since(t0);
  std::string detail = std::to_string(suites.size() - failed.size()) + "/" + std::to_string(suites.size()) +
                       " suites pass in " + fmt("%.0f", secs) + " s";
  for (const auto& f : failed) detail += "; failed: " + f;
  return {failed.empty() && secs < 300.0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"A1", gradient_integrity},   {"A2", overfit_oracle},       {"A3", attention_localization},
      {"A4", ablation_plumbing},    {"A5", decoding_equivalence}, {"A6", metric_oracles},
      {"A7", efficiency},           {"A8", invariant_suites}};
  std::set<std::string> wanted(argv + 1, argv + argc);
  std::vector<std::string> lines;
  bool all = true;
  for (const auto& [name, run] : criteria) {
    if (!wanted.empty() && !wanted.count(name)) continue;
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    all = all && v.pass;
    lines.push_back(name + (v.pass ? " PASS " : " FAIL ") + v.detail);
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, l.find(' ', 3)) << "\n";
  return all ? 0 : 1;
}
