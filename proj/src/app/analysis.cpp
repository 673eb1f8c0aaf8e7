#include "qgvr/app/analysis.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace qgvr::app {

using nlohmann::json;

namespace {

std::vector<double> row_values(const ad::Tensor& t, std::size_t offset, std::size_t n) {
  const auto v = t.values().subspan(offset, n);
  return {v.begin(), v.end()};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw data::DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw data::DataError(path.string() + ": expected header '" + header + "'");
  }
  const auto columns = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',') + 1);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != columns) throw data::DataError(path.string() + ": malformed row '" + line + "'");
    rows.push_back(std::move(cells));
  }
  return rows;
}

template <typename F>
auto parse_cell(const fs::path& path, const std::string& cell, F&& convert) {
  try {
    std::size_t used = 0;
    auto v = convert(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::logic_error&) {
    throw data::DataError(path.string() + ": bad number '" + cell + "'");
  }
}

double to_double(const fs::path& path, const std::string& cell) {
  return parse_cell(path, cell, [](const std::string& s, std::size_t* n) { return std::stod(s, n); });
}

std::size_t to_index(const fs::path& path, const std::string& cell) {
  return parse_cell(path, cell, [](const std::string& s, std::size_t* n) { return std::stoul(s, n); });
}

void check_stream(const std::ofstream& out, const fs::path& path) {
  if (!out) throw data::DataError("cannot write " + path.string());
}

}  // namespace

std::vector<QuestionDump> dump_attention(const seq2seq::Model& model, const Dataset& data,
                                         const data::Vocabulary& vocab, const std::vector<std::string>& ids) {
  std::vector<const data::TrainingInstance*> chosen;
  if (ids.empty()) {
    for (const auto& inst : data.instances) chosen.push_back(&inst);
  } else {
    std::map<std::string, const data::TrainingInstance*> by_id;
    for (const auto& inst : data.instances) by_id[inst.question_id] = &inst;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw data::DataError("unknown question id '" + id + "'");
      chosen.push_back(it->second);
    }
  }
  ad::NoGradGuard guard;
  std::vector<QuestionDump> out;
  for (const auto* inst : chosen) {
    const auto batch = data::make_batch({inst}, data.features);
    const auto mem = model.encode(batch);
    const auto& att = mem.video.attention;
    const std::size_t K = att.dim(1), L = att.dim(2), D = mem.video.gate.dim(1);
    QuestionDump d{inst->question_id, {}, {}, row_values(mem.video.gate, 0, D)};
    for (std::size_t k = 0; k < K; ++k) {
      d.tokens.push_back(vocab.token(inst->question[k]));
      d.attention.push_back(row_values(att, k * L, L));
    }
    out.push_back(std::move(d));
  }
  return out;
}

void write_attention_csv(const fs::path& path, const std::vector<QuestionDump>& dumps) {
  std::ofstream out(path);
  out << "question_id,token_index,frame_index,weight\n";
  for (const auto& d : dumps) {
    for (std::size_t k = 0; k < d.attention.size(); ++k) {
      for (std::size_t l = 0; l < d.attention[k].size(); ++l) {
        out << d.question_id << ',' << k << ',' << l << ',' << fmt(d.attention[k][l]) << '\n';
      }
    }
  }
  check_stream(out, path);
}

void write_gate_csv(const fs::path& path, const std::vector<QuestionDump>& dumps) {
  std::ofstream out(path);
  out << "question_id,dim_index,gate_weight\n";
  for (const auto& d : dumps) {
    for (std::size_t i = 0; i < d.gate.size(); ++i) out << d.question_id << ',' << i << ',' << fmt(d.gate[i]) << '\n';
  }
  check_stream(out, path);
}

std::vector<AttentionRow> read_attention_csv(const fs::path& path) {
  std::vector<AttentionRow> rows;
  for (const auto& c : read_csv(path, "question_id,token_index,frame_index,weight")) {
    rows.push_back({c[0], to_index(path, c[1]), to_index(path, c[2]), to_double(path, c[3])});
  }
  return rows;
}

std::vector<GateRow> read_gate_csv(const fs::path& path) {
  std::vector<GateRow> rows;
  for (const auto& c : read_csv(path, "question_id,dim_index,gate_weight")) {
    rows.push_back({c[0], to_index(path, c[1]), to_double(path, c[2])});
  }
  return rows;
}

Localization attention_localization(const seq2seq::Model& model, const Dataset& data, const data::Vocabulary& vocab,
                                    TokenFilter filter) {
  ad::NoGradGuard guard;
  Localization loc;
  double mass = 0.0, hits = 0.0;
  for (const auto& inst : data.instances) {
    if (inst.focus.size() != 1) continue;
    const auto [lo, hi] = inst.focus[0];
    const auto mem = model.encode(data::make_batch({&inst}, data.features));
    const auto& att = mem.video.attention;
    const std::size_t L = att.dim(2);
    for (std::size_t k = 0; k < inst.question.size(); ++k) {
      const auto& token = vocab.token(inst.question[k]);
      if (data::is_punctuation(token) || (filter == TokenFilter::content && data::is_stopword(token))) continue;
      const auto row = att.values().subspan(k * L, L);
      double inside = 0.0;
      for (std::size_t l = lo; l < std::min(hi, L); ++l) inside += row[l];
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      mass += inside;
      hits += best >= lo && best < hi;
      ++loc.tokens;
    }
  }
  if (loc.tokens == 0) throw data::DataError("no instance carries a single focus range");
  loc.mean_mass = mass / static_cast<double>(loc.tokens);
  loc.argmax_in_focus = hits / static_cast<double>(loc.tokens);
  return loc;
}

const std::vector<Variant>& ablation_variants() {
  static const std::vector<Variant> variants = {
      {"full", true, true}, {"-TokSumm", false, true}, {"-Gating", true, false}, {"-TokSumm-Gating", false, false}};
  return variants;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "Model" << std::right << std::setw(9) << "BLEU-4" << std::setw(9) << "ROUGE-L"
     << std::setw(9) << "CIDEr" << std::setw(9) << "Exact" << "\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(18) << r.variant.label << std::right << std::setw(9) << r.report.bleu[3]
       << std::setw(9) << r.report.rouge_l << std::setw(9) << r.report.cider << std::setw(9) << 100.0 * r.exact_match
       << "\n";
  }
  return os.str();
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"variant", r.variant.label},
                   {"tok_summ", r.variant.tok_summ},
                   {"gating", r.variant.gating},
                   {"metrics", r.report.to_json()},
                   {"exact_match", r.exact_match},
                   {"steps", r.steps}});
  }
  return out;
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

std::array<double, 6> scores_of(const metrics::MetricReport& r) {
  return {r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, r.cider};
}

const ReferenceScores& reference_scores(data::DialogueMode mode) {
  // CIDEr is on this library's scale (identical pair = 10), i.e. a hundredth
  // of the figure usually printed in result tables.
  static const ReferenceScores single{"avsd-test-single-turn", {29.56, 18.60, 13.16, 9.77, 34.29, 1.0175}};
  static const ReferenceScores multi{"avsd-test-multi-turn", {30.52, 20.00, 14.46, 10.93, 36.62, 1.1328}};
  return mode == data::DialogueMode::single_turn ? single : multi;
}

json summarize_runs(const std::vector<metrics::MetricReport>& reports, const ReferenceScores* compare,
                    double tolerance) {
  json out{{"runs", reports.size()}};
  json per_run = json::array();
  for (const auto& r : reports) per_run.push_back(r.to_json());
  out["per_run"] = per_run;
  json summary;
  for (std::size_t m = 0; m < kScoreNames.size(); ++m) {
    std::vector<double> values;
    for (const auto& r : reports) values.push_back(scores_of(r)[m]);
    const auto ms = mean_std(values);
    json entry{{"mean", ms.mean}, {"std", ms.std}};
    if (compare != nullptr) {
      const double ref = compare->mean[m];
      const double rel = (ms.mean - ref) / ref;
      entry["reference"] = ref;
      entry["relative_difference"] = rel;
      entry["within_tolerance"] = std::abs(rel) <= tolerance;
    }
    summary[kScoreNames[m]] = entry;
  }
  out["summary"] = summary;
  if (compare != nullptr) {
    out["reference"] = compare->name;
    out["tolerance"] = tolerance;
  }
  return out;
}

std::vector<BenchmarkRow> run_benchmark(const BenchmarkOptions& o) {
  if (o.trials == 0 || o.tokens == 0 || o.lengths.empty()) throw UsageError("benchmark needs trials, tokens and lengths");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(-0.08, 0.08);
  auto random = [&](ad::Shape shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return ad::Tensor::from(std::move(shape), std::move(v));
  };
  const std::size_t D = o.feature_dim, H = o.baseline_hidden, G = D;
  const auto w_sim = random({3 * D});
  const auto w_g1 = random({G, D}), b_g1 = random({D}), w_g2 = random({D, G}), b_g2 = random({G});
  const ad::LstmWeights fw{random({D, 4 * H}), random({H, 4 * H}), random({4 * H})};
  const ad::LstmWeights bw{random({D, 4 * H}), random({H, 4 * H}), random({4 * H})};

  ad::NoGradGuard guard;
  std::vector<BenchmarkRow> rows;
  for (const std::size_t L : o.lengths) {
    const auto frames = random({1, L, D});
    const auto tokens = random({1, o.tokens, D});
    const auto sentence = random({1, D});
    const std::size_t lengths[] = {L};
    auto summarize = [&] {
      auto s = video::summarize_per_token(video::trilinear_scores(tokens, frames, w_sim), frames);
      return video::apply_gate(s.summaries, video::compute_gate(sentence, w_g1, b_g1, w_g2, b_g2));
    };
    auto recurrent = [&] { return ad::bilstm(frames, lengths, fw, bw).tokens; };
    // Warm-up doubles as a shape check.
    if (summarize().shape() != ad::Shape{1, o.tokens, D}) throw std::logic_error("benchmark: bad summary shape");
    if (recurrent().shape() != ad::Shape{1, L, 2 * H}) throw std::logic_error("benchmark: bad BiLSTM shape");

    double t_sum = 0.0, t_rnn = 0.0;
    for (std::size_t t = 0; t < o.trials; ++t) {
      auto t0 = std::chrono::steady_clock::now();
      auto a = summarize();
      auto t1 = std::chrono::steady_clock::now();
      auto b = recurrent();
      auto t2 = std::chrono::steady_clock::now();
      t_sum += std::chrono::duration<double, std::milli>(t1 - t0).count();
      t_rnn += std::chrono::duration<double, std::milli>(t2 - t1).count();
    }
    BenchmarkRow row{L, o.tokens, t_sum / static_cast<double>(o.trials), t_rnn / static_cast<double>(o.trials), 0.0};
    row.ratio = row.bilstm_ms / row.summarize_ms;
    rows.push_back(row);
  }
  return rows;
}

void write_benchmark_csv(const fs::path& path, const std::vector<BenchmarkRow>& rows) {
  std::ofstream out(path);
  out << "frames,tokens,summarize_ms,bilstm_ms,ratio\n";
  for (const auto& r : rows) {
    out << r.frames << ',' << r.tokens << ',' << fmt(r.summarize_ms) << ',' << fmt(r.bilstm_ms) << ',' << fmt(r.ratio)
        << '\n';
  }
  check_stream(out, path);
}

std::vector<BenchmarkRow> read_benchmark_csv(const fs::path& path) {
  std::vector<BenchmarkRow> rows;
  for (const auto& c : read_csv(path, "frames,tokens,summarize_ms,bilstm_ms,ratio")) {
    rows.push_back({to_index(path, c[0]), to_index(path, c[1]), to_double(path, c[2]), to_double(path, c[3]),
                    to_double(path, c[4])});
  }
  return rows;
}

}  // namespace qgvr::app
