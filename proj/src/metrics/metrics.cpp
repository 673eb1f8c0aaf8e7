#include "qgvr/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "qgvr/data/text.hpp"

namespace qgvr::metrics {

namespace {

constexpr int kCiderOrder = 4;

using NgramCounts = std::map<Tokens, double>;

NgramCounts ngrams(const Tokens& tokens, int n) {
  NgramCounts out;
  const auto len = static_cast<int>(tokens.size());
  for (int i = 0; i + n <= len; ++i) ++out[Tokens(tokens.begin() + i, tokens.begin() + i + n)];
  return out;
}

void require_corpus(const EvalCorpus& corpus, const char* what) {
  if (corpus.empty()) throw std::invalid_argument(std::string(what) + ": empty corpus");
  for (const auto& p : corpus) {
    if (p.references.empty()) throw std::invalid_argument(std::string(what) + ": pair without references");
  }
}

std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu(const EvalCorpus& corpus, int n) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu: order must be in 1..4");
  require_corpus(corpus, "bleu");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (const auto& p : corpus) {
    const auto c = static_cast<double>(p.hypothesis.size());
    hyp_len += c;
    // Closest reference length; the shorter one wins a tie.
    double best = -1.0;
    for (const auto& r : p.references) {
      const auto len = static_cast<double>(r.size());
      if (best < 0.0 || std::abs(len - c) < std::abs(best - c) || (std::abs(len - c) == std::abs(best - c) && len < best)) {
        best = len;
      }
    }
    ref_len += best;
    for (int k = 1; k <= n; ++k) {
      const auto hyp = ngrams(p.hypothesis, k);
      NgramCounts max_ref;
      for (const auto& r : p.references) {
        for (const auto& [g, cnt] : ngrams(r, k)) max_ref[g] = std::max(max_ref[g], cnt);
      }
      for (const auto& [g, cnt] : hyp) {
        auto it = max_ref.find(g);
        matched[static_cast<std::size_t>(k - 1)] += std::min(cnt, it == max_ref.end() ? 0.0 : it->second);
        total[static_cast<std::size_t>(k - 1)] += cnt;
      }
    }
  }
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[static_cast<std::size_t>(k)] == 0.0) return 0.0;
    log_sum += std::log(matched[static_cast<std::size_t>(k)] / total[static_cast<std::size_t>(k)]) / n;
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_sum);
}

double rouge_l(const EvalCorpus& corpus, double beta) {
  require_corpus(corpus, "rouge_l");
  double sum = 0.0;
  for (const auto& p : corpus) {
    double prec = 0.0, rec = 0.0;
    for (const auto& r : p.references) {
      const auto m = static_cast<double>(lcs(p.hypothesis, r));
      if (!p.hypothesis.empty()) prec = std::max(prec, m / static_cast<double>(p.hypothesis.size()));
      if (!r.empty()) rec = std::max(rec, m / static_cast<double>(r.size()));
    }
    if (prec > 0.0 && rec > 0.0) sum += (1.0 + beta * beta) * prec * rec / (rec + beta * beta * prec);
  }
  return 100.0 * sum / static_cast<double>(corpus.size());
}

std::vector<double> cider_per_pair(const EvalCorpus& corpus, const CiderOptions& options) {
  require_corpus(corpus, "cider");
  if (corpus.size() < 2) throw std::invalid_argument("cider: needs at least two pairs to estimate document frequencies");

  // Document frequency over reference sets.
  std::map<Tokens, double> df;
  for (const auto& p : corpus) {
    std::map<Tokens, bool> seen;
    for (const auto& r : p.references) {
      for (int k = 1; k <= kCiderOrder; ++k) {
        for (const auto& entry : ngrams(r, k)) seen[entry.first] = true;
      }
    }
    for (const auto& entry : seen) df[entry.first] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(corpus.size()));

  struct Vec {
    std::vector<NgramCounts> weights;
    std::vector<double> norms;
    double length;
  };
  auto to_vec = [&](const Tokens& tokens) {
    Vec v{std::vector<NgramCounts>(kCiderOrder), std::vector<double>(kCiderOrder, 0.0),
          static_cast<double>(tokens.size())};
    for (int k = 1; k <= kCiderOrder; ++k) {
      auto& w = v.weights[static_cast<std::size_t>(k - 1)];
      for (const auto& [g, tf] : ngrams(tokens, k)) {
        auto it = df.find(g);
        const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        w[g] = tf * (log_docs - d);
        v.norms[static_cast<std::size_t>(k - 1)] += w[g] * w[g];
      }
      v.norms[static_cast<std::size_t>(k - 1)] = std::sqrt(v.norms[static_cast<std::size_t>(k - 1)]);
    }
    return v;
  };

  std::vector<double> scores;
  scores.reserve(corpus.size());
  for (const auto& p : corpus) {
    const Vec hyp = to_vec(p.hypothesis);
    double total = 0.0;
    for (const auto& r : p.references) {
      const Vec ref = to_vec(r);
      const double delta = hyp.length - ref.length;
      for (std::size_t k = 0; k < static_cast<std::size_t>(kCiderOrder); ++k) {
        double dot = 0.0;
        for (const auto& [g, wh] : hyp.weights[k]) {
          auto it = ref.weights[k].find(g);
          if (it == ref.weights[k].end()) continue;
          dot += (options.clip_counts ? std::min(wh, it->second) : wh) * it->second;
        }
        if (hyp.norms[k] != 0.0 && ref.norms[k] != 0.0) dot /= hyp.norms[k] * ref.norms[k];
        if (options.sigma > 0.0) dot *= std::exp(-(delta * delta) / (2.0 * options.sigma * options.sigma));
        total += dot;
      }
    }
    scores.push_back(10.0 * total / kCiderOrder / static_cast<double>(p.references.size()));
  }
  return scores;
}

double cider(const EvalCorpus& corpus, const CiderOptions& options) {
  const auto per_pair = cider_per_pair(corpus, options);
  double s = 0.0;
  for (double v : per_pair) s += v;
  return s / static_cast<double>(per_pair.size());
}

Tokens tokenize_for_metrics(const std::string& line, Tokenization mode) {
  if (mode == Tokenization::internal) return data::tokenize(line);
  Tokens out;
  std::istringstream is(line);
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

MetricReport evaluate(const EvalCorpus& corpus, const CiderOptions& cider_options) {
  require_corpus(corpus, "evaluate");
  MetricReport r;
  for (int n = 1; n <= 4; ++n) r.bleu[n - 1] = bleu(corpus, n);
  r.rouge_l = rouge_l(corpus);
  r.cider = corpus.size() >= 2 ? cider(corpus, cider_options) : 0.0;
  r.cider_options = cider_options;
  r.pairs = corpus.size();
  for (const auto& p : corpus) r.hypothesis_tokens += p.hypothesis.size();
  return r;
}

nlohmann::json MetricReport::to_json() const {
  return {{"bleu1", bleu[0]},
          {"bleu2", bleu[1]},
          {"bleu3", bleu[2]},
          {"bleu4", bleu[3]},
          {"rouge_l", rouge_l},
          {"cider", cider},
          {"counts", {{"pairs", pairs}, {"hypothesis_tokens", hypothesis_tokens}}},
          {"settings",
           {{"rouge_beta", rouge_beta},
            {"cider_sigma", cider_options.sigma},
            {"cider_clip_counts", cider_options.clip_counts},
            {"tokenization", tokenization == Tokenization::internal ? "internal" : "whitespace"},
            {"note", "absolute scores depend on preprocessing and are only approximately comparable to external toolkits"}}}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  for (int n = 1; n <= 4; ++n) r.bleu[n - 1] = j.at("bleu" + std::to_string(n)).get<double>();
  r.rouge_l = j.at("rouge_l").get<double>();
  r.cider = j.at("cider").get<double>();
  r.pairs = j.at("counts").at("pairs").get<std::size_t>();
  r.hypothesis_tokens = j.at("counts").at("hypothesis_tokens").get<std::size_t>();
  const auto& s = j.at("settings");
  r.rouge_beta = s.at("rouge_beta").get<double>();
  r.cider_options.sigma = s.at("cider_sigma").get<double>();
  r.cider_options.clip_counts = s.at("cider_clip_counts").get<bool>();
  r.tokenization = s.at("tokenization").get<std::string>() == "whitespace" ? Tokenization::whitespace
                                                                          : Tokenization::internal;
  return r;
}

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

EvalCorpus read_corpus(const std::filesystem::path& hypotheses, const std::filesystem::path& references,
                       Tokenization mode) {
  const auto hyps = read_lines(hypotheses);
  const auto refs = read_lines(references);
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("misaligned corpora: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                std::to_string(refs.size()) + " references");
  }
  EvalCorpus corpus;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    EvalPair p{tokenize_for_metrics(hyps[i], mode), {}};
    std::size_t start = 0;
    const std::string sep = " ||| ";
    while (true) {
      const auto pos = refs[i].find(sep, start);
      p.references.push_back(tokenize_for_metrics(refs[i].substr(start, pos - start), mode));
      if (pos == std::string::npos) break;
      start = pos + sep.size();
    }
    corpus.push_back(std::move(p));
  }
  return corpus;
}

MetricReport evaluate_files(const std::filesystem::path& hypotheses, const std::filesystem::path& references,
                            Tokenization mode, const CiderOptions& cider_options) {
  auto report = evaluate(read_corpus(hypotheses, references, mode), cider_options);
  report.tokenization = mode;
  return report;
}

}  // namespace qgvr::metrics
