#include "qgvr/seq2seq/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qgvr::seq2seq {

using ad::Tensor;

double hypothesis_score(double log_prob, std::size_t length, bool length_normalize) {
  return length_normalize && length > 0 ? log_prob / static_cast<double>(length) : log_prob;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double hi = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - hi);
  const double lse = hi + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

namespace {

void require_single(const EncoderMemory& memory) {
  if (memory.batch != 1) throw std::invalid_argument("decoding expects encoder memories for exactly one example");
}

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  ad::LstmState state;
};

struct Candidate {
  std::size_t parent;
  int token;
  double log_prob;
  double score;
  std::vector<int> tokens;
};

// Higher score first; ties go to the lexicographically smaller sequence.
bool better(double score_a, const std::vector<int>& a, double score_b, const std::vector<int>& b) {
  if (score_a != score_b) return score_a > score_b;
  return a < b;
}

}  // namespace

DecodeResult decode_greedy(const Model& model, const EncoderMemory& memory, std::size_t max_len) {
  require_single(memory);
  ad::NoGradGuard guard;
  DecodeResult out;
  ad::LstmState state = model.initial_state(memory);
  int prev = data::kSosId;
  for (std::size_t n = 0; n < max_len; ++n) {
    auto step = model.decoder_step(memory, state, model.embed_decoder(std::vector<int>{prev}));
    state = step.state;
    out.att_q.push_back(to_vector(step.att_q));
    if (step.att_d.defined()) out.att_d.push_back(to_vector(step.att_d));
    const auto lp = log_softmax(step.logits.values());
    const int best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    out.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == data::kEosId) {
      out.finished = true;
      break;
    }
    out.tokens.push_back(best);
    prev = best;
  }
  const std::size_t length = out.tokens.size() + (out.finished ? 1 : 0);
  out.score = hypothesis_score(out.log_prob, length, model.config().length_normalize);
  return out;
}

DecodeResult decode_beam(const Model& model, const EncoderMemory& memory, std::size_t width, std::size_t max_len) {
  require_single(memory);
  if (width == 0) throw std::invalid_argument("beam width must be at least 1");
  ad::NoGradGuard guard;
  const bool normalize = model.config().length_normalize;
  std::vector<Hypothesis> live{{{}, 0.0, model.initial_state(memory)}};
  std::vector<DecodeResult> finished;

  for (std::size_t n = 1; n <= max_len && !live.empty(); ++n) {
    std::vector<Candidate> candidates;
    std::vector<ad::LstmState> next_states;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const int prev = live[h].tokens.empty() ? data::kSosId : live[h].tokens.back();
      auto step = model.decoder_step(memory, live[h].state, model.embed_decoder(std::vector<int>{prev}));
      next_states.push_back(step.state);
      const auto lp = log_softmax(step.logits.values());
      for (std::size_t v = 0; v < lp.size(); ++v) {
        Candidate c{h, static_cast<int>(v), live[h].log_prob + lp[v], 0.0, live[h].tokens};
        c.tokens.push_back(c.token);
        c.score = hypothesis_score(c.log_prob, n, normalize);
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) { return better(a.score, a.tokens, b.score, b.tokens); });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = candidates[i];
      if (c.token == data::kEosId) {
        DecodeResult r;
        r.tokens.assign(c.tokens.begin(), c.tokens.end() - 1);
        r.finished = true;
        r.log_prob = c.log_prob;
        r.score = c.score;
        finished.push_back(std::move(r));
      } else {
        next.push_back({std::move(c.tokens), c.log_prob, next_states[c.parent]});
      }
    }
    live = std::move(next);
  }

  std::vector<DecodeResult> pool = std::move(finished);
  if (pool.empty()) {
    for (auto& h : live) {
      DecodeResult r;
      r.tokens = std::move(h.tokens);
      r.log_prob = h.log_prob;
      r.score = hypothesis_score(h.log_prob, r.tokens.size(), normalize);
      pool.push_back(std::move(r));
    }
  }
  if (pool.empty()) return {};
  return *std::min_element(pool.begin(), pool.end(), [](const DecodeResult& a, const DecodeResult& b) {
    return better(a.score, a.tokens, b.score, b.tokens);
  });
}

std::vector<DecodeResult> decode_instances(const Model& model, const std::vector<data::TrainingInstance>& instances,
                                           const data::FeatureStore& features, std::size_t width, std::size_t max_len) {
  ad::NoGradGuard guard;
  std::vector<DecodeResult> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    const auto batch = data::make_batch({&inst}, features);
    const auto memory = model.encode(batch);
    out.push_back(width == 1 ? decode_greedy(model, memory, max_len) : decode_beam(model, memory, width, max_len));
  }
  return out;
}

}  // namespace qgvr::seq2seq
