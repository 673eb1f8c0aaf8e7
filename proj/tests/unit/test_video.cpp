#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "qgvr/video/guided_summary.hpp"

using namespace qgvr;
using ad::Tensor;
using qgvr::testing::check_gradients;
using qgvr::testing::random_tensor;

namespace {

ad::LstmWeights random_lstm(std::size_t in, std::size_t hidden, std::mt19937_64& rng, double scale = 0.5) {
  return {random_tensor({in, 4 * hidden}, rng, scale, true), random_tensor({hidden, 4 * hidden}, rng, scale, true),
          random_tensor({4 * hidden}, rng, scale, true)};
}

video::QgvrWeights random_weights(std::size_t raw, std::size_t embed, std::size_t width, std::size_t gate_hidden,
                                  std::mt19937_64& rng) {
  video::QgvrWeights w;
  w.w_proj = random_tensor({raw, width}, rng, 0.5, true);
  w.guide_forward = random_lstm(embed, width / 2, rng);
  w.guide_backward = random_lstm(embed, width / 2, rng);
  w.w_sim = random_tensor({3 * width}, rng, 0.8, true);
  w.w_g1 = random_tensor({gate_hidden, width}, rng, 0.8, true);
  w.b_g1 = random_tensor({width}, rng, 0.3, true);
  w.w_g2 = random_tensor({width, gate_hidden}, rng, 0.8, true);
  w.b_g2 = random_tensor({gate_hidden}, rng, 0.3, true);
  return w;
}

// Direct evaluation of W_sim . [x ; r ; x * r] for one pair, via explicit concatenation.
double trilinear_pair(std::span<const double> x, std::span<const double> r, std::span<const double> w) {
  std::vector<double> joined(x.begin(), x.end());
  joined.insert(joined.end(), r.begin(), r.end());
  for (std::size_t d = 0; d < x.size(); ++d) joined.push_back(x[d] * r[d]);
  double s = 0.0;
  for (std::size_t i = 0; i < joined.size(); ++i) s += w[i] * joined[i];
  return s;
}

std::span<const double> row(const Tensor& t, std::size_t i) {
  const std::size_t width = t.shape().back();
  return t.values().subspan(i * width, width);
}

}  // namespace

TEST_CASE("project_frames") {
  CHECK(video::kRawFeatureDim == 2048);
  CHECK(video::kFeatureDim == 256);

  std::mt19937_64 rng(1);
  auto raw = random_tensor({3, 8}, rng);
  std::vector<double> eye(8 * 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  auto r = video::project_frames(raw, Tensor::from({8, 4}, eye));
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t d = 0; d < 4; ++d) CHECK(r.at(l, d) == raw.at(l, d));
  }
  auto w = random_tensor({8, 4}, rng, 1.0, true);
  auto probe = random_tensor({3, 4}, rng);
  auto res = check_gradients([&] { return ad::sum(ad::mul(video::project_frames(raw, w), probe)); }, {{"W_proj", w}});
  CHECK(res.max_rel_error < 1e-6);
  CHECK_THROWS_AS(video::project_frames(raw, Tensor::zeros({7, 4})), ad::ShapeError);
}

TEST_CASE("encode_guide") {
  std::mt19937_64 rng(2);
  auto fw = random_lstm(5, 3, rng), bw = random_lstm(5, 3, rng);
  auto one = random_tensor({1, 1, 5}, rng);
  auto g = video::encode_guide(one, std::vector<std::size_t>{1}, fw, bw);
  for (std::size_t d = 0; d < 6; ++d) CHECK(g.sentence.at(0, d) == g.tokens.at(0, 0, d));

  ad::LstmWeights zero{Tensor::zeros({5, 12}, true), Tensor::zeros({3, 12}, true), Tensor::zeros({12}, true)};
  auto z = video::encode_guide(random_tensor({1, 4, 5}, rng), std::vector<std::size_t>{4}, zero, zero);
  for (double v : z.tokens.values()) CHECK(v == 0.0);

  // 128 hidden units per direction give token rows as wide as the projected frames.
  auto f128 = random_lstm(8, 128, rng, 0.08), b128 = random_lstm(8, 128, rng, 0.08);
  auto wide = video::encode_guide(random_tensor({1, 2, 8}, rng), std::vector<std::size_t>{2}, f128, b128);
  CHECK(wide.tokens.dim(2) == video::kFeatureDim);
  CHECK(wide.sentence.dim(1) == video::kFeatureDim);
}

TEST_CASE("trilinear_scores") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3}, rng);
  auto r = random_tensor({4, 3}, rng);
  auto zero = video::trilinear_scores(x, r, Tensor::zeros({9}));
  for (double v : zero.values()) CHECK(v == 0.0);

  std::vector<double> only_product(9, 0.0);
  std::fill(only_product.begin() + 6, only_product.end(), 1.0);
  auto dot = video::trilinear_scores(x, r, Tensor::from({9}, only_product));
  auto plain = video::dot_scores(x, r);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t l = 0; l < 4; ++l) {
      double expected = 0.0;
      for (std::size_t d = 0; d < 3; ++d) expected += x.at(k, d) * r.at(l, d);
      CHECK(dot.at(k, l) == doctest::Approx(expected).epsilon(1e-14));
      CHECK(plain.at(k, l) == doctest::Approx(expected).epsilon(1e-14));
    }
  }

  // K=2, L=3, d=2 against per-pair evaluation.
  auto xs = random_tensor({2, 2}, rng), rs = random_tensor({3, 2}, rng), ws = random_tensor({6}, rng);
  auto s = video::trilinear_scores(xs, rs, ws);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(s.at(k, l) == doctest::Approx(trilinear_pair(row(xs, k), row(rs, l), ws.values())).epsilon(1e-14));
    }
  }

  auto bx = random_tensor({2, 3, 4}, rng, 1.0, true), br = random_tensor({2, 5, 4}, rng, 1.0, true);
  auto bw = random_tensor({12}, rng, 1.0, true);
  auto probe = random_tensor({2, 3, 5}, rng);
  auto res = check_gradients([&] { return ad::sum(ad::mul(video::trilinear_scores(bx, br, bw), probe)); },
                             {{"x", bx}, {"r", br}, {"W_sim", bw}});
  CHECK(res.max_rel_error < 1e-6);
  CHECK_THROWS_AS(video::trilinear_scores(x, random_tensor({4, 2}, rng), ws), ad::ShapeError);
}

TEST_CASE("summarize_per_token") {
  std::mt19937_64 rng(4);
  auto r = random_tensor({5, 3}, rng);
  auto uniform = video::summarize_per_token(Tensor::zeros({2, 5}), r);
  for (std::size_t d = 0; d < 3; ++d) {
    double m = 0.0;
    for (std::size_t l = 0; l < 5; ++l) m += r.at(l, d);
    CHECK(uniform.summaries.at(1, d) == doctest::Approx(m / 5.0).epsilon(1e-14));
  }

  auto single = random_tensor({1, 3}, rng);
  auto one = video::summarize_per_token(random_tensor({4, 1}, rng, 9.0), single);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(one.attention.at(k, 0) == 1.0);
    for (std::size_t d = 0; d < 3; ++d) CHECK(one.summaries.at(k, d) == single.at(0, d));
  }

  auto scores = random_tensor({3, 5}, rng, 3.0);
  auto out = video::summarize_per_token(scores, r);
  for (std::size_t k = 0; k < 3; ++k) {
    double z = 0.0;
    for (std::size_t l = 0; l < 5; ++l) z += std::exp(scores.at(k, l));
    for (std::size_t d = 0; d < 3; ++d) {
      double v = 0.0;
      for (std::size_t l = 0; l < 5; ++l) v += std::exp(scores.at(k, l)) / z * r.at(l, d);
      CHECK(out.summaries.at(k, d) == doctest::Approx(v).epsilon(1e-12));
    }
  }

  // Masked frames receive exactly zero weight.
  auto masked = video::summarize_per_token(random_tensor({1, 2, 5}, rng), random_tensor({1, 5, 3}, rng),
                                           std::vector<std::uint8_t>{1, 1, 0, 1, 0});
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(masked.attention.at(0, k, 2) == 0.0);
    CHECK(masked.attention.at(0, k, 4) == 0.0);
  }
}

TEST_CASE("compute_gate and apply_gate") {
  auto x = Tensor::from({4}, {0.3, -1.0, 2.0, 0.5});
  auto g = video::compute_gate(x, Tensor::zeros({3, 4}), Tensor::zeros({4}), Tensor::zeros({4, 3}), Tensor::zeros({3}));
  for (double v : g.values()) CHECK(v == 0.5);

  std::mt19937_64 rng(5);
  auto closed = video::compute_gate(x, Tensor::zeros({3, 4}), Tensor::full({4}, -20.0), random_tensor({4, 3}, rng),
                                    random_tensor({3}, rng));
  for (double v : closed.values()) CHECK(v < 1e-8);

  auto wide = video::compute_gate(random_tensor({256}, rng), random_tensor({256, 256}, rng, 0.08), Tensor::zeros({256}),
                                  random_tensor({256, 256}, rng, 0.08), Tensor::zeros({256}));
  CHECK(wide.dim(0) == video::kFeatureDim);

  auto v = random_tensor({4, 6}, rng);
  auto same = video::apply_gate(v, Tensor::full({6}, 1.0));
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(same.values()[i] == v.values()[i]);
  auto shut = video::apply_gate(v, Tensor::full({6}, 1e-300));
  for (double e : shut.values()) CHECK(std::abs(e) < 1e-299);
  auto gate = random_tensor({6}, rng);
  auto gated = video::apply_gate(v, gate);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t d = 0; d < 6; ++d) CHECK(gated.at(k, d) == v.at(k, d) * gate.at(d));
  }
  CHECK_THROWS_AS(video::apply_gate(v, Tensor::zeros({5})), ad::ShapeError);
}

TEST_CASE("summarize_sentence_level") {
  std::mt19937_64 rng(6);
  auto x_sen = random_tensor({3}, rng);
  auto r = random_tensor({6, 3}, rng);
  auto w = random_tensor({9}, rng);
  auto out = video::summarize_sentence_level(x_sen, r, w, 4);
  for (std::size_t k = 1; k < 4; ++k) {
    for (std::size_t d = 0; d < 3; ++d) CHECK(out.summaries.at(k, d) == out.summaries.at(0, d));
  }
  auto lone = random_tensor({1, 3}, rng);
  auto one = video::summarize_sentence_level(x_sen, lone, w, 2);
  for (std::size_t d = 0; d < 3; ++d) CHECK(one.summaries.at(1, d) == lone.at(0, d));

  auto per_token = video::summarize_per_token(video::trilinear_scores(ad::reshape(x_sen, {1, 3}), r, w), r);
  auto sentence = video::summarize_sentence_level(x_sen, r, w, 1);
  for (std::size_t d = 0; d < 3; ++d) CHECK(sentence.summaries.at(0, d) == per_token.summaries.at(0, d));
}

TEST_CASE("run_qgvr composes the individual steps") {
  std::mt19937_64 rng(7);
  const std::size_t raw = 5, embed = 3, width = 4;
  auto w = random_weights(raw, embed, width, 3, rng);
  auto question = random_tensor({1, 2, embed}, rng);
  auto frames = random_tensor({1, 3, raw}, rng);
  std::vector<std::size_t> len{2};

  auto full = video::run_qgvr(question, len, frames, {}, w, {true, true});
  auto r = video::project_frames(frames, w.w_proj);
  auto guide = video::encode_guide(question, len, w.guide_forward, w.guide_backward);
  auto summary = video::summarize_per_token(video::trilinear_scores(guide.tokens, r, w.w_sim), r);
  auto gate = video::compute_gate(guide.sentence, w.w_g1, w.b_g1, w.w_g2, w.b_g2);
  auto gated = video::apply_gate(summary.summaries, gate);
  for (std::size_t i = 0; i < gated.size(); ++i) CHECK(full.gated.values()[i] == gated.values()[i]);
  for (std::size_t i = 0; i < summary.attention.size(); ++i) {
    CHECK(full.attention.values()[i] == summary.attention.values()[i]);
  }

  auto sent = video::run_qgvr(question, len, frames, {}, w, {false, true});
  for (std::size_t d = 0; d < width; ++d) CHECK(sent.summaries.at(0, 0, d) == sent.summaries.at(0, 1, d));
  auto ungated = video::run_qgvr(question, len, frames, {}, w, {true, false});
  for (std::size_t i = 0; i < ungated.gated.size(); ++i) CHECK(ungated.gated.values()[i] == ungated.summaries.values()[i]);
  for (double g : ungated.gate.values()) CHECK(g == 1.0);

  auto dot = video::run_qgvr(question, len, frames, {}, w, {true, true, video::Similarity::dot});
  CHECK(dot.gated.shape() == full.gated.shape());
}

TEST_CASE("guided summary invariants over random instances") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t tokens = 1 + rng() % 8, frames = 1 + rng() % 64, width = 4;
    auto x = random_tensor({tokens, width}, rng, 2.0);
    auto r = random_tensor({frames, width}, rng, 2.0);
    auto w = random_tensor({3 * width}, rng, 2.0);
    auto scores = video::trilinear_scores(x, r, w);
    auto out = video::summarize_per_token(scores, r);
    for (std::size_t k = 0; k < tokens; ++k) {
      double total = 0.0;
      for (std::size_t l = 0; l < frames; ++l) {
        CHECK(out.attention.at(k, l) >= 0.0);
        total += out.attention.at(k, l);
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
      // Convex hull of the frames, per coordinate.
      for (std::size_t d = 0; d < width; ++d) {
        double lo = r.at(0, d), hi = r.at(0, d);
        for (std::size_t l = 1; l < frames; ++l) {
          lo = std::min(lo, r.at(l, d));
          hi = std::max(hi, r.at(l, d));
        }
        CHECK(out.summaries.at(k, d) >= lo - 1e-9);
        CHECK(out.summaries.at(k, d) <= hi + 1e-9);
      }
    }

    // Shifting one score row leaves that attention row unchanged.
    const std::size_t k = rng() % tokens;
    std::vector<double> shifted(scores.values().begin(), scores.values().end());
    for (std::size_t l = 0; l < frames; ++l) shifted[k * frames + l] += 7.5;
    auto moved = video::summarize_per_token(Tensor::from({tokens, frames}, shifted), r);
    for (std::size_t l = 0; l < frames; ++l) CHECK(std::abs(moved.attention.at(k, l) - out.attention.at(k, l)) <= 1e-12);

    // Permuting frames together with their scores leaves summaries unchanged.
    std::vector<std::size_t> perm(frames);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> ps(tokens * frames), pr(frames * width);
    for (std::size_t l = 0; l < frames; ++l) {
      for (std::size_t kk = 0; kk < tokens; ++kk) ps[kk * frames + l] = scores.at(kk, perm[l]);
      for (std::size_t d = 0; d < width; ++d) pr[l * width + d] = r.at(perm[l], d);
    }
    auto permuted = video::summarize_per_token(Tensor::from({tokens, frames}, ps), Tensor::from({frames, width}, pr));
    for (std::size_t i = 0; i < out.summaries.size(); ++i) {
      CHECK(std::abs(permuted.summaries.values()[i] - out.summaries.values()[i]) <= 1e-12);
    }

    // Gate strictly inside (0, 1); gating is linear in the summary.
    auto gate = video::compute_gate(random_tensor({width}, rng, 3.0), random_tensor({3, width}, rng, 2.0),
                                    random_tensor({width}, rng), random_tensor({width, 3}, rng, 2.0),
                                    random_tensor({3}, rng));
    for (double g : gate.values()) CHECK((g > 0.0 && g < 1.0));
    const double lambda = 0.25 + static_cast<double>(rng() % 100) / 10.0;
    auto gated = video::apply_gate(out.summaries, gate);
    auto scaled = video::apply_gate(ad::scale(out.summaries, lambda), gate);
    for (std::size_t i = 0; i < gated.size(); ++i) {
      CHECK(scaled.values()[i] == doctest::Approx(lambda * gated.values()[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("every qgvr parameter receives gradient") {
  int all_nonzero = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    auto w = random_weights(6, 3, 4, 4, rng);
    auto question = random_tensor({2, 3, 3}, rng);
    auto frames = random_tensor({2, 5, 6}, rng);
    auto probe = random_tensor({2, 3, 4}, rng);
    auto out = video::run_qgvr(question, std::vector<std::size_t>{3, 2}, frames, {}, w, {});
    ad::backward(ad::sum(ad::mul(out.gated, probe)));
    bool ok = true;
    for (auto* t : {&w.w_proj, &w.guide_forward.w_x, &w.guide_forward.w_h, &w.guide_forward.bias, &w.guide_backward.w_x,
                    &w.guide_backward.w_h, &w.guide_backward.bias, &w.w_sim, &w.w_g1, &w.b_g1, &w.w_g2, &w.b_g2}) {
      const auto g = t->grad();
      ok = ok && std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    }
    all_nonzero += ok;
  }
  CHECK(all_nonzero == 20);
}

TEST_CASE("run_qgvr passes finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(2000 + seed);
    auto w = random_weights(5, 3, 4, 3, rng);
    auto question = random_tensor({2, 3, 3}, rng);
    auto frames = random_tensor({2, 4, 5}, rng);
    auto probe = random_tensor({2, 3, 4}, rng);
    std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 0, 0};
    for (bool tok : {true, false}) {
      auto loss = [&] {
        auto out = video::run_qgvr(question, std::vector<std::size_t>{3, 2}, frames, mask, w, {tok, true});
        return ad::sum(ad::mul(out.gated, probe));
      };
      auto res = check_gradients(loss, {{"W_proj", w.w_proj},
                                        {"guide.fw.W_x", w.guide_forward.w_x},
                                        {"guide.bw.W_h", w.guide_backward.w_h},
                                        {"W_sim", w.w_sim},
                                        {"W_g1", w.w_g1},
                                        {"b_g1", w.b_g1},
                                        {"W_g2", w.w_g2},
                                        {"b_g2", w.b_g2}});
      CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
    }
  }
}
