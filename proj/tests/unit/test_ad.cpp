#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "gradcheck.hpp"
#include "qgvr/ad/checkpoint.hpp"
#include "qgvr/ad/ops.hpp"
#include "qgvr/ad/optim.hpp"

using namespace qgvr::ad;
using qgvr::testing::check_gradients;
using qgvr::testing::random_tensor;

namespace {

void check_values(const Tensor& t, std::initializer_list<double> expected, double tol = 0.0) {
  REQUIRE(t.size() == expected.size());
  std::size_t i = 0;
  for (double e : expected) {
    CHECK(std::abs(t.values()[i] - e) <= tol);
    ++i;
  }
}

LstmWeights random_lstm(std::size_t in, std::size_t hidden, std::mt19937_64& rng, double scale = 0.5) {
  return {random_tensor({in, 4 * hidden}, rng, scale, true), random_tensor({hidden, 4 * hidden}, rng, scale, true),
          random_tensor({4 * hidden}, rng, scale, true)};
}

}  // namespace

TEST_CASE("matmul") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  check_values(matmul(eye, m), {1, 2, 3, 4});
  check_values(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})), {11});
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);

  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng, 1.0, true);
  auto b = random_tensor({4, 2}, rng, 1.0, true);
  auto r = check_gradients([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("concat") {
  auto a = Tensor::from({2, 1}, {1, 2});
  auto b = Tensor::from({2, 1}, {3, 4});
  check_values(concat({a, b}, 1), {1, 3, 2, 4});
  auto single = concat({a}, 0);
  CHECK(single.shape() == a.shape());
  check_values(single, {1, 2});
  CHECK_THROWS_AS(concat({Tensor::zeros({2, 1}), Tensor::zeros({3, 1})}, 1), ShapeError);

  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3}, rng, 1.0, true);
  auto y = random_tensor({2, 2}, rng, 1.0, true);
  auto w = random_tensor({2, 5}, rng);
  auto r = check_gradients([&] { return sum(mul(concat({x, y}, 1), w)); }, {{"x", x}, {"y", y}});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("elementwise") {
  auto x = Tensor::from({3}, {1, 2, 3});
  check_values(elementwise(x, Tensor::zeros({3}), Elementwise::mul), {0, 0, 0});
  check_values(elementwise(x, Tensor::zeros({3}), Elementwise::add), {1, 2, 3});
  CHECK_THROWS_AS(elementwise(x, Tensor::zeros({2}), Elementwise::add), ShapeError);

  std::mt19937_64 rng(3);
  auto a = random_tensor({5}, rng, 1.0, true);
  auto b = random_tensor({5}, rng, 1.0, true);
  qgvr::ad::backward(sum(mul(a, b)));
  for (std::size_t i = 0; i < 5; ++i) CHECK(a.grad()[i] == b.values()[i]);
  auto r = check_gradients([&] { return sum(mul(a, b)); }, {{"a", a}, {"b", b}});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("activations") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(relu(Tensor::scalar(-3.0)).item() == 0.0);
  CHECK(relu(Tensor::scalar(3.0)).item() == 3.0);
  auto big = sigmoid(Tensor::from({2}, {-800.0, 800.0}));
  CHECK(big.values()[0] >= 0.0);
  CHECK(big.values()[1] <= 1.0);

  std::mt19937_64 rng(4);
  auto x = random_tensor({6}, rng, 2.0, true);
  auto r = check_gradients([&] { return sum(tanh(x)); }, {{"x", x}});
  CHECK(r.max_rel_error < 1e-6);
  r = check_gradients([&] { return sum(sigmoid(x)); }, {{"x", x}});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax") {
  check_values(softmax(Tensor::from({2}, {0, 0})), {0.5, 0.5});
  check_values(softmax(Tensor::from({1}, {-123.4})), {1.0});
  CHECK_THROWS_AS(Tensor::zeros({0}), ShapeError);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    auto s = random_tensor({n}, rng, 5.0);
    std::vector<double> shifted(s.values().begin(), s.values().end());
    for (auto& v : shifted) v += 10.0;
    auto p = softmax(s);
    auto q = softmax(Tensor::from({n}, shifted));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p.values()[i] >= 0.0);
      CHECK(std::abs(p.values()[i] - q.values()[i]) <= 1e-12);
      total += p.values()[i];
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }

  auto masked = masked_softmax(Tensor::from({3}, {5.0, 1.0, 2.0}), std::vector<std::uint8_t>{0, 1, 1});
  CHECK(masked.values()[0] == 0.0);
  CHECK_THROWS_AS(masked_softmax(Tensor::from({2}, {1, 2}), std::vector<std::uint8_t>{0, 0}), ShapeError);
}

TEST_CASE("lstm_cell") {
  const std::size_t in = 3, hidden = 2;
  LstmWeights zero{Tensor::zeros({in, 4 * hidden}, true), Tensor::zeros({hidden, 4 * hidden}, true),
                   Tensor::zeros({4 * hidden}, true)};
  LstmState start{Tensor::zeros({hidden}), Tensor::zeros({hidden})};
  auto s = lstm_cell(Tensor::from({in}, {0.3, -2.0, 5.0}), start, zero);
  check_values(s.h, {0, 0});
  check_values(s.c, {0, 0});

  // Saturated forget gate carries the previous cell: c = c_prev + i * g.
  std::mt19937_64 rng(6);
  auto w = random_lstm(in, hidden, rng);
  std::vector<double> bias(w.bias.values().begin(), w.bias.values().end());
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = 60.0;
  LstmWeights sat{w.w_x, w.w_h, Tensor::from({4 * hidden}, bias)};
  auto x = random_tensor({in}, rng);
  LstmState prev{random_tensor({hidden}, rng), Tensor::from({hidden}, {0.7, -0.4})};
  auto next = lstm_cell(x, prev, sat);
  auto gates = add_bias(add(matmul(x, sat.w_x), matmul(prev.h, sat.w_h)), sat.bias);
  for (std::size_t j = 0; j < hidden; ++j) {
    const double i = 1.0 / (1.0 + std::exp(-gates.values()[j]));
    const double g = std::tanh(gates.values()[2 * hidden + j]);
    CHECK(next.c.values()[j] == doctest::Approx(prev.c.values()[j] + i * g).epsilon(1e-12));
  }

  // Three unrolled steps, gradients of every weight block.
  auto x0 = random_tensor({2, in}, rng), x1 = random_tensor({2, in}, rng), x2 = random_tensor({2, in}, rng);
  auto probe = random_tensor({2, hidden}, rng);
  auto loss = [&] {
    LstmState st{Tensor::zeros({2, hidden}), Tensor::zeros({2, hidden})};
    for (const auto& xt : {x0, x1, x2}) st = lstm_cell(xt, st, w);
    return sum(add(mul(st.h, probe), mul(st.c, st.c)));
  };
  auto r = check_gradients(loss, {{"w_x", w.w_x}, {"w_h", w.w_h}, {"b", w.bias}});
  CHECK(r.max_rel_error < 1e-4);
  CHECK_THROWS_AS(lstm_cell(Tensor::zeros({4}), start, zero), ShapeError);
}

TEST_CASE("bilstm padding matches unpadded rows") {
  std::mt19937_64 rng(7);
  const std::size_t in = 3, hidden = 2, steps = 5;
  auto fw = random_lstm(in, hidden, rng), bw = random_lstm(in, hidden, rng);
  auto padded = random_tensor({2, steps, in}, rng);
  std::vector<std::size_t> lengths{3, 5};
  auto out = bilstm(padded, lengths, fw, bw);

  auto row0 = slice(select(padded, 0, 0), 0, 0, 3);
  auto alone = bilstm(reshape(row0, {1, 3, in}), std::vector<std::size_t>{3}, fw, bw);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t d = 0; d < 2 * hidden; ++d) CHECK(out.tokens.at(0, t, d) == alone.tokens.at(0, t, d));
  }
  for (std::size_t d = 0; d < 2 * hidden; ++d) CHECK(out.sentence.at(0, d) == alone.sentence.at(0, d));

  // Sentence vector = forward state at the last step concatenated with backward state at step 0.
  for (std::size_t d = 0; d < hidden; ++d) {
    CHECK(out.sentence.at(1, d) == out.tokens.at(1, steps - 1, d));
    CHECK(out.sentence.at(1, hidden + d) == out.tokens.at(1, 0, hidden + d));
  }
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(8);
  auto x = random_tensor({10}, rng);
  CHECK(dropout(x, 0.0, true, rng).same_storage(x));
  CHECK(dropout(x, 0.7, false, rng).same_storage(x));
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), std::invalid_argument);
  CHECK_THROWS_AS(dropout(x, -0.1, true, rng), std::invalid_argument);

  const std::size_t n = 100000;
  auto ones = Tensor::full({n}, 1.0);
  auto y = dropout(ones, 0.2, true, rng);
  std::size_t survivors = 0;
  double total = 0.0;
  for (double v : y.values()) {
    survivors += v != 0.0;
    total += v;
  }
  CHECK(std::abs(static_cast<double>(survivors) / n - 0.8) <= 0.01);
  CHECK(std::abs(total / n - 1.0) <= 0.02);
}

TEST_CASE("cross_entropy_loss") {
  auto sure = Tensor::from({1, 3}, {0.0, 1000.0, 0.0});
  CHECK(cross_entropy_loss(sure, std::vector<int>{1}, -1).item() == 0.0);
  auto uniform = Tensor::zeros({1, 4});
  CHECK(cross_entropy_loss(uniform, std::vector<int>{2}, -1).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(std::abs(std::log(4.0) - 1.3863) < 1e-4);
  CHECK_THROWS_AS(cross_entropy_loss(uniform, std::vector<int>{4}, -1), std::out_of_range);

  // Padding rows are ignored in both the value and the mean.
  auto two = Tensor::from({2, 2}, {0.0, 0.0, 3.0, -1.0});
  CHECK_THROWS_AS(cross_entropy_loss(two, std::vector<int>{0, 0}, 0), std::invalid_argument);
  CHECK(cross_entropy_loss(two, std::vector<int>{1, 0}, 0).item() == doctest::Approx(std::log(2.0)));

  std::mt19937_64 rng(9);
  auto logits = random_tensor({5, 7}, rng, 2.0, true);
  std::vector<int> targets{0, 6, 3, 0, 2};
  auto r = check_gradients([&] { return cross_entropy_loss(logits, targets, 0); }, {{"logits", logits}});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("clip_gradients") {
  ModelParameters params;
  params.add("g", Tensor::zeros({2}, true), InitSpec::zeros());
  auto grad = params.get("g").tensor.mutable_grad();
  grad[0] = 3.0;
  grad[1] = 4.0;
  CHECK(kDefaultClipThreshold == 2.0);
  CHECK(clip_gradients(params, 2.0) == 5.0);
  CHECK(params.get("g").tensor.grad()[0] == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(params.get("g").tensor.grad()[1] == doctest::Approx(1.6).epsilon(1e-15));
  CHECK(clip_gradients(params, 2.0) == doctest::Approx(2.0));
  CHECK(params.get("g").tensor.grad()[0] == doctest::Approx(1.2).epsilon(1e-15));

  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    ModelParameters ps;
    const std::size_t count = 1 + rng() % 4;
    std::vector<std::vector<double>> before;
    for (std::size_t p = 0; p < count; ++p) {
      auto& param = ps.add("p" + std::to_string(p), Tensor::zeros({1 + rng() % 5}, true), InitSpec::zeros());
      std::uniform_real_distribution<double> d(-5, 5);
      for (auto& g : param.tensor.mutable_grad()) g = d(rng);
      before.emplace_back(param.tensor.grad().begin(), param.tensor.grad().end());
    }
    const double pre = clip_gradients(ps, 2.0);
    CHECK(ps.grad_norm() <= 2.0 + 1e-12);
    const double factor = pre > 2.0 ? 2.0 / pre : 1.0;
    for (std::size_t p = 0; p < count; ++p) {
      auto g = ps.items()[p].tensor.grad();
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(before[p][i] * factor).epsilon(1e-12));
    }
  }
}

TEST_CASE("adam_step") {
  AdamConfig defaults;
  CHECK(defaults.alpha == 2e-4);
  CHECK(defaults.beta1 == 0.85);
  CHECK(defaults.beta2 == 0.997);
  CHECK(defaults.epsilon == 1e-6);

  ModelParameters params;
  params.add("p", Tensor::from({1}, {1.0}, true), InitSpec::constant(1.0));
  auto state = AdamState::for_parameters(params);
  params.get("p").tensor.mutable_grad()[0] = 1.0;
  adam_step(state, params);
  CHECK(state.step == 1);
  CHECK(state.moments["p"].first[0] == doctest::Approx(0.15).epsilon(1e-15));
  CHECK(state.moments["p"].second[0] == doctest::Approx(0.003).epsilon(1e-15));
  CHECK(params.get("p").tensor.values()[0] == doctest::Approx(1.0 - 2e-4 / (1.0 + 1e-6)).epsilon(1e-15));
  CHECK(params.get("p").tensor.values()[0] == doctest::Approx(0.9998).epsilon(1e-6));

  std::mt19937_64 rng(11);
  ModelParameters zero;
  zero.add("a", {3, 2}, InitSpec::uniform(0.08), rng);
  zero.add("b", {4}, InitSpec::uniform(0.08), rng);
  std::vector<double> a0(zero.get("a").tensor.values().begin(), zero.get("a").tensor.values().end());
  auto zs = AdamState::for_parameters(zero);
  adam_step(zs, zero);
  CHECK(zs.step == 1);
  for (std::size_t i = 0; i < a0.size(); ++i) CHECK(zero.get("a").tensor.values()[i] == a0[i]);

  zero.add("c", {2}, InitSpec::zeros(), rng);
  CHECK_THROWS_AS(adam_step(zs, zero), std::invalid_argument);
}

TEST_CASE("backward") {
  auto x = Tensor::zeros({2, 3}, true);
  qgvr::ad::backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = Tensor::from({2}, {1.0, 2.0}, true);
  auto c = Tensor::scalar(4.0);
  qgvr::ad::backward(c);
  for (double g : y.grad()) CHECK(g == 0.0);

  auto loss = sum(mul(y, y));
  qgvr::ad::backward(loss);
  CHECK_THROWS_AS(qgvr::ad::backward(loss), GraphError);
  CHECK_THROWS_AS(qgvr::ad::backward(mul(y, y)), ShapeError);

  std::mt19937_64 rng(12);
  auto in = random_tensor({4, 3}, rng);
  auto w = random_tensor({3, 5}, rng, 1.0, true);
  std::vector<int> targets{1, 4, 0, 2};
  auto composite = [&] { return cross_entropy_loss(softmax(tanh(matmul(in, w))), targets, -1); };
  auto r = check_gradients(composite, {{"w", w}});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("every primitive passes finite differences over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    auto a = random_tensor({2, 3, 4}, rng, 1.0, true);
    auto b = random_tensor({2, 4, 3}, rng, 1.0, true);
    auto c = random_tensor({2, 3, 4}, rng, 1.0, true);
    auto v = random_tensor({2, 4}, rng, 1.0, true);
    auto bias = random_tensor({4}, rng, 1.0, true);
    auto table = random_tensor({5, 4}, rng, 1.0, true);
    auto probe = random_tensor({2, 3, 3}, rng);
    std::vector<int> ids{4, 0, 2, 2, 1, 3};
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1};
    std::vector<std::uint8_t> keep{1, 0};
    auto loss = [&] {
      auto e = embedding(table, ids, {2, 3});
      auto h = add_bias(add(mul_expand(a, v), e), bias);
      auto g = add_expand(sub(h, scale(c, 0.5)), relu(v));
      auto s = bmm(sigmoid(g), b);
      auto t = bmm(tanh(g), c, true);
      auto p = masked_softmax(add(s, t), mask);
      auto q = softmax(mul(reshape(transpose(reshape(p, {6, 3})), {2, 3, 3}), probe));
      auto w = where_rows(keep, q, p);
      auto sel = concat({select(w, 1, 0), reshape(slice(w, 1, 1, 2), {2, 6})}, 1);
      auto st = stack({sel, scale(sel, 2.0)}, 0);
      auto ex = expand(reshape(mean(st), {1, 1}), 1, 3);
      return add(mean(mul(st, st)), mean(ex));
    };
    auto r = check_gradients(loss, {{"a", a}, {"b", b}, {"c", c}, {"v", v}, {"bias", bias}, {"table", table}});
    CHECK_MESSAGE(r.max_rel_error < 1e-4, "seed " << seed << " worst " << r.worst << " err " << r.max_rel_error);
  }
}

TEST_CASE("forward pass is bit-reproducible") {
  auto run = [] {
    std::mt19937_64 rng(13);
    auto w = random_lstm(3, 4, rng);
    auto x = random_tensor({2, 6, 3}, rng);
    auto out = bilstm(x, std::vector<std::size_t>{6, 4}, w, w);
    return std::vector<double>(out.tokens.values().begin(), out.tokens.values().end());
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite values are rejected at op boundaries") {
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NumericError);
  auto x = Tensor::from({1}, {1e300});
  CHECK_THROWS_AS(mul(x, x), NumericError);
}

TEST_CASE("checkpoint round trip validates shapes") {
  std::mt19937_64 rng(14);
  ModelParameters params;
  params.add("w", {3, 2}, InitSpec::uniform(0.08), rng);
  params.add("b", {2}, InitSpec::constant(1.0), rng);
  auto adam = AdamState::for_parameters(params);
  params.get("w").tensor.mutable_grad()[0] = 0.5;
  adam_step(adam, params);

  const auto path = std::filesystem::temp_directory_path() / "qgvr_test_ckpt.json";
  save_checkpoint(path, params, &adam, {{"note", "unit"}});

  ModelParameters copy;
  copy.add("w", {3, 2}, InitSpec::zeros(), rng);
  copy.add("b", {2}, InitSpec::zeros(), rng);
  AdamState restored;
  auto meta = load_checkpoint(path, copy, &restored);
  CHECK(meta["note"] == "unit");
  CHECK(restored.step == 1);
  for (std::size_t i = 0; i < 6; ++i) CHECK(copy.get("w").tensor.values()[i] == params.get("w").tensor.values()[i]);
  CHECK(restored.moments["w"].first == adam.moments["w"].first);

  ModelParameters wrong;
  wrong.add("w", {2, 3}, InitSpec::zeros(), rng);
  wrong.add("b", {2}, InitSpec::zeros(), rng);
  CHECK_THROWS_AS(load_checkpoint(path, wrong, nullptr), CheckpointError);

  ModelParameters missing;
  missing.add("w", {3, 2}, InitSpec::zeros(), rng);
  CHECK_THROWS_AS(load_checkpoint(path, missing, nullptr), CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("parameter names are unique") {
  std::mt19937_64 rng(15);
  ModelParameters params;
  params.add("x", {2}, InitSpec::zeros(), rng);
  CHECK_THROWS_AS(params.add("x", {2}, InitSpec::zeros(), rng), std::invalid_argument);
  CHECK(params.scalar_count() == 2);
}
