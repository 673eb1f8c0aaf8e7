#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "qgvr/ad/tensor.hpp"

namespace qgvr::ad {

// Linear algebra ---------------------------------------------------------

/// a[..., k] x b[k, n] -> [..., n]. Leading axes of `a` are flattened into rows.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Batched product a[B, m, k] x b[B, k, n]; with transpose_b, b is [B, n, k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise ------------------------------------------------------------

enum class Elementwise { mul, add };
enum class Activation { sigmoid, tanh, relu };

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// x[..., n] + bias[n], bias broadcast over every leading index.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x[B, T, D] + y[B, D], y broadcast along T.
Tensor add_expand(const Tensor& x, const Tensor& y);
/// x[B, T, D] * y[B, D], y broadcast along T.
Tensor mul_expand(const Tensor& x, const Tensor& y);

Tensor activation(const Tensor& x, Activation kind);
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }

// Normalisation ----------------------------------------------------------

/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& scores);
/// Softmax over the last axis where entries with mask 0 act as -inf and get
/// weight exactly 0. Every row needs at least one unmasked entry.
Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> mask);

// Shape manipulation -----------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Index along `axis`, dropping it from the shape.
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);
/// Inverse of select: joins equally shaped parts along a new axis.
Tensor stack(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
/// Repeats an extent-1 axis n times.
Tensor expand(const Tensor& x, std::size_t axis, std::size_t n);
/// Row b of the result is a[b] where keep[b] != 0, otherwise b[b]. Both are [B, ...].
Tensor where_rows(std::span<const std::uint8_t> keep, const Tensor& a, const Tensor& b);

// Reductions and lookups ------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Rows of table[V, E] gathered by ids; result shape is ids_shape + [E].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape);

// Training ---------------------------------------------------------------

/// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng);

/// Mean negative log-likelihood over positions whose target != pad_id.
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> targets, int pad_id);

// LSTM -------------------------------------------------------------------

/// Gate blocks along the 4H axis are ordered input, forget, cell, output.
struct LstmWeights {
  Tensor w_x;   // [in, 4H]
  Tensor w_h;   // [H, 4H]
  Tensor bias;  // [4H]

  std::size_t hidden() const { return w_h.dim(0); }
  std::size_t input() const { return w_x.dim(0); }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

/// One step of a standard LSTM on a batch x[B, in] (or an unbatched x[in]).
LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmWeights& w);

struct DropoutContext {
  double rate = 0.0;
  bool training = false;
  std::mt19937_64* rng = nullptr;

  Tensor apply(const Tensor& x) const;
};

struct BiLstmOutput {
  Tensor tokens;       // [B, T, 2H], forward state then backward state per position
  Tensor sentence;     // [B, 2H], forward state at each row's last position and backward state at position 0
};

/// Bidirectional LSTM over a padded batch inputs[B, T, in]. Row b holds
/// lengths[b] valid steps; padded steps leave the recurrent state untouched,
/// so every row matches an unpadded run. Initial states are zero.
BiLstmOutput bilstm(const Tensor& inputs, std::span<const std::size_t> lengths, const LstmWeights& forward,
                    const LstmWeights& backward, const DropoutContext& dropout = {});

}  // namespace qgvr::ad
