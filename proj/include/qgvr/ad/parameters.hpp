#pragma once

#include <random>
#include <string>
#include <vector>

#include "qgvr/ad/tensor.hpp"

namespace qgvr::ad {

/// How a parameter was initialised; kept for reproducibility and checkpoints.
struct InitSpec {
  enum class Kind { uniform, constant, lstm_bias };

  Kind kind = Kind::constant;
  double low = 0.0;
  double high = 0.0;
  double value = 0.0;

  static InitSpec uniform(double bound) { return {Kind::uniform, -bound, bound, 0.0}; }
  static InitSpec constant(double v) { return {Kind::constant, 0.0, 0.0, v}; }
  static InitSpec zeros() { return constant(0.0); }
  /// Zeros except the forget-gate block of a [4H] LSTM bias, which is set to `forget`.
  static InitSpec lstm_bias(double forget) { return {Kind::lstm_bias, 0.0, 0.0, forget}; }

  std::string describe() const;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  InitSpec init;
};

/// Named, ordered collection of trainable tensors. Names are unique.
class ModelParameters {
 public:
  Parameter& add(std::string name, Shape shape, const InitSpec& init, std::mt19937_64& rng);
  Parameter& add(std::string name, Tensor tensor, const InitSpec& init);

  bool contains(const std::string& name) const;
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const { return get(name).tensor; }
  void remove(const std::string& name);

  const std::vector<Parameter>& items() const { return items_; }
  std::vector<Parameter>& items() { return items_; }

  /// Total number of scalar values across all parameters.
  std::size_t scalar_count() const;
  void zero_grad();
  double grad_norm() const;

 private:
  std::vector<Parameter> items_;
};

}  // namespace qgvr::ad
