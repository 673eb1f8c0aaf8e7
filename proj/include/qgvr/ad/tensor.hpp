#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qgvr::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or infinity shows up at an op boundary.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the recorded graph, e.g. a second backward pass over a consumed graph.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  /// Gradient buffer of a parent, allocated on first use; empty span if the
  /// parent does not take gradients.
  std::span<double> parent_grad(std::size_t i);
};

}  // namespace detail

/// Dense row-major array of doubles that records the operations applied to it.
///
/// A Tensor is a cheap handle: copies share the same storage and graph node.
/// Leaf tensors created with requires_grad carry a zero-initialised gradient
/// buffer that backward() accumulates into.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  /// Writable view of the storage. Only valid on leaves; intended for
  /// parameter initialisation, optimizer updates, and checkpoint loading.
  std::span<double> mutable_values();

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool requires_grad() const;
  bool is_leaf() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// New leaf holding a copy of the values, disconnected from any graph.
  Tensor detach() const;

  /// True when both handles refer to the same storage.
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar loss into every tensor that
/// requires gradients. The graph is released afterwards; a second call on
/// the same loss throws GraphError.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the result of a differentiable operation. Values are checked for
/// finiteness. The backward closure is kept only when some input requires
/// gradients and recording is enabled.
Tensor make_op(std::string_view name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, detail::BackwardFn backward);

void check_finite(std::string_view where, std::span<const double> values);

}  // namespace qgvr::ad
