#include "qgvr/ad/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace qgvr::ad {

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0.0);
  return node;
}
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> detail::Node::parent_grad(std::size_t i) {
  auto& p = *parents.at(i);
  if (!p.requires_grad) return {};
  if (p.grad.empty()) p.grad.assign(p.value.size(), 0.0);
  return p.grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_finite("tensor", values);
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = numel(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw GraphError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::size() const { return numel(shape()); }

std::span<const double> Tensor::values() const {
  if (!node_) throw GraphError("undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw GraphError("undefined tensor");
  if (!node_->leaf) throw GraphError("mutable_values on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return values()[i]; }

double Tensor::at(std::size_t i, std::size_t j) const {
  const auto& s = shape();
  return node_->value[i * s.back() + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  const auto& s = shape();
  return node_->value[(i * s[1] + j) * s[2] + k];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->leaf; }

std::span<const double> Tensor::grad() const {
  if (!node_) throw GraphError("undefined tensor");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw GraphError("undefined tensor");
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) return;
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(make_leaf(shape(), node_->value, false)); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void check_finite(std::string_view where, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(where) + ": non-finite value " + std::to_string(values[i]) +
                         " at index " + std::to_string(i));
    }
  }
}

Tensor make_op(std::string_view name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, detail::BackwardFn backward) {
  if (numel(shape) != values.size()) {
    throw ShapeError(std::string(name) + ": result shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  check_finite(name, values);
  auto node = std::make_shared<detail::Node>();
  node->op = std::string(name);
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->leaf = false;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (!in.defined()) throw GraphError(std::string(name) + ": undefined input");
      if (in.node()->consumed) {
        throw GraphError(std::string(name) + ": input belongs to a graph already consumed by backward");
      }
      needs = needs || in.requires_grad();
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  auto root = loss.node();
  if (root->consumed) throw GraphError("backward: graph already consumed; re-run the forward pass");
  if (numel(root->shape) != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(root->shape));
  if (!root->requires_grad) {
    root->consumed = !root->leaf;
    return;
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* p = node->parents[next++].get();
      if (p->requires_grad && !p->leaf && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root->leaf) {
    root->grad[0] += 1.0;
    return;
  }
  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->grad.empty() && node->backward) node->backward(*node);
  }
  for (auto* node : order) {
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

}  // namespace qgvr::ad
