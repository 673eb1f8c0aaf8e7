#include "qgvr/ad/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qgvr::ad {

std::string InitSpec::describe() const {
  std::ostringstream os;
  if (kind == Kind::uniform) {
    os << "uniform(" << low << ", " << high << ")";
  } else if (kind == Kind::lstm_bias) {
    os << "lstm_bias(forget=" << value << ")";
  } else {
    os << "constant(" << value << ")";
  }
  return os.str();
}

Parameter& ModelParameters::add(std::string name, Shape shape, const InitSpec& init, std::mt19937_64& rng) {
  std::vector<double> values(numel(shape));
  if (init.kind == InitSpec::Kind::uniform) {
    for (auto& v : values) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      v = init.low + (init.high - init.low) * u;
    }
  } else if (init.kind == InitSpec::Kind::lstm_bias) {
    if (shape.size() != 1 || shape[0] % 4 != 0) throw std::invalid_argument("lstm_bias init needs a [4H] shape");
    const std::size_t h = shape[0] / 4;
    std::fill(values.begin() + static_cast<std::ptrdiff_t>(h), values.begin() + static_cast<std::ptrdiff_t>(2 * h),
              init.value);
  } else {
    std::fill(values.begin(), values.end(), init.value);
  }
  return add(std::move(name), Tensor::from(std::move(shape), std::move(values), true), init);
}

Parameter& ModelParameters::add(std::string name, Tensor tensor, const InitSpec& init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  if (!tensor.requires_grad() || !tensor.is_leaf()) {
    throw std::invalid_argument("parameter " + name + " must be a leaf that requires grad");
  }
  items_.push_back({std::move(name), std::move(tensor), init});
  return items_.back();
}

bool ModelParameters::contains(const std::string& name) const {
  return std::any_of(items_.begin(), items_.end(), [&](const Parameter& p) { return p.name == name; });
}

Parameter& ModelParameters::get(const std::string& name) {
  auto it = std::find_if(items_.begin(), items_.end(), [&](const Parameter& p) { return p.name == name; });
  if (it == items_.end()) throw std::out_of_range("unknown parameter: " + name);
  return *it;
}

const Parameter& ModelParameters::get(const std::string& name) const {
  return const_cast<ModelParameters*>(this)->get(name);
}

void ModelParameters::remove(const std::string& name) {
  auto it = std::find_if(items_.begin(), items_.end(), [&](const Parameter& p) { return p.name == name; });
  if (it == items_.end()) throw std::out_of_range("unknown parameter: " + name);
  items_.erase(it);
}

std::size_t ModelParameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.size();
  return n;
}

void ModelParameters::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

double ModelParameters::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : items_) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

}  // namespace qgvr::ad
