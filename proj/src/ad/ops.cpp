#include "qgvr/ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace qgvr::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require(bool cond, std::string_view op, const std::string& msg) {
  if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  require(a.shape() == b.shape(), op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

const std::vector<double>& pv(detail::Node& self, std::size_t i) { return self.parents[i]->value; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(b.rank() == 2, "matmul", "right operand must be a matrix, got " + shape_str(b.shape()));
  require(a.rank() >= 1, "matmul", "left operand must have rank >= 1");
  const std::size_t k = a.shape().back();
  require(k == b.dim(0), "matmul",
          "inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.size() / k;
  const std::size_t n = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.values().data(), m, k) * MapC(b.values().data(), k, n);
  return make_op("matmul", std::move(out_shape), std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    MapC dc(self.grad.data(), m, n);
    if (auto ga = self.parent_grad(0); !ga.empty()) {
      Map(ga.data(), m, k).noalias() += dc * MapC(pv(self, 1).data(), k, n).transpose();
    }
    if (auto gb = self.parent_grad(1); !gb.empty()) {
      Map(gb.data(), k, n).noalias() += MapC(pv(self, 0).data(), m, k).transpose() * dc;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose", "expects a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  Map(out.data(), n, m) = MapC(a.values().data(), m, n).transpose();
  return make_op("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    if (auto ga = self.parent_grad(0); !ga.empty()) {
      Map(ga.data(), m, n) += MapC(self.grad.data(), n, m).transpose();
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require(a.rank() == 3 && b.rank() == 3, "bmm", "expects rank-3 operands");
  require(a.dim(0) == b.dim(0), "bmm", "batch extents differ");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k, "bmm",
          "inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(batch * m * n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < batch; ++i) {
    Map c(out.data() + i * m * n, m, n);
    MapC ai(av + i * m * k, m, k);
    if (transpose_b) {
      c.noalias() = ai * MapC(bv + i * n * k, n, k).transpose();
    } else {
      c.noalias() = ai * MapC(bv + i * k * n, k, n);
    }
  }
  return make_op("bmm", {batch, m, n}, std::move(out), {a, b}, [batch, m, k, n, transpose_b](detail::Node& self) {
    auto ga = self.parent_grad(0);
    auto gb = self.parent_grad(1);
    const double* av = pv(self, 0).data();
    const double* bv = pv(self, 1).data();
    for (std::size_t i = 0; i < batch; ++i) {
      MapC dc(self.grad.data() + i * m * n, m, n);
      if (!ga.empty()) {
        Map dai(ga.data() + i * m * k, m, k);
        if (transpose_b) {
          dai.noalias() += dc * MapC(bv + i * n * k, n, k);
        } else {
          dai.noalias() += dc * MapC(bv + i * k * n, k, n).transpose();
        }
      }
      if (!gb.empty()) {
        MapC ai(av + i * m * k, m, k);
        if (transpose_b) {
          Map(gb.data() + i * n * k, n, k).noalias() += dc.transpose() * ai;
        } else {
          Map(gb.data() + i * k * n, k, n).noalias() += ai.transpose() * dc;
        }
      }
    }
  });
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind) {
  return kind == Elementwise::mul ? mul(a, b) : add(a, b);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto g = self.parent_grad(p); !g.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (auto g = self.parent_grad(1); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = pv(self, 0);
    const auto& bv = pv(self, 1);
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (auto g = self.parent_grad(1); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_op("scale", a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(bias.rank() == 1 && x.shape().back() == bias.dim(0), "add_bias",
          "bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.size() / n;
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] + bv[j];
  }
  return make_op("add_bias", x.shape(), std::move(out), {x, bias}, [rows, n](detail::Node& self) {
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (auto g = self.parent_grad(1); !g.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
      }
    }
  });
}

namespace {

template <bool Multiply>
Tensor broadcast_mid(const Tensor& x, const Tensor& y, std::string_view name) {
  require(x.rank() == 3 && y.rank() == 2 && x.dim(0) == y.dim(0) && x.dim(2) == y.dim(1), name,
          "expects x[B,T,D] and y[B,D], got " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  const std::size_t batch = x.dim(0), steps = x.dim(1), width = x.dim(2);
  auto xv = x.values();
  auto yv = y.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t base = (b * steps + t) * width;
      for (std::size_t d = 0; d < width; ++d) {
        out[base + d] = Multiply ? xv[base + d] * yv[b * width + d] : xv[base + d] + yv[b * width + d];
      }
    }
  }
  return make_op(name, x.shape(), std::move(out), {x, y}, [batch, steps, width](detail::Node& self) {
    const auto& xv = pv(self, 0);
    const auto& yv = pv(self, 1);
    auto gx = self.parent_grad(0);
    auto gy = self.parent_grad(1);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t base = (b * steps + t) * width;
        for (std::size_t d = 0; d < width; ++d) {
          const double g = self.grad[base + d];
          if constexpr (Multiply) {
            if (!gx.empty()) gx[base + d] += g * yv[b * width + d];
            if (!gy.empty()) gy[b * width + d] += g * xv[base + d];
          } else {
            if (!gx.empty()) gx[base + d] += g;
            if (!gy.empty()) gy[b * width + d] += g;
          }
        }
      }
    }
  });
}

}  // namespace

Tensor add_expand(const Tensor& x, const Tensor& y) { return broadcast_mid<false>(x, y, "add_expand"); }
Tensor mul_expand(const Tensor& x, const Tensor& y) { return broadcast_mid<true>(x, y, "mul_expand"); }

Tensor activation(const Tensor& x, Activation kind) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  switch (kind) {
    case Activation::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        // Split by sign so exp never overflows.
        const double v = xv[i];
        if (v >= 0) {
          out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          out[i] = e / (1.0 + e);
        }
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : 0.0;
      break;
  }
  const char* name = kind == Activation::sigmoid ? "sigmoid" : kind == Activation::tanh ? "tanh" : "relu";
  return make_op(name, x.shape(), std::move(out), {x}, [kind](detail::Node& self) {
    auto g = self.parent_grad(0);
    if (g.empty()) return;
    const auto& y = self.value;
    const auto& xv = pv(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Activation::sigmoid: d = y[i] * (1.0 - y[i]); break;
        case Activation::tanh: d = 1.0 - y[i] * y[i]; break;
        case Activation::relu: d = xv[i] > 0 ? 1.0 : 0.0; break;
      }
      g[i] += self.grad[i] * d;
    }
  });
}

namespace {

Tensor softmax_impl(const Tensor& scores, std::span<const std::uint8_t> mask, std::string_view name) {
  require(scores.rank() >= 1, name, "empty input");
  const std::size_t n = scores.shape().back();
  const std::size_t rows = scores.size() / n;
  auto sv = scores.values();
  std::vector<double> out(sv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = sv.data() + r * n;
    double* y = out.data() + r * n;
    const std::uint8_t* m = mask.empty() ? nullptr : mask.data() + r * n;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!m || m[j]) hi = std::max(hi, s[j]);
    }
    if (hi == -std::numeric_limits<double>::infinity()) {
      throw ShapeError(std::string(name) + ": row " + std::to_string(r) + " has no unmasked entries");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!m || m[j]) {
        y[j] = std::exp(s[j] - hi);
        total += y[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  return make_op(name, scores.shape(), std::move(out), {scores}, [rows, n](detail::Node& self) {
    auto g = self.parent_grad(0);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& scores) { return softmax_impl(scores, {}, "softmax"); }

Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> mask) {
  require(mask.size() == scores.size(), "masked_softmax", "mask size does not match scores");
  return softmax_impl(scores, mask, "masked_softmax");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat", "no parts");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat", "axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == first.size(), "concat", "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis) {
        require(s[i] == first[i], "concat",
                "non-axis extents differ: " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto split = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].values();
    const std::size_t block = extents[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.data() + o * block, block, out.data() + o * split.extent * split.inner + offset);
    }
    offset += block;
  }
  return make_op("concat", out_shape, std::move(out), parts, [split, extents](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      const std::size_t block = extents[p] * split.inner;
      if (auto g = self.parent_grad(p); !g.empty()) {
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = self.grad.data() + o * split.extent * split.inner + offset;
          double* dst = g.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += block;
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require(axis < x.rank(), "slice", "axis out of range");
  require(length > 0 && start + length <= x.dim(axis), "slice",
          "range [" + std::to_string(start) + "," + std::to_string(start + length) + ") exceeds " +
              shape_str(x.shape()));
  const auto split = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  auto xv = x.values();
  std::vector<double> out(numel(out_shape));
  const std::size_t block = length * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.data() + (o * split.extent + start) * split.inner, block, out.data() + o * block);
  }
  return make_op("slice", out_shape, std::move(out), {x}, [split, start, block](detail::Node& self) {
    auto g = self.parent_grad(0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = g.data() + (o * split.extent + start) * split.inner;
      const double* src = self.grad.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  require(x.rank() >= 2, "select", "needs rank >= 2");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(slice(x, axis, index, 1), std::move(out_shape));
}

Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "stack", "no parts");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    require(axis <= p.rank(), "stack", "axis out of range");
    Shape s = p.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return expanded.size() == 1 ? expanded.front() : concat(expanded, axis);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor expand(const Tensor& x, std::size_t axis, std::size_t n) {
  require(axis < x.rank() && x.dim(axis) == 1, "expand", "axis must have extent 1");
  const auto split = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = n;
  auto xv = x.values();
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(xv.data() + o * split.inner, split.inner, out.data() + (o * n + r) * split.inner);
    }
  }
  return make_op("expand", out_shape, std::move(out), {x}, [split, n](detail::Node& self) {
    auto g = self.parent_grad(0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t r = 0; r < n; ++r) {
        const double* src = self.grad.data() + (o * n + r) * split.inner;
        for (std::size_t i = 0; i < split.inner; ++i) g[o * split.inner + i] += src[i];
      }
    }
  });
}

Tensor where_rows(std::span<const std::uint8_t> keep, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "where_rows");
  require(keep.size() == a.dim(0), "where_rows", "keep mask length differs from row count");
  const std::size_t rows = a.dim(0);
  const std::size_t inner = a.size() / rows;
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = keep[r] ? av.data() : bv.data();
    std::copy_n(src + r * inner, inner, out.data() + r * inner);
  }
  std::vector<std::uint8_t> mask(keep.begin(), keep.end());
  return make_op("where_rows", a.shape(), std::move(out), {a, b}, [mask, inner](detail::Node& self) {
    auto ga = self.parent_grad(0);
    auto gb = self.parent_grad(1);
    for (std::size_t r = 0; r < mask.size(); ++r) {
      auto dst = mask[r] ? ga : gb;
      if (dst.empty()) continue;
      for (std::size_t i = 0; i < inner; ++i) dst[r * inner + i] += self.grad[r * inner + i];
    }
  });
}

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return make_op("sum", {1}, {total}, {x}, [](detail::Node& self) {
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (auto& v : g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape) {
  require(table.rank() == 2, "embedding", "table must be [V, E]");
  require(numel(ids_shape) == ids.size(), "embedding", "ids do not fill " + shape_str(ids_shape));
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  auto tv = table.values();
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * width, width, out.data() + i * width);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  std::vector<int> index(ids.begin(), ids.end());
  return make_op("embedding", std::move(out_shape), std::move(out), {table}, [index, width](detail::Node& self) {
    auto g = self.parent_grad(0);
    if (g.empty()) return;
    for (std::size_t i = 0; i < index.size(); ++i) {
      double* dst = g.data() + static_cast<std::size_t>(index[i]) * width;
      const double* src = self.grad.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate " + std::to_string(rate) + " outside [0, 1)");
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto xv = x.values();
  std::vector<double> factor(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    // 53 random bits -> uniform in [0, 1); avoids implementation-defined distributions.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    factor[i] = u < rate ? 0.0 : keep_scale;
    out[i] = xv[i] * factor[i];
  }
  return make_op("dropout", x.shape(), std::move(out), {x}, [factor = std::move(factor)](detail::Node& self) {
    if (auto g = self.parent_grad(0); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
    }
  });
}

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> targets, int pad_id) {
  require(logits.rank() >= 1, "cross_entropy_loss", "logits must have a vocabulary axis");
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.size() / vocab;
  require(targets.size() == rows, "cross_entropy_loss",
          std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  auto lv = logits.values();
  std::vector<double> probs(lv.size(), 0.0);
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == pad_id) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
      throw std::out_of_range("cross_entropy_loss: target id " + std::to_string(tgt[r]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    const double* l = lv.data() + r * vocab;
    double hi = *std::max_element(l, l + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(l[j] - hi);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += (hi + std::log(z)) - l[tgt[r]];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy_loss: every target is padding");
  const double n = static_cast<double>(count);
  return make_op("cross_entropy", {1}, {total / n}, {logits},
                 [probs = std::move(probs), tgt = std::move(tgt), vocab, pad_id, n](detail::Node& self) {
                   auto g = self.parent_grad(0);
                   if (g.empty()) return;
                   const double scale = self.grad[0] / n;
                   for (std::size_t r = 0; r < tgt.size(); ++r) {
                     if (tgt[r] == pad_id) continue;
                     for (std::size_t j = 0; j < vocab; ++j) {
                       double d = probs[r * vocab + j] - (static_cast<int>(j) == tgt[r] ? 1.0 : 0.0);
                       g[r * vocab + j] += scale * d;
                     }
                   }
                 });
}

LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmWeights& w) {
  const std::size_t hidden = w.hidden();
  require(w.w_h.dim(1) == 4 * hidden && w.w_x.dim(1) == 4 * hidden && w.bias.size() == 4 * hidden, "lstm_cell",
          "weights are not [*, 4H]");
  require(x.shape().back() == w.input(), "lstm_cell",
          "input width " + std::to_string(x.shape().back()) + " != " + std::to_string(w.input()));
  require(prev.h.shape().back() == hidden && prev.c.shape() == prev.h.shape(), "lstm_cell", "state width mismatch");
  const std::size_t axis = x.rank() - 1;
  Tensor gates = add_bias(add(matmul(x, w.w_x), matmul(prev.h, w.w_h)), w.bias);
  Tensor i = sigmoid(slice(gates, axis, 0, hidden));
  Tensor f = sigmoid(slice(gates, axis, hidden, hidden));
  Tensor g = tanh(slice(gates, axis, 2 * hidden, hidden));
  Tensor o = sigmoid(slice(gates, axis, 3 * hidden, hidden));
  Tensor c = add(mul(f, prev.c), mul(i, g));
  Tensor h = mul(o, tanh(c));
  return {h, c};
}

Tensor DropoutContext::apply(const Tensor& x) const {
  if (!training || rate == 0.0) return x;
  if (!rng) throw std::invalid_argument("dropout: training mode requires an rng");
  return dropout(x, rate, training, *rng);
}

BiLstmOutput bilstm(const Tensor& inputs, std::span<const std::size_t> lengths, const LstmWeights& forward,
                    const LstmWeights& backward, const DropoutContext& drop) {
  require(inputs.rank() == 3, "bilstm", "inputs must be [B, T, in]");
  const std::size_t batch = inputs.dim(0), steps = inputs.dim(1);
  require(lengths.size() == batch, "bilstm", "one length per row required");
  for (auto len : lengths) require(len >= 1 && len <= steps, "bilstm", "row length outside [1, T]");
  require(forward.hidden() == backward.hidden(), "bilstm", "direction hidden sizes differ");
  const std::size_t hidden = forward.hidden();

  Tensor x = drop.apply(inputs);
  std::vector<Tensor> step_inputs;
  step_inputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) step_inputs.push_back(select(x, 1, t));

  auto run = [&](const LstmWeights& w, bool reverse) {
    std::vector<Tensor> outs(steps);
    LstmState state{Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
    std::vector<std::uint8_t> keep(batch);
    for (std::size_t n = 0; n < steps; ++n) {
      const std::size_t t = reverse ? steps - 1 - n : n;
      LstmState next = lstm_cell(step_inputs[t], state, w);
      bool all = true;
      for (std::size_t b = 0; b < batch; ++b) {
        keep[b] = t < lengths[b] ? 1 : 0;
        all = all && keep[b];
      }
      if (all) {
        state = next;
      } else {
        state = {where_rows(keep, next.h, state.h), where_rows(keep, next.c, state.c)};
      }
      outs[t] = state.h;
    }
    return outs;
  };

  auto fw = run(forward, false);
  auto bw = run(backward, true);
  Tensor tokens = concat({stack(fw, 1), stack(bw, 1)}, 2);
  Tensor sentence = concat({fw.back(), bw.front()}, 1);
  return {drop.apply(tokens), drop.apply(sentence)};
}

}  // namespace qgvr::ad
