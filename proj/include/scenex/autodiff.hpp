#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records primitives in topological order as they are evaluated.
// Var is a lightweight handle (tape, node id). Tapes are meant to be rebuilt
// for every evaluation; nothing about a graph persists between steps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "scenex/error.hpp"

namespace scenex {

using Mask = std::vector<std::uint8_t>;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t mask_count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

// Dense row-major tensor of doubles. A rank-0 tensor holds one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor", "data length " + std::to_string(data_.size()) +
                                     " != product of shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double item() const {
    if (data_.size() != 1) throw ContractError("Tensor::item on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
};

struct BackwardArgs {
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const Tensor* const> in;
  // Null for inputs that do not need a gradient. Adjoints accumulate (+=).
  std::span<Tensor* const> grad_in;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;
using GradientMap = std::map<std::string, Tensor>;

class Tape {
 public:
  Var constant(Tensor value) { return push("constant", std::move(value), {}, nullptr, false); }

  // Registers a differentiable leaf under `id`. Ids are unique per tape.
  Var parameter(const std::string& id, Tensor value) {
    if (params_.count(id)) throw ContractError("parameter '" + id + "' registered twice");
    Var v = push("parameter", std::move(value), {}, nullptr, true);
    params_.emplace(id, v.id);
    return v;
  }

  // Records a primitive. `inputs` must already be on this tape.
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.tape != this || v.id >= nodes_.size()) throw ContractError(std::string(op) + ": input from another tape");
      ids.push_back(v.id);
      rg = rg || nodes_[v.id].requires_grad;
    }
    return push(op, std::move(value), std::move(ids), std::move(backward), rg);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::string_view op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }
  const std::map<std::string, std::size_t>& parameters() const { return params_; }

  // d(root)/d(p) for every registered parameter p; unreachable parameters get zeros.
  GradientMap backward(Var root) const {
    if (root.tape != this) throw ContractError("backward: root from another tape");
    if (nodes_.at(root.id).value.size() != 1) {
      throw ContractError("backward: root must be a scalar, got shape " +
                          shape_str(nodes_[root.id].value.shape()));
    }
    std::vector<Tensor> grads(root.id + 1);
    std::vector<std::uint8_t> has(root.id + 1, 0);
    grads[root.id] = Tensor(nodes_[root.id].value.shape(), 1.0);
    has[root.id] = 1;
    std::vector<const Tensor*> in;
    std::vector<Tensor*> gin;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!has[i] || !n.requires_grad || !n.backward) continue;
      in.clear();
      gin.clear();
      for (std::size_t j : n.inputs) {
        in.push_back(&nodes_[j].value);
        if (nodes_[j].requires_grad) {
          if (!has[j]) {
            grads[j] = Tensor(nodes_[j].value.shape(), 0.0);
            has[j] = 1;
          }
          gin.push_back(&grads[j]);
        } else {
          gin.push_back(nullptr);
        }
      }
      n.backward(BackwardArgs{grads[i], n.value, in, gin});
    }
    GradientMap out;
    for (const auto& [name, id] : params_) {
      if (id <= root.id && has[id]) {
        out.emplace(name, grads[id]);
      } else {
        out.emplace(name, Tensor(nodes_[id].value.shape(), 0.0));
      }
    }
    return out;
  }

 private:
  struct Node {
    const char* op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  Var push(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward, bool rg) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), std::move(backward), rg});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

namespace detail {

inline Shape broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.size() == 1) return b.shape();
  if (b.size() == 1) return a.shape();
  throw ShapeError(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void same_tape(const char* op, Var a, Var b) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

// z = f(x, y) elementwise with scalar broadcasting; dfx/dfy give partials.
template <class F, class Dx, class Dy>
Var binary(const char* op, Var a, Var b, F f, Dx dfx, Dy dfy) {
  same_tape(op, a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Shape shape = broadcast_shape(op, x, y);
  Tensor z(shape);
  const std::size_t n = z.size();
  const bool xs = x.size() == 1 && n != 1;
  const bool ys = y.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) z[i] = f(x[xs ? 0 : i], y[ys ? 0 : i]);
  return a.tape->record(op, std::move(z), {a, b}, [=](const BackwardArgs& g) {
    const Tensor& xv = *g.in[0];
    const Tensor& yv = *g.in[1];
    const std::size_t m = g.grad_out.size();
    for (std::size_t i = 0; i < m; ++i) {
      const double xi = xv[xs ? 0 : i];
      const double yi = yv[ys ? 0 : i];
      const double go = g.grad_out[i];
      if (g.grad_in[0]) (*g.grad_in[0])[xs ? 0 : i] += go * dfx(xi, yi, g.out[i]);
      if (g.grad_in[1]) (*g.grad_in[1])[ys ? 0 : i] += go * dfy(xi, yi, g.out[i]);
    }
  });
}

// y = f(x) elementwise; df(x, y) is the derivative.
template <class F, class D>
Var unary(const char* op, Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape->record(op, std::move(y), {a}, [=](const BackwardArgs& g) {
    Tensor& gi = *g.grad_in[0];
    const Tensor& xv = *g.in[0];
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g.grad_out[i] * df(xv[i], g.out[i]);
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary("add", a, b, [](double x, double y) { return x + y; },
                        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary("sub", a, b, [](double x, double y) { return x - y; },
                        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary("mul", a, b, [](double x, double y) { return x * y; },
                        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary("div", a, b, [](double x, double y) { return x / y; },
                        [](double, double y, double) { return 1.0 / y; },
                        [](double, double y, double z) { return -z / y; });
}

inline Var neg(Var a) {
  return detail::unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var scale(Var a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var shift(Var a, double c) {
  return detail::unary("shift", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// Subgradient at the kink is 0.
inline Var abs(Var a) {
  return detail::unary("abs", a, [](double x) { return std::fabs(x); },
                       [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0)) throw DomainError("log", "non-positive input " + std::to_string(v));
  }
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var sqrt(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0)) throw DomainError("sqrt", "non-positive input " + std::to_string(v));
  }
  return detail::unary("sqrt", a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}

inline Var sin(Var a) {
  return detail::unary("sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

inline Var cos(Var a) {
  return detail::unary("cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

// arccos of the input clamped to [-1, 1]; the adjoint is 0 where clamping is active.
inline Var acos_clamped(Var a) {
  return detail::unary(
      "acos", a, [](double x) { return std::acos(std::clamp(x, -1.0, 1.0)); },
      [](double x, double) { return (x > -1.0 && x < 1.0) ? -1.0 / std::sqrt(1.0 - x * x) : 0.0; });
}

inline Var asin_clamped(Var a) {
  return detail::unary(
      "asin", a, [](double x) { return std::asin(std::clamp(x, -1.0, 1.0)); },
      [](double x, double) { return (x > -1.0 && x < 1.0) ? 1.0 / std::sqrt(1.0 - x * x) : 0.0; });
}

inline Var minimum(Var a, double c) {
  return detail::unary("min", a, [c](double x) { return std::min(x, c); },
                       [c](double x, double) { return x < c ? 1.0 : 0.0; });
}

inline Var maximum(Var a, double c) {
  return detail::unary("max", a, [c](double x) { return std::max(x, c); },
                       [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0;
  for (double v : x.data()) s += v;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [](const BackwardArgs& g) {
    const double go = g.grad_out[0];
    for (double& v : g.grad_in[0]->data()) v += go;
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.size();
  if (n == 0) throw DomainError("mean", "empty tensor");
  const Tensor& x = a.value();
  double s = 0;
  for (double v : x.data()) s += v;
  return a.tape->record("mean", Tensor::scalar(s / double(n)), {a}, [n](const BackwardArgs& g) {
    const double go = g.grad_out[0] / double(n);
    for (double& v : g.grad_in[0]->data()) v += go;
  });
}

inline Var masked_mean(Var a, const Mask& mask) {
  if (mask.size() != a.size()) {
    throw ShapeError("masked_mean", "mask length " + std::to_string(mask.size()) + " vs " + shape_str(a.shape()));
  }
  const std::size_t n = mask_count(mask);
  if (n == 0) throw DomainError("masked_mean", "empty mask");
  const Tensor& x = a.value();
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) s += x[i];
  }
  return a.tape->record("masked_mean", Tensor::scalar(s / double(n)), {a}, [mask, n](const BackwardArgs& g) {
    const double go = g.grad_out[0] / double(n);
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < gi.size(); ++i) {
      if (mask[i]) gi[i] += go;
    }
  });
}

inline Var dot(Var a, Var b) {
  detail::same_tape("dot", a, b);
  if (a.shape() != b.shape()) throw ShapeError("dot", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return a.tape->record("dot", Tensor::scalar(s), {a, b}, [](const BackwardArgs& g) {
    const double go = g.grad_out[0];
    const Tensor& xv = *g.in[0];
    const Tensor& yv = *g.in[1];
    if (g.grad_in[0]) {
      for (std::size_t i = 0; i < xv.size(); ++i) (*g.grad_in[0])[i] += go * yv[i];
    }
    if (g.grad_in[1]) {
      for (std::size_t i = 0; i < xv.size(); ++i) (*g.grad_in[1])[i] += go * xv[i];
    }
  });
}

// Euclidean norm of all elements; subgradient 0 at the origin.
inline Var norm(Var a) {
  const Tensor& x = a.value();
  double s = 0;
  for (double v : x.data()) s += v * v;
  return a.tape->record("norm", Tensor::scalar(std::sqrt(s)), {a}, [](const BackwardArgs& g) {
    const double nrm = g.out[0];
    if (nrm == 0.0) return;
    const double go = g.grad_out[0] / nrm;
    const Tensor& xv = *g.in[0];
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < xv.size(); ++i) gi[i] += go * xv[i];
  });
}

// out = mask ? a : fill. Gradient flows only through masked-in entries.
inline Var where(const Mask& mask, Var a, double fill) {
  if (mask.size() != a.size()) throw ShapeError("where", "mask length vs " + shape_str(a.shape()));
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = mask[i] ? x[i] : fill;
  return a.tape->record("where", std::move(y), {a}, [mask](const BackwardArgs& g) {
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < gi.size(); ++i) {
      if (mask[i]) gi[i] += g.grad_out[i];
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.size()) throw ShapeError("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  return a.tape->record("reshape", a.value().reshaped(std::move(shape)), {a}, [](const BackwardArgs& g) {
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g.grad_out[i];
  });
}

// out[i] = a.flat[idx[i]], shape {idx.size()}.
inline Var gather(Var a, std::vector<std::size_t> idx) {
  const Tensor& x = a.value();
  Tensor y(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.size()) throw ShapeError("gather", "index out of range for " + shape_str(x.shape()));
    y[i] = x[idx[i]];
  }
  return a.tape->record("gather", std::move(y), {a}, [idx = std::move(idx)](const BackwardArgs& g) {
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < idx.size(); ++i) gi[idx[i]] += g.grad_out[i];
  });
}

inline Var element(Var a, std::size_t i) { return reshape(gather(a, {i}), Shape{}); }

// out.flat[idx[i]] = a[i]; every other entry is `fill`.
inline Var scatter(Var a, std::vector<std::size_t> idx, Shape shape, double fill) {
  if (idx.size() != a.size()) throw ShapeError("scatter", "index count vs " + shape_str(a.shape()));
  Tensor y(shape, fill);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= y.size()) throw ShapeError("scatter", "index out of range for " + shape_str(shape));
    y[idx[i]] = x[i];
  }
  return a.tape->record("scatter", std::move(y), {a}, [idx = std::move(idx)](const BackwardArgs& g) {
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < idx.size(); ++i) gi[i] += g.grad_out[idx[i]];
  });
}

// Stacks equal-length vectors as columns of an N x k tensor.
inline Var stack_columns(const std::vector<Var>& cols) {
  if (cols.empty()) throw ShapeError("stack_columns", "no columns");
  const std::size_t n = cols[0].size();
  const std::size_t k = cols.size();
  Tensor y(Shape{n, k});
  for (std::size_t c = 0; c < k; ++c) {
    if (cols[c].size() != n) throw ShapeError("stack_columns", "column lengths differ");
    detail::same_tape("stack_columns", cols[0], cols[c]);
    const Tensor& x = cols[c].value();
    for (std::size_t i = 0; i < n; ++i) y[i * k + c] = x[i];
  }
  return cols[0].tape->record("stack_columns", std::move(y), cols, [n, k](const BackwardArgs& g) {
    for (std::size_t c = 0; c < k; ++c) {
      if (!g.grad_in[c]) continue;
      Tensor& gi = *g.grad_in[c];
      for (std::size_t i = 0; i < n; ++i) gi[i] += g.grad_out[i * k + c];
    }
  });
}

struct Sampled {
  Var values;
  Mask in_range;
};

// Value sentinel for out-of-range bilinear queries.
inline constexpr double kOutOfRange = 0.0;

// Four-neighbour bilinear interpolation of an H x W grid at N continuous
// (x = column, y = row) positions. Queries outside [0, W-1] x [0, H-1] return
// kOutOfRange, are flagged in `in_range`, and contribute no adjoint.
inline Sampled bilinear_sample(Var grid, Var queries) {
  detail::same_tape("bilinear_sample", grid, queries);
  const Tensor& gv = grid.value();
  const Tensor& qv = queries.value();
  if (gv.rank() != 2 || gv.dim(0) < 2 || gv.dim(1) < 2) {
    throw ShapeError("bilinear_sample", "grid must be H x W with H, W >= 2, got " + shape_str(gv.shape()));
  }
  if (qv.rank() != 2 || qv.dim(1) != 2) {
    throw ShapeError("bilinear_sample", "queries must be N x 2, got " + shape_str(qv.shape()));
  }
  const std::size_t h = gv.dim(0), w = gv.dim(1), n = qv.dim(0);
  Tensor out(Shape{n});
  Mask in_range(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = qv[2 * i], y = qv[2 * i + 1];
    if (!(x >= 0.0 && y >= 0.0 && x <= double(w - 1) && y <= double(h - 1))) {
      out[i] = kOutOfRange;
      continue;
    }
    in_range[i] = 1;
    const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(x), w - 2);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(y), h - 2);
    const double fx = x - double(x0), fy = y - double(y0);
    const double* r0 = &gv.data()[y0 * w + x0];
    const double* r1 = r0 + w;
    out[i] = (1 - fy) * ((1 - fx) * r0[0] + fx * r0[1]) + fy * ((1 - fx) * r1[0] + fx * r1[1]);
  }
  Var v = grid.tape->record("bilinear_sample", std::move(out), {grid, queries},
                            [in_range, h, w, n](const BackwardArgs& g) {
    const Tensor& gv = *g.in[0];
    const Tensor& qv = *g.in[1];
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_range[i]) continue;
      const double go = g.grad_out[i];
      if (go == 0.0) continue;
      const double x = qv[2 * i], y = qv[2 * i + 1];
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(x), w - 2);
      const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(y), h - 2);
      const double fx = x - double(x0), fy = y - double(y0);
      const std::size_t k = y0 * w + x0;
      if (g.grad_in[0]) {
        Tensor& gg = *g.grad_in[0];
        gg[k] += go * (1 - fx) * (1 - fy);
        gg[k + 1] += go * fx * (1 - fy);
        gg[k + w] += go * (1 - fx) * fy;
        gg[k + w + 1] += go * fx * fy;
      }
      if (g.grad_in[1]) {
        const double g00 = gv[k], g01 = gv[k + 1], g10 = gv[k + w], g11 = gv[k + w + 1];
        Tensor& gq = *g.grad_in[1];
        gq[2 * i] += go * ((1 - fy) * (g01 - g00) + fy * (g11 - g10));
        gq[2 * i + 1] += go * ((1 - fx) * (g10 - g00) + fx * (g11 - g01));
      }
    }
  });
  return Sampled{v, std::move(in_range)};
}

// y = M x for a constant m x n matrix M and a length-n vector x.
inline Var matvec(const Tensor& m, Var x) {
  if (m.rank() != 2 || m.dim(1) != x.size()) throw ShapeError("matvec", shape_str(m.shape()) + " x " + shape_str(x.shape()));
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  const Tensor& xv = x.value();
  Tensor y(Shape{rows}, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i] += m[i * cols + j] * xv[j];
  return x.tape->record("matvec", std::move(y), {x}, [m, rows, cols](const BackwardArgs& g) {
    Tensor& gi = *g.grad_in[0];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) gi[j] += m[i * cols + j] * g.grad_out[i];
  });
}

inline Var detach(Var a) { return a.tape->constant(a.value()); }

}  // namespace ad

inline Var operator+(Var a, Var b) { return ad::add(a, b); }
inline Var operator-(Var a, Var b) { return ad::sub(a, b); }
inline Var operator*(Var a, Var b) { return ad::mul(a, b); }
inline Var operator/(Var a, Var b) { return ad::div(a, b); }
inline Var operator-(Var a) { return ad::neg(a); }
inline Var operator+(Var a, double c) { return ad::shift(a, c); }
inline Var operator+(double c, Var a) { return ad::shift(a, c); }
inline Var operator-(Var a, double c) { return ad::shift(a, -c); }
inline Var operator-(double c, Var a) { return ad::shift(ad::neg(a), c); }
inline Var operator*(Var a, double s) { return ad::scale(a, s); }
inline Var operator*(double s, Var a) { return ad::scale(a, s); }
inline Var operator/(Var a, double s) { return ad::scale(a, 1.0 / s); }
inline Var operator/(double c, Var a) { return ad::div(a.tape->constant(Tensor::scalar(c)), a); }

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

using ParamMap = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;
using Expression = std::function<Var(Tape&, const VarMap&)>;

struct GradCheckEntry {
  std::string id;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  bool pass = true;
};

inline double evaluate(const Expression& expr, const ParamMap& inputs, GradientMap* grads = nullptr) {
  Tape tape;
  VarMap vars;
  for (const auto& [id, t] : inputs) vars.emplace(id, tape.parameter(id, t));
  Var root = expr(tape, vars);
  if (grads) *grads = tape.backward(root);
  return root.item();
}

// Central differences against backward(). The error of each entry is
// |analytic - numeric| / max(|analytic|, |numeric|, floor) where floor is
// 1e-3 of the largest numeric gradient magnitude over all inputs (so entries
// with a vanishing gradient are judged on the scale of the whole gradient).
inline GradCheckReport finite_diff_check(const Expression& expr, const ParamMap& inputs, double step,
                                         double tolerance) {
  GradientMap analytic;
  evaluate(expr, inputs, &analytic);
  ParamMap probe = inputs;
  ParamMap numeric;
  double gmax = 0;
  for (const auto& [id, t] : inputs) {
    Tensor num(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t[i];
      probe[id][i] = x0 + step;
      const double fp = evaluate(expr, probe);
      probe[id][i] = x0 - step;
      const double fm = evaluate(expr, probe);
      probe[id][i] = x0;
      num[i] = (fp - fm) / (2 * step);
      gmax = std::max(gmax, std::fabs(num[i]));
    }
    numeric.emplace(id, std::move(num));
  }
  const double floor = std::max(1e-3 * gmax, 1e-12);
  GradCheckReport report;
  for (const auto& [id, num] : numeric) {
    GradCheckEntry e{id};
    const Tensor& an = analytic.at(id);
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double err = std::fabs(an[i] - num[i]) / std::max({std::fabs(an[i]), std::fabs(num[i]), floor});
      if (err > e.max_rel_error) {
        e.max_rel_error = err;
        e.worst_index = i;
      }
    }
    e.pass = e.max_rel_error <= tolerance;
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace scenex
