#pragma once

// Tape-based reverse-mode differentiation.
//
// Every primitive's backward rule is itself written with primitives, so a
// backward pass run with create_graph = true records differentiable nodes.
// Gradient matching needs this: the attacker differentiates a distance between
// parameter gradients with respect to the candidate input.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gialab/tensor.hpp"

namespace gialab::ad {

class Graph;

/// Handle to one node on a Graph tape.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  bool valid() const { return graph != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using BackwardFn = std::function<std::vector<Var>(Graph&, const std::vector<Var>& inputs, Var self,
                                                  Var grad_out, const std::vector<bool>& want)>;

struct Node {
  const char* op = "leaf";
  Tensor value;
  std::vector<std::size_t> inputs;
  bool requires_grad = false;
  BackwardFn backward;
};

class Graph {
 public:
  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad, {}});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool rg = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.graph != this) throw std::invalid_argument(std::string(op) + ": input from another graph");
      ids.push_back(v.id);
      rg = rg || nodes_[v.id].requires_grad;
    }
    rg = rg && recording_;
    nodes_.push_back(Node{op, std::move(value), std::move(ids), rg, rg ? std::move(backward) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Drops every node with id >= n. Vars pointing past n become dangling.
  void truncate(std::size_t n) {
    if (n < nodes_.size()) nodes_.resize(n);
  }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  std::deque<Node> nodes_;
  bool recording_ = true;
};

inline const Tensor& Var::value() const { return graph->value(id); }

/// Scoped switch that stops new nodes from requiring gradients.
class NoGradScope {
 public:
  NoGradScope(Graph& g, bool active = true) : g_(g), prev_(g.recording()) {
    if (active) g_.set_recording(false);
  }
  ~NoGradScope() { g_.set_recording(prev_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph& g_;
  bool prev_;
};

namespace detail {

inline void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const char* op, const Shape& s, std::size_t r) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline std::vector<std::size_t> strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var affine(Var x, double scale, double shift);
Var sum(Var x);
Var expand_scalar(Var s, const Shape& shape);
Var reciprocal(Var x);

inline Var add(Var a, Var b) {
  detail::require_same("add", a.shape(), b.shape());
  Tensor v = detail::zip(a.value(), b.value(), [](double p, double q) { return p + q; });
  return a.graph->record("add", std::move(v), {a, b},
                         [](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{g, g};
                         });
}

inline Var sub(Var a, Var b) {
  detail::require_same("sub", a.shape(), b.shape());
  Tensor v = detail::zip(a.value(), b.value(), [](double p, double q) { return p - q; });
  return a.graph->record("sub", std::move(v), {a, b},
                         [](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>& want) {
                           return std::vector<Var>{g, want[1] ? affine(g, -1.0, 0.0) : Var{}};
                         });
}

inline Var mul(Var a, Var b) {
  detail::require_same("mul", a.shape(), b.shape());
  Tensor v = detail::zip(a.value(), b.value(), [](double p, double q) { return p * q; });
  return a.graph->record("mul", std::move(v), {a, b},
                         [](Graph&, const std::vector<Var>& in, Var, Var g, const std::vector<bool>& want) {
                           return std::vector<Var>{want[0] ? mul(g, in[1]) : Var{},
                                                   want[1] ? mul(g, in[0]) : Var{}};
                         });
}

/// scale * x + shift.
inline Var affine(Var x, double scale, double shift) {
  Tensor v = detail::map(x.value(), [=](double p) { return scale * p + shift; });
  return x.graph->record("affine", std::move(v), {x},
                         [scale](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{affine(g, scale, 0.0)};
                         });
}

inline Var scale(Var x, double s) { return affine(x, s, 0.0); }

inline Var relu(Var x) {
  const Tensor& xv = x.value();
  // NaN passes through so divergence stays visible downstream
  Tensor v = detail::map(xv, [](double p) { return p > 0.0 || std::isnan(p) ? p : 0.0; });
  return x.graph->record("relu", std::move(v), {x},
                         [](Graph& gr, const std::vector<Var>& in, Var, Var g, const std::vector<bool>&) {
                           Tensor mask = detail::map(in[0].value(), [](double p) { return p > 0.0 || std::isnan(p) ? 1.0 : 0.0; });
                           return std::vector<Var>{mul(g, gr.constant(std::move(mask)))};
                         });
}

inline Var leaky_relu(Var x, double alpha) {
  Tensor v = detail::map(x.value(), [=](double p) { return p > 0.0 ? p : alpha * p; });
  return x.graph->record("leaky_relu", std::move(v), {x},
                         [alpha](Graph& gr, const std::vector<Var>& in, Var, Var g, const std::vector<bool>&) {
                           Tensor mask =
                               detail::map(in[0].value(), [=](double p) { return p > 0.0 ? 1.0 : alpha; });
                           return std::vector<Var>{mul(g, gr.constant(std::move(mask)))};
                         });
}

inline Var sigmoid(Var x) {
  Tensor v = detail::map(x.value(), [](double p) {
    if (p >= 0.0) return 1.0 / (1.0 + std::exp(-p));
    double e = std::exp(p);
    return e / (1.0 + e);
  });
  return x.graph->record("sigmoid", std::move(v), {x},
                         [](Graph&, const std::vector<Var>&, Var y, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{mul(g, mul(y, affine(y, -1.0, 1.0)))};
                         });
}

inline Var tanh(Var x) {
  Tensor v = detail::map(x.value(), [](double p) { return std::tanh(p); });
  return x.graph->record("tanh", std::move(v), {x},
                         [](Graph&, const std::vector<Var>&, Var y, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{mul(g, affine(mul(y, y), -1.0, 1.0))};
                         });
}

inline Var sqrt(Var x) {
  for (double p : x.value().data()) {
    if (p < 0.0) throw std::domain_error("sqrt: negative input");
  }
  Tensor v = detail::map(x.value(), [](double p) { return std::sqrt(p); });
  return x.graph->record("sqrt", std::move(v), {x},
                         [](Graph&, const std::vector<Var>&, Var y, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{mul(g, affine(reciprocal(y), 0.5, 0.0))};
                         });
}

inline Var reciprocal(Var x) {
  Tensor v = detail::map(x.value(), [](double p) { return 1.0 / p; });
  return x.graph->record("reciprocal", std::move(v), {x},
                         [](Graph&, const std::vector<Var>&, Var y, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{affine(mul(g, mul(y, y)), -1.0, 0.0)};
                         });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

inline Var sum(Var x) {
  double s = 0.0;
  for (double p : x.value().data()) s += p;
  Shape in_shape = x.shape();
  return x.graph->record("sum", Tensor::scalar(s), {x},
                         [in_shape](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{expand_scalar(g, in_shape)};
                         });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var reshape(Var x, const Shape& shape);

/// Broadcasts a one-element tensor to `shape`.
inline Var expand_scalar(Var s, const Shape& shape) {
  if (s.value().size() != 1) throw ShapeError("expand_scalar: input " + shape_str(s.shape()) + " is not scalar");
  Tensor v(shape, s.value()[0]);
  return s.graph->record("expand_scalar", std::move(v), {s},
                         [](Graph&, const std::vector<Var>& in, Var, Var g, const std::vector<bool>&) {
                           Var t = sum(g);
                           if (t.shape() != in[0].shape()) t = reshape(t, in[0].shape());
                           return std::vector<Var>{t};
                         });
}

Var expand_last(Var x, std::size_t n);

/// Sums over the last axis, keeping it with extent 1.
inline Var sum_last(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("sum_last: scalar input");
  std::size_t n = s.back();
  Shape out_shape = s;
  out_shape.back() = 1;
  Tensor v(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < v.size(); ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += xv[r * n + j];
    v[r] = acc;
  }
  return x.graph->record("sum_last", std::move(v), {x},
                         [n](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{expand_last(g, n)};
                         });
}

/// Repeats a trailing axis of extent 1 `n` times.
inline Var expand_last(Var x, std::size_t n) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() != 1) throw ShapeError("expand_last: input " + shape_str(s) + " must end in 1");
  Shape out_shape = s;
  out_shape.back() = n;
  Tensor v(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < xv.size(); ++r) {
    for (std::size_t j = 0; j < n; ++j) v[r * n + j] = xv[r];
  }
  return x.graph->record("expand_last", std::move(v), {x},
                         [](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{sum_last(g)};
                         });
}

Var sum_channel(Var x);

/// Broadcasts a [C] vector along axis 1 of `shape` ([N, C, ...]).
inline Var broadcast_channel(Var b, const Shape& shape) {
  if (b.shape().size() != 1 || shape.size() < 2 || shape[1] != b.shape()[0]) {
    throw ShapeError("broadcast_channel: bias " + shape_str(b.shape()) + " does not fit " + shape_str(shape));
  }
  std::size_t n = shape[0], c = shape[1], inner = numel(shape) / (n * c);
  Tensor v(shape);
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < inner; ++j) v[(i * c + k) * inner + j] = bv[k];
  return b.graph->record("broadcast_channel", std::move(v), {b},
                         [](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{sum_channel(g)};
                         });
}

/// Sums an [N, C, ...] tensor down to [C].
inline Var sum_channel(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("sum_channel: input " + shape_str(s) + " has rank < 2");
  std::size_t n = s[0], c = s[1], inner = numel(s) / (n * c);
  Tensor v(Shape{c});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < inner; ++j) v[k] += xv[(i * c + k) * inner + j];
  Shape in_shape = s;
  return x.graph->record("sum_channel", std::move(v), {x},
                         [in_shape](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{broadcast_channel(g, in_shape)};
                         });
}

inline Var add_bias(Var x, Var b) { return add(x, broadcast_channel(b, x.shape())); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var x, const Shape& shape) {
  Tensor v = x.value().reshaped(shape);
  Shape in_shape = x.shape();
  return x.graph->record("reshape", std::move(v), {x},
                         [in_shape](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{reshape(g, in_shape)};
                         });
}

Var embed(Var x, const std::vector<std::size_t>& begin, const Shape& full);

namespace detail {

// Calls f(inner_flat, outer_flat) for every element of the box of extent
// `box` placed at `begin` inside a tensor of shape `outer`.
template <typename F>
void for_box(const Shape& outer, const std::vector<std::size_t>& begin, const Shape& box, F f) {
  auto ost = strides(outer);
  std::size_t n = numel(box);
  std::vector<std::size_t> idx(box.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < box.size(); ++d) off += (begin[d] + idx[d]) * ost[d];
    f(flat, off);
    for (std::size_t d = box.size(); d-- > 0;) {
      if (++idx[d] < box[d]) break;
      idx[d] = 0;
    }
  }
}

inline Shape box_shape(const char* op, const Shape& s, const std::vector<std::size_t>& begin,
                       const std::vector<std::size_t>& end) {
  if (begin.size() != s.size() || end.size() != s.size()) {
    throw ShapeError(std::string(op) + ": bounds rank does not match " + shape_str(s));
  }
  Shape out(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (begin[d] >= end[d] || end[d] > s[d]) {
      throw ShapeError(std::string(op) + ": bad range [" + std::to_string(begin[d]) + ", " +
                       std::to_string(end[d]) + ") on axis " + std::to_string(d) + " of " + shape_str(s));
    }
    out[d] = end[d] - begin[d];
  }
  return out;
}

}  // namespace detail

/// Box slice: element range [begin[d], end[d]) on every axis.
inline Var slice(Var x, const std::vector<std::size_t>& begin, const std::vector<std::size_t>& end) {
  Shape out_shape = detail::box_shape("slice", x.shape(), begin, end);
  Tensor v(out_shape);
  const Tensor& xv = x.value();
  detail::for_box(x.shape(), begin, out_shape, [&](std::size_t i, std::size_t o) { v[i] = xv[o]; });
  Shape in_shape = x.shape();
  return x.graph->record("slice", std::move(v), {x},
                         [begin, in_shape](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{embed(g, begin, in_shape)};
                         });
}

/// Zero tensor of shape `full` with `x` written at offset `begin`.
inline Var embed(Var x, const std::vector<std::size_t>& begin, const Shape& full) {
  std::vector<std::size_t> end(begin.size());
  for (std::size_t d = 0; d < begin.size() && d < x.shape().size(); ++d) end[d] = begin[d] + x.shape()[d];
  if (x.shape().size() != full.size()) throw ShapeError("embed: rank mismatch " + shape_str(x.shape()) + " into " + shape_str(full));
  detail::box_shape("embed", full, begin, end);
  Tensor v(full);
  const Tensor& xv = x.value();
  detail::for_box(full, begin, x.shape(), [&](std::size_t i, std::size_t o) { v[o] = xv[i]; });
  return x.graph->record("embed", std::move(v), {x},
                         [begin, end](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{slice(g, begin, end)};
                         });
}

/// Concatenation along `axis`.
inline Var concat(Var a, Var b, std::size_t axis) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size()) throw ShapeError("concat: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  for (std::size_t d = 0; d < sa.size(); ++d) {
    if (d != axis && sa[d] != sb[d]) throw ShapeError("concat: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape full = sa;
  full[axis] += sb[axis];
  std::vector<std::size_t> zero(sa.size(), 0), off(sa.size(), 0);
  off[axis] = sa[axis];
  return add(embed(a, zero, full), embed(b, off, full));
}

Var scatter_rows(Var g, const std::vector<std::size_t>& idx, std::size_t rows);

/// Selects rows (axis-0 entries) of `x` by index; repeats allowed.
inline Var gather_rows(Var x, const std::vector<std::size_t>& idx) {
  const Shape& s = x.shape();
  if (s.empty() || idx.empty()) throw ShapeError("gather_rows: needs rank >= 1 and a non-empty index list");
  std::size_t row = numel(s) / s[0];
  Shape out_shape = s;
  out_shape[0] = idx.size();
  Tensor v(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= s[0]) throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " + shape_str(s));
    std::copy_n(xv.data().begin() + idx[i] * row, row, v.data().begin() + i * row);
  }
  std::size_t rows = s[0];
  return x.graph->record("gather_rows", std::move(v), {x},
                         [idx, rows](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{scatter_rows(g, idx, rows)};
                         });
}

/// Adjoint of gather_rows: out[idx[i]] += g[i].
inline Var scatter_rows(Var g, const std::vector<std::size_t>& idx, std::size_t rows) {
  const Shape& s = g.shape();
  if (s.empty() || s[0] != idx.size()) throw ShapeError("scatter_rows: " + shape_str(s) + " vs " + std::to_string(idx.size()) + " indices");
  std::size_t row = numel(s) / s[0];
  Shape out_shape = s;
  out_shape[0] = rows;
  Tensor v(out_shape);
  const Tensor& gv = g.value();
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < row; ++j) v[idx[i] * row + j] += gv[i * row + j];
  return g.graph->record("scatter_rows", std::move(v), {g},
                         [idx](Graph&, const std::vector<Var>&, Var, Var gr, const std::vector<bool>&) {
                           return std::vector<Var>{gather_rows(gr, idx)};
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var transpose(Var a);

inline Var matmul(Var a, Var b) {
  const Shape &sa = a.shape(), &sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  }
  std::size_t n = sa[0], k = sa[1], m = sb[1];
  Tensor v(Shape{n, m});
  const Tensor &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < n; ++i) {
    double* out = v.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      double s = av[i * k + p];
      if (s == 0.0) continue;
      const double* brow = bv.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) out[j] += s * brow[j];
    }
  }
  return a.graph->record("matmul", std::move(v), {a, b},
                         [](Graph&, const std::vector<Var>& in, Var, Var g, const std::vector<bool>& want) {
                           return std::vector<Var>{want[0] ? matmul(g, transpose(in[1])) : Var{},
                                                   want[1] ? matmul(transpose(in[0]), g) : Var{}};
                         });
}

inline Var transpose(Var a) {
  detail::require_rank("transpose", a.shape(), 2);
  std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor v(Shape{m, n});
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[j * n + i] = av[i * m + j];
  return a.graph->record("transpose", std::move(v), {a},
                         [](Graph&, const std::vector<Var>&, Var, Var g, const std::vector<bool>&) {
                           return std::vector<Var>{transpose(g)};
                         });
}

// ---------------------------------------------------------------------------
// Convolution. conv2d, its input adjoint, and its weight adjoint are the three
// partial derivatives of one trilinear form, so each one's backward is
// expressed with the other two.

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, ConvGeometry g) {
  if (in + 2 * g.pad < k) return 0;
  return (in + 2 * g.pad - k) / g.stride + 1;
}

Var conv2d_input_grad(Var gy, Var w, ConvGeometry geo, const Shape& in_shape);
Var conv2d_weight_grad(Var x, Var gy, ConvGeometry geo, std::size_t kh, std::size_t kw);

namespace detail {

// Visits the sliding window row by row: f(x offset, w index, y offset, n)
// covers the n output positions y[yo + t] that read x[xo + t * stride].
template <typename F>
void conv_visit(const Shape& xs, const Shape& ws, const Shape& ys, ConvGeometry geo, F f) {
  std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  std::size_t O = ws[0], KH = ws[2], KW = ws[3];
  std::size_t HO = ys[2], WO = ys[3];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < KH; ++i)
          for (std::size_t j = 0; j < KW; ++j) {
            std::size_t widx = ((o * C + c) * KH + i) * KW + j;
            // valid ow satisfy 0 <= ow*stride + j - pad < W
            std::size_t ow_lo = j >= geo.pad ? 0 : (geo.pad - j + geo.stride - 1) / geo.stride;
            std::size_t ow_hi = W + geo.pad > j ? std::min(WO, (W + geo.pad - j - 1) / geo.stride + 1) : 0;
            if (ow_lo >= ow_hi) continue;
            for (std::size_t oh = 0; oh < HO; ++oh) {
              std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * geo.stride + i) - static_cast<std::ptrdiff_t>(geo.pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              std::size_t xrow = ((b * C + c) * H + static_cast<std::size_t>(ih)) * W;
              std::size_t yrow = ((b * O + o) * HO + oh) * WO;
              f(xrow + ow_lo * geo.stride + j - geo.pad, widx, yrow + ow_lo, ow_hi - ow_lo);
            }
          }
}

inline Shape conv_out_shape(const char* op, const Shape& xs, const Shape& ws, ConvGeometry geo) {
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || geo.stride == 0) {
    throw ShapeError(std::string(op) + ": input " + shape_str(xs) + " incompatible with kernel " + shape_str(ws));
  }
  std::size_t ho = conv_out_extent(xs[2], ws[2], geo), wo = conv_out_extent(xs[3], ws[3], geo);
  if (ho == 0 || wo == 0) {
    throw ShapeError(std::string(op) + ": kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  }
  return Shape{xs[0], ws[0], ho, wo};
}

}  // namespace detail

/// x [B,C,H,W] * w [O,C,KH,KW] -> [B,O,HO,WO] (cross-correlation).
inline Var conv2d(Var x, Var w, ConvGeometry geo) {
  Shape ys = detail::conv_out_shape("conv2d", x.shape(), w.shape(), geo);
  Tensor v(ys);
  const double* xv = x.value().data().data();
  const double* wv = w.value().data().data();
  double* yv = v.data().data();
  std::size_t st = geo.stride;
  detail::conv_visit(x.shape(), w.shape(), ys, geo, [&](std::size_t xo, std::size_t wi, std::size_t yo, std::size_t n) {
    double wk = wv[wi];
    const double* xp = xv + xo;
    double* yp = yv + yo;
    for (std::size_t t = 0; t < n; ++t) yp[t] += wk * xp[t * st];
  });
  Shape xs = x.shape();
  std::size_t kh = w.shape()[2], kw = w.shape()[3];
  return x.graph->record("conv2d", std::move(v), {x, w},
                         [geo, xs, kh, kw](Graph&, const std::vector<Var>& in, Var, Var g, const std::vector<bool>& want) {
                           return std::vector<Var>{want[0] ? conv2d_input_grad(g, in[1], geo, xs) : Var{},
                                                   want[1] ? conv2d_weight_grad(in[0], g, geo, kh, kw) : Var{}};
                         });
}

/// Adjoint of conv2d with respect to its input; also serves as a transposed
/// convolution when `in_shape` is the upsampled shape.
inline Var conv2d_input_grad(Var gy, Var w, ConvGeometry geo, const Shape& in_shape) {
  Shape ys = detail::conv_out_shape("conv2d_input_grad", in_shape, w.shape(), geo);
  if (ys != gy.shape()) {
    throw ShapeError("conv2d_input_grad: upstream " + shape_str(gy.shape()) + " does not match " + shape_str(ys));
  }
  Tensor v(in_shape);
  const double* gv = gy.value().data().data();
  const double* wv = w.value().data().data();
  double* xv = v.data().data();
  std::size_t st = geo.stride;
  detail::conv_visit(in_shape, w.shape(), ys, geo, [&](std::size_t xo, std::size_t wi, std::size_t yo, std::size_t n) {
    double wk = wv[wi];
    double* xp = xv + xo;
    const double* gp = gv + yo;
    for (std::size_t t = 0; t < n; ++t) xp[t * st] += wk * gp[t];
  });
  std::size_t kh = w.shape()[2], kw = w.shape()[3];
  return gy.graph->record("conv2d_input_grad", std::move(v), {gy, w},
                          [geo, kh, kw](Graph&, const std::vector<Var>& in, Var, Var g, const std::vector<bool>& want) {
                            return std::vector<Var>{want[0] ? conv2d(g, in[1], geo) : Var{},
                                                    want[1] ? conv2d_weight_grad(g, in[0], geo, kh, kw) : Var{}};
                          });
}

/// Adjoint of conv2d with respect to its kernel.
inline Var conv2d_weight_grad(Var x, Var gy, ConvGeometry geo, std::size_t kh, std::size_t kw) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || gy.shape().size() != 4) throw ShapeError("conv2d_weight_grad: rank mismatch");
  Shape ws{gy.shape()[1], xs[1], kh, kw};
  Shape ys = detail::conv_out_shape("conv2d_weight_grad", xs, ws, geo);
  if (ys != gy.shape()) {
    throw ShapeError("conv2d_weight_grad: upstream " + shape_str(gy.shape()) + " does not match " + shape_str(ys));
  }
  Tensor v(ws);
  const double* xv = x.value().data().data();
  const double* gv = gy.value().data().data();
  double* wv = v.data().data();
  std::size_t st = geo.stride;
  detail::conv_visit(xs, ws, ys, geo, [&](std::size_t xo, std::size_t wi, std::size_t yo, std::size_t n) {
    const double* xp = xv + xo;
    const double* gp = gv + yo;
    double acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) acc += xp[t * st] * gp[t];
    wv[wi] += acc;
  });
  Shape xs_copy = xs;
  return x.graph->record("conv2d_weight_grad", std::move(v), {x, gy},
                         [geo, xs_copy](Graph&, const std::vector<Var>& in, Var, Var g, const std::vector<bool>& want) {
                           return std::vector<Var>{want[0] ? conv2d_input_grad(in[1], g, geo, xs_copy) : Var{},
                                                   want[1] ? conv2d(in[0], g, geo) : Var{}};
                         });
}

/// Transposed convolution: [B,C,H,W] with kernel [C,O,KH,KW] -> [B,O,(H-1)s-2p+KH, ...].
inline Var conv_transpose2d(Var x, Var w, ConvGeometry geo) {
  const Shape &xs = x.shape(), &ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0]) {
    throw ShapeError("conv_transpose2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ws));
  }
  std::size_t h = (xs[2] - 1) * geo.stride + ws[2], wd = (xs[3] - 1) * geo.stride + ws[3];
  if (h <= 2 * geo.pad || wd <= 2 * geo.pad) throw ShapeError("conv_transpose2d: padding too large");
  return conv2d_input_grad(x, w, geo, Shape{xs[0], ws[1], h - 2 * geo.pad, wd - 2 * geo.pad});
}

// ---------------------------------------------------------------------------
// Losses

/// Row-wise softmax over the last axis.
inline Var softmax(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("softmax: scalar input");
  std::size_t n = s.back(), rows = x.value().size() / n;
  Tensor v(s);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = xv[r * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[r * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (v[r * n + j] = std::exp(xv[r * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) v[r * n + j] /= z;
  }
  return x.graph->record("softmax", std::move(v), {x},
                         [n](Graph&, const std::vector<Var>&, Var y, Var g, const std::vector<bool>&) {
                           Var yg = mul(y, g);
                           return std::vector<Var>{sub(yg, mul(y, expand_last(sum_last(yg), n)))};
                         });
}

/// Mean cross-entropy of logits [B,K] against integer labels.
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
  }
  std::size_t B = s[0], K = s[1];
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  const Tensor& z = logits.value();
  double loss = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    double mx = z[r * K];
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, z[r * K + j]);
    double lse = 0.0;
    for (std::size_t j = 0; j < K; ++j) lse += std::exp(z[r * K + j] - mx);
    loss += std::log(lse) + mx - z[r * K + static_cast<std::size_t>(labels[r])];
  }
  loss /= static_cast<double>(B);
  Tensor onehot(s);
  for (std::size_t r = 0; r < B; ++r) onehot[r * K + static_cast<std::size_t>(labels[r])] = 1.0;
  return logits.graph->record(
      "softmax_cross_entropy", Tensor::scalar(loss), {logits},
      [onehot, B](Graph& gr, const std::vector<Var>& in, Var, Var g, const std::vector<bool>&) {
        Var diff = sub(softmax(in[0]), gr.constant(onehot));
        return std::vector<Var>{mul(expand_scalar(affine(g, 1.0 / static_cast<double>(B), 0.0), diff.shape()), diff)};
      });
}

/// Mean squared difference.
inline Var mse(Var a, Var b) {
  detail::require_same("mse", a.shape(), b.shape());
  Var d = sub(a, b);
  return mean(mul(d, d));
}

constexpr double kTvEpsilon = 1e-8;

/// Isotropic total variation of a [B,C,H,W] batch:
/// sum over the (H-1)x(W-1) grid of sqrt(dx^2 + dy^2 + eps).
inline Var total_variation(Var x, double eps = kTvEpsilon) {
  const Shape& s = x.shape();
  detail::require_rank("total_variation", s, 4);
  if (s[2] < 2 || s[3] < 2) throw ShapeError("total_variation: needs H, W >= 2, got " + shape_str(s));
  std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  Var base = slice(x, {0, 0, 0, 0}, {B, C, H - 1, W - 1});
  Var right = slice(x, {0, 0, 0, 1}, {B, C, H - 1, W});
  Var down = slice(x, {0, 0, 1, 0}, {B, C, H, W - 1});
  Var dh = sub(right, base);
  Var dv = sub(down, base);
  Var sq = affine(add(mul(dh, dh), mul(dv, dv)), 1.0, eps);
  return sum(sqrt(sq));
}

// ---------------------------------------------------------------------------
// Backward pass

/// Gradients of scalar `loss` with respect to each of `wrt`. With
/// create_graph the results are differentiable nodes; otherwise the pass runs
/// without recording and the results are plain values on the tape.
inline std::vector<Var> grad(Graph& g, Var loss, std::span<const Var> wrt, bool create_graph = false) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  std::size_t n = loss.id + 1;
  std::vector<char> needed(n, 0);
  for (const Var& w : wrt) {
    if (w.id < n) needed[w.id] = 1;
  }
  for (std::size_t id = 0; id < n; ++id) {
    if (needed[id]) continue;
    const Node& nd = g.node(id);
    if (!nd.requires_grad) continue;
    for (std::size_t in : nd.inputs) {
      if (needed[in]) {
        needed[id] = 1;
        break;
      }
    }
  }

  NoGradScope scope(g, !create_graph);
  std::vector<Var> grads(n);
  grads[loss.id] = g.constant(Tensor(loss.shape(), 1.0));
  for (std::size_t id = n; id-- > 0;) {
    if (!grads[id].valid() || !needed[id]) continue;
    const Node& nd = g.node(id);
    if (!nd.backward) continue;
    std::vector<Var> inputs;
    std::vector<bool> want;
    inputs.reserve(nd.inputs.size());
    for (std::size_t in : nd.inputs) {
      inputs.push_back(Var{&g, in});
      want.push_back(needed[in] != 0);
    }
    std::vector<Var> gin = nd.backward(g, inputs, Var{&g, id}, grads[id], want);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!want[k] || !gin[k].valid()) continue;
      std::size_t in = inputs[k].id;
      grads[in] = grads[in].valid() ? add(grads[in], gin[k]) : gin[k];
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id < n && grads[w.id].valid()) {
      out.push_back(grads[w.id]);
    } else {
      out.push_back(g.constant(Tensor::zeros(w.shape())));
    }
  }
  return out;
}

/// Value-only gradients; the tape is restored to its prior length.
inline std::vector<Tensor> gradients(Graph& g, Var loss, std::span<const Var> wrt) {
  std::size_t mark = g.size();
  std::vector<Var> gv = grad(g, loss, wrt, false);
  std::vector<Tensor> out;
  out.reserve(gv.size());
  for (const Var& v : gv) out.push_back(v.value());
  g.truncate(mark);
  return out;
}

}  // namespace gialab::ad
