#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tickgp/core/autodiff.hpp"

namespace tickgp {

namespace detail {

/// Numpy-style broadcast of two shapes; strides are 0 along broadcast axes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

inline Broadcast broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.resize(r);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size() - r;  // may wrap; guarded below
    const std::size_t ib = i + b.size() - r;
    const bool has_a = i + a.size() >= r;
    const bool has_b = i + b.size() >= r;
    const std::size_t da = has_a ? a[ia] : 1;
    const std::size_t db = has_b ? b[ib] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    bc.out[i] = std::max(da, db);
    if (has_a && da != 1) bc.stride_a[i] = sa[ia];
    if (has_b && db != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

/// Calls f(out_index, a_index, b_index) over the broadcast output in row-major order.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::size_t total = shape_size(bc.out);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t inner = bc.out[r - 1];
  const std::size_t sa = bc.stride_a[r - 1], sb = bc.stride_b[r - 1];
  for (std::size_t o = 0; o < total;) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, ia + k * sa, ib + k * sb);
    o += inner;
    // advance the outer multi-index
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= idx[d] * bc.stride_a[d];
      ib -= idx[d] * bc.stride_b[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class DA, class DB>
Var binary_op(const char* name, const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() == y.shape()) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
    return make_op(name, std::move(out), {a, b}, [da, db](Node& self) {
      const Tensor& g = self.grad;
      const Tensor& xv = parent_value(self, 0);
      const Tensor& yv = parent_value(self, 1);
      if (wants_grad(self, 0)) {
        auto& ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(xv[i], yv[i], self.value[i]);
      }
      if (wants_grad(self, 1)) {
        auto& gb = parent_grad(self, 1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(xv[i], yv[i], self.value[i]);
      }
    });
  }
  auto bc = broadcast(x.shape(), y.shape());
  Tensor out(bc.out);
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(x[i], y[j]); });
  return make_op(name, std::move(out), {a, b}, [bc, da, db](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& xv = parent_value(self, 0);
    const Tensor& yv = parent_value(self, 1);
    const bool wa = wants_grad(self, 0), wb = wants_grad(self, 1);
    Tensor* ga = wa ? &parent_grad(self, 0) : nullptr;
    Tensor* gb = wb ? &parent_grad(self, 1) : nullptr;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (wa) (*ga)[i] += g[o] * da(xv[i], yv[j], self.value[o]);
      if (wb) (*gb)[j] += g[o] * db(xv[i], yv[j], self.value[o]);
    });
  });
}

template <class Fwd, class Deriv>
Var unary_op(const char* name, const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_op(name, std::move(out), {a}, [deriv](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& xv = parent_value(self, 0);
    auto& ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(xv[i], self.value[i]);
  });
}

inline double softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---- elementwise -------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary_op("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary_op("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var exp(const Var& a) {
  return detail::unary_op("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw NumericalError("log of non-positive value " + std::to_string(v));
  return detail::unary_op("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return detail::unary_op("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// sqrt(max(x, floor)); the gradient is zero where the floor is active.
inline Var sqrt(const Var& a, double floor = 0.0) {
  return detail::unary_op(
      "sqrt", a, [floor](double x) { return std::sqrt(std::max(x, floor)); },
      [floor](double x, double y) { return (x > floor && y > 0.0) ? 0.5 / y : 0.0; });
}

inline Var softplus(const Var& a) {
  return detail::unary_op("softplus", a, detail::softplus_value,
                          [](double x, double) { return detail::sigmoid_value(x); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

// ---- reductions --------------------------------------------------------------

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op("sum", Tensor::scalar(s), {a}, [](Node& self) {
    const double g = self.grad[0];
    auto& ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

namespace detail {
struct AxisSplit {
  std::size_t outer, extent, inner;
  Shape reduced;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisSplit sp{1, s[axis], 1, {}};
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) sp.reduced.push_back(s[i]);
  return sp;
}
}  // namespace detail

/// Sum over one axis; the axis is removed from the result.
inline Var sum(const Var& a, std::size_t axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor out(sp.reduced);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.extent + k) * sp.inner + i];
  return make_op("sum_axis", std::move(out), {a}, [sp](Node& self) {
    auto& ga = parent_grad(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.extent; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.extent + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

/// log Σ exp along an axis, shifted by the running max so large inputs do not overflow.
inline Var log_sum_exp(const Var& a, std::size_t axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  const Tensor& x = a.value();
  Tensor out(sp.reduced);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) m = std::max(m, x[(o * sp.extent + k) * sp.inner + i]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) s += std::exp(x[(o * sp.extent + k) * sp.inner + i] - m);
      out[o * sp.inner + i] = m + std::log(s);
    }
  return make_op("log_sum_exp", std::move(out), {a}, [sp](Node& self) {
    auto& ga = parent_grad(self, 0);
    const Tensor& xv = parent_value(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double lse = self.value[o * sp.inner + i];
        const double g = self.grad[o * sp.inner + i];
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const std::size_t j = (o * sp.extent + k) * sp.inner + i;
          ga[j] += g * std::exp(xv[j] - lse);
        }
      }
  });
}

// ---- shape manipulation --------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op("reshape", std::move(out), {a}, [](Node& self) { accumulate_grad(self, 0, self.grad); });
}

/// Swaps the last two axes (batched).
inline Var transpose(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor out(s);
  for (std::size_t b = 0; b < x.batch_count(); ++b) out.matrix(b) = x.matrix(b).transpose();
  return make_op("transpose", std::move(out), {a}, [](Node& self) {
    auto& ga = parent_grad(self, 0);
    for (std::size_t b = 0; b < self.grad.batch_count(); ++b) ga.matrix(b) += self.grad.matrix(b).transpose();
  });
}

/// Lower triangle (including the diagonal) of every trailing square block; the rest set to 0.
inline Var tril(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() < 2 || x.dim(x.rank() - 1) != x.dim(x.rank() - 2)) throw ShapeError("tril needs square trailing dims");
  const std::size_t n = x.dim(x.rank() - 1);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < x.batch_count(); ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) out[(b * n + i) * n + j] = x[(b * n + i) * n + j];
  return make_op("tril", std::move(out), {a}, [n](Node& self) {
    auto& ga = parent_grad(self, 0);
    for (std::size_t b = 0; b < self.grad.batch_count(); ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) ga[(b * n + i) * n + j] += self.grad[(b * n + i) * n + j];
  });
}

/// Diagonal of every trailing square block: [..., n, n] -> [..., n].
inline Var diag_part(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() < 2 || x.dim(x.rank() - 1) != x.dim(x.rank() - 2)) throw ShapeError("diag_part needs square trailing dims");
  const std::size_t n = x.dim(x.rank() - 1);
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor out(s);
  for (std::size_t b = 0; b < x.batch_count(); ++b)
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = x[(b * n + i) * n + i];
  return make_op("diag_part", std::move(out), {a}, [n](Node& self) {
    auto& ga = parent_grad(self, 0);
    for (std::size_t b = 0; b < self.grad.size() / std::max<std::size_t>(n, 1); ++b)
      for (std::size_t i = 0; i < n; ++i) ga[(b * n + i) * n + i] += self.grad[b * n + i];
  });
}

/// Gathers along the flattened trailing axes: x viewed as [B x K]; out[b, i] = x[b, index[i]].
/// `tail` is the shape that replaces the trailing axes (product must equal index.size()).
inline Var gather(const Var& a, std::size_t leading_axes, const std::vector<std::size_t>& index, const Shape& tail) {
  const Tensor& x = a.value();
  if (leading_axes > x.rank()) throw ShapeError("gather: leading axes exceed rank");
  std::size_t batch = 1;
  for (std::size_t i = 0; i < leading_axes; ++i) batch *= x.dim(i);
  const std::size_t k = batch ? x.size() / batch : 0;
  if (shape_size(tail) != index.size()) throw ShapeError("gather: tail shape does not match index count");
  for (std::size_t id : index)
    if (id >= k) throw ShapeError("gather: index out of range");
  Shape s(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(leading_axes));
  s.insert(s.end(), tail.begin(), tail.end());
  Tensor out(s);
  const std::size_t m = index.size();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i) out[b * m + i] = x[b * k + index[i]];
  return make_op("gather", std::move(out), {a}, [index, batch, k, m](Node& self) {
    auto& ga = parent_grad(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i) ga[b * k + index[i]] += self.grad[b * m + i];
  });
}

/// Concatenates along axis 0.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape s = parts[0].shape();
  if (s.empty()) throw ShapeError("concat needs rank >= 1");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1))
      throw ShapeError("concat: trailing shapes differ");
    rows += p.dim(0);
  }
  s[0] = rows;
  Tensor out(s);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.size();
  }
  return make_op("concat", std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (!wants_grad(self, i)) continue;
      auto& g = parent_grad(self, i);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[offsets[i] + k];
    }
  });
}

// ---- products ------------------------------------------------------------------

/// Matrix product with optional transposes. Operands are rank 2 or rank 3 (batched); a rank-2
/// operand is broadcast over the other's batch.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() < 2 || y.rank() < 2 || x.rank() > 3 || y.rank() > 3) throw ShapeError("matmul needs rank 2 or 3 operands");
  const std::size_t bx = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t by = y.rank() == 3 ? y.dim(0) : 1;
  if (x.rank() == 3 && y.rank() == 3 && bx != by) throw ShapeError("matmul batch mismatch");
  const std::size_t batch = std::max(bx, by);
  const std::size_t xr = x.dim(x.rank() - 2), xc = x.dim(x.rank() - 1);
  const std::size_t yr = y.dim(y.rank() - 2), yc = y.dim(y.rank() - 1);
  const std::size_t m = trans_a ? xc : xr, k = trans_a ? xr : xc;
  const std::size_t k2 = trans_b ? yc : yr, n = trans_b ? yr : yc;
  if (k != k2)
    throw ShapeError("matmul inner extents differ: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  Shape s = (x.rank() == 3 || y.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
  Tensor out(s);
  auto prod = [&](std::size_t i) {
    auto xm = x.matrix(bx == 1 ? 0 : i);
    auto ym = y.matrix(by == 1 ? 0 : i);
    auto om = out.matrix(i);
    if (!trans_a && !trans_b) om.noalias() = xm * ym;
    else if (trans_a && !trans_b) om.noalias() = xm.transpose() * ym;
    else if (!trans_a && trans_b) om.noalias() = xm * ym.transpose();
    else om.noalias() = xm.transpose() * ym.transpose();
  };
  for (std::size_t i = 0; i < batch; ++i) prod(i);
  return make_op("matmul", std::move(out), {a, b}, [trans_a, trans_b, bx, by, batch](Node& self) {
    const Tensor& xv = parent_value(self, 0);
    const Tensor& yv = parent_value(self, 1);
    for (std::size_t i = 0; i < batch; ++i) {
      auto g = self.grad.matrix(i);
      auto xm = xv.matrix(bx == 1 ? 0 : i);
      auto ym = yv.matrix(by == 1 ? 0 : i);
      if (wants_grad(self, 0)) {
        auto ga = parent_grad(self, 0).matrix(bx == 1 ? 0 : i);
        // C = op(A) op(B): dop(A) = G op(B)^T
        if (!trans_a) {
          if (!trans_b) ga.noalias() += g * ym.transpose();
          else ga.noalias() += g * ym;
        } else {
          if (!trans_b) ga.noalias() += ym * g.transpose();
          else ga.noalias() += ym.transpose() * g.transpose();
        }
      }
      if (wants_grad(self, 1)) {
        auto gb = parent_grad(self, 1).matrix(by == 1 ? 0 : i);
        if (!trans_b) {
          if (!trans_a) gb.noalias() += xm.transpose() * g;
          else gb.noalias() += xm * g;
        } else {
          if (!trans_a) gb.noalias() += g.transpose() * xm;
          else gb.noalias() += g.transpose() * xm.transpose();
        }
      }
    }
  });
}

}  // namespace tickgp
