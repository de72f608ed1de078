#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "tickgp/core/ops.hpp"

namespace tickgp {

enum class KernelFamily { SquaredExponential, Matern32 };

inline const char* family_name(KernelFamily f) {
  return f == KernelFamily::SquaredExponential ? "se" : "matern32";
}

inline KernelFamily parse_family(const std::string& s) {
  if (s == "se" || s == "squared_exponential") return KernelFamily::SquaredExponential;
  if (s == "matern32") return KernelFamily::Matern32;
  throw ConfigError("unknown kernel family '" + s + "'");
}

namespace detail {

/// Unit-variance profile phi(r^2) of a stationary kernel in lengthscale-scaled coordinates.
///   SE:        exp(-r^2 / 2)
///   Matern32:  (1 + sqrt3 r) exp(-sqrt3 r)
/// together with d phi / d(r^2), which is finite at r = 0 for both families.
inline void profile(KernelFamily f, const double* r2, std::size_t n, double* phi, double* dphi) {
  Eigen::Map<const Eigen::ArrayXd> r(r2, static_cast<Eigen::Index>(n));
  Eigen::Map<Eigen::ArrayXd> p(phi, static_cast<Eigen::Index>(n));
  if (f == KernelFamily::SquaredExponential) {
    p = (-0.5 * r).exp();
    if (dphi) Eigen::Map<Eigen::ArrayXd>(dphi, static_cast<Eigen::Index>(n)) = -0.5 * p;
  } else {
    const double s3 = std::numbers::sqrt3;
    if (dphi) {
      Eigen::Map<Eigen::ArrayXd> d(dphi, static_cast<Eigen::Index>(n));
      d = (-s3 * r.sqrt()).exp();
      p = (1.0 + s3 * r.sqrt()) * d;
      d *= -1.5;
    } else {
      p = (1.0 + s3 * r.sqrt()) * (-s3 * r.sqrt()).exp();
    }
  }
}

inline double profile_scalar(KernelFamily f, double r2) {
  double p = 0.0;
  profile(f, &r2, 1, &p, nullptr);
  return p;
}

/// Squared distances between rows of a [A x D] and b [B x D], scaled by `s` (= 1 / lengthscale^2),
/// produced one row at a time. Small or low-dimensional problems use exact differences; larger ones
/// use |a|^2 + |b|^2 - 2 a.b with a GEMM, clamped at 0.
class DistanceRows {
 public:
  DistanceRows(ConstMatrixMap a, ConstMatrixMap b, double s, bool upper_only = false) : a_(a), b_(b), s_(s) {
    direct_ = a.cols() <= 3 || a.rows() * b.rows() * a.cols() <= (1 << 14);
    if (!direct_) {
      na_ = a.rowwise().squaredNorm().array();
      nb_ = b.rowwise().squaredNorm().array();
      if (upper_only) {
        g_.setZero(a.rows(), a.rows());
        g_.selfadjointView<Eigen::Upper>().rankUpdate(a);
      } else {
        g_.noalias() = a * b.transpose();
      }
    }
  }

  /// Writes r2(i, j0 .. j0+len) into out.
  void row(Eigen::Index i, Eigen::Index j0, Eigen::Index len, double* out) const {
    Eigen::Map<Eigen::ArrayXd> o(out, len);
    if (direct_) {
      for (Eigen::Index j = 0; j < len; ++j) o[j] = s_ * (a_.row(i) - b_.row(j0 + j)).squaredNorm();
    } else {
      o = (nb_.segment(j0, len) + na_[i] - 2.0 * g_.row(i).segment(j0, len).transpose().array()).max(0.0) * s_;
    }
  }

  void full(RowMatrix& r2) const {
    r2.resize(a_.rows(), b_.rows());
    for (Eigen::Index i = 0; i < a_.rows(); ++i) row(i, 0, b_.rows(), r2.row(i).data());
  }

 private:
  ConstMatrixMap a_, b_;
  double s_;
  bool direct_ = true;
  RowMatrix g_;
  Eigen::ArrayXd na_, nb_;
};

/// Accumulates the raw-input gradients of sum(W .* s r2(a, b)):
///   a_bar += 2 s (diag(W 1) a - W b),  b_bar += 2 s (diag(W^T 1) b - W^T a).
inline void distance_backward(const RowMatrix& w, ConstMatrixMap a, ConstMatrixMap b, double s, double* a_bar,
                              double* b_bar) {
  if (a_bar) {
    MatrixMap ga(a_bar, a.rows(), a.cols());
    ga.noalias() += (2.0 * s) * (w.rowwise().sum().asDiagonal() * a);
    ga.noalias() -= (2.0 * s) * (w * b);
  }
  if (b_bar) {
    MatrixMap gb(b_bar, b.rows(), b.cols());
    gb.noalias() += (2.0 * s) * (w.colwise().sum().transpose().asDiagonal() * b);
    gb.noalias() -= (2.0 * s) * (w.transpose() * a);
  }
}

/// Same for a symmetric W and a == b: x_bar += 4 s (diag(W 1) x - W x).
inline void self_distance_backward(const RowMatrix& w, ConstMatrixMap x, double s, double* x_bar) {
  MatrixMap gx(x_bar, x.rows(), x.cols());
  gx.noalias() += (4.0 * s) * (w.rowwise().sum().asDiagonal() * x);
  gx.noalias() -= (4.0 * s) * (w * x);
}

inline ConstMatrixMap rows_view(const Tensor& t, std::size_t offset_rows, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(t.data() + offset_rows * cols, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline double* rows_ptr(Tensor& t, std::size_t offset_rows, std::size_t cols) { return t.data() + offset_rows * cols; }

inline double scalar_of(const Var& v) {
  if (v.size() != 1) throw ShapeError("expected a scalar, got " + shape_string(v.shape()));
  return v.value()[0];
}

inline void add_to_scalar(Node& self, std::size_t i, double g) {
  if (wants_grad(self, i)) parent_grad(self, i)[0] += g;
}

inline double inv_sq(const Var& lengthscale) {
  const double l = scalar_of(lengthscale);
  if (!(l > 0.0)) throw NumericalError("lengthscale must be positive, got " + std::to_string(l));
  return 1.0 / (l * l);
}

}  // namespace detail

/// Gram matrix variance * phi(|a_i - b_j|^2 / l^2) for a scalar lengthscale l.
/// a: [A x D], b: [B x D], variance, lengthscale: scalars -> [A x B].
inline Var stationary_gram(KernelFamily family, const Var& a, const Var& b, const Var& variance,
                           const Var& lengthscale) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("stationary_gram: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const double var = detail::scalar_of(variance);
  const double s = detail::inv_sq(lengthscale);
  RowMatrix r2;
  detail::DistanceRows(a.value().matrix(), b.value().matrix(), s).full(r2);
  Tensor out(Shape{a.dim(0), b.dim(0)});
  detail::profile(family, r2.data(), r2.size(), out.data(), nullptr);
  out.matrix() *= var;
  const bool same = a.node_ptr() == b.node_ptr();
  return make_op("stationary_gram", std::move(out), {a, b, variance, lengthscale},
                 [family, same, r2 = std::move(r2)](Node& self) {
                   const double var = parent_value(self, 2)[0];
                   const double l = parent_value(self, 3)[0];
                   const double s = 1.0 / (l * l);
                   RowMatrix phi(r2.rows(), r2.cols()), dphi(r2.rows(), r2.cols());
                   detail::profile(family, r2.data(), r2.size(), phi.data(), dphi.data());
                   auto g = self.grad.matrix();
                   detail::add_to_scalar(self, 2, (g.array() * phi.array()).sum());
                   RowMatrix w = (g.array() * dphi.array() * var).matrix();
                   detail::add_to_scalar(self, 3, -2.0 / l * (w.array() * r2.array()).sum());
                   const Tensor& av = parent_value(self, 0);
                   const Tensor& bv = parent_value(self, 1);
                   if (same) {
                     if (wants_grad(self, 0)) {
                       RowMatrix ws = 0.5 * (w + w.transpose());
                       detail::self_distance_backward(ws, av.matrix(), s, parent_grad(self, 0).data());
                     }
                     return;
                   }
                   detail::distance_backward(w, av.matrix(), bv.matrix(), s,
                                             wants_grad(self, 0) ? parent_grad(self, 0).data() : nullptr,
                                             wants_grad(self, 1) ? parent_grad(self, 1).data() : nullptr);
                 });
}

/// Per-item self Gram: x [N x P x D] -> [N x P x P].
inline Var batched_self_gram(KernelFamily family, const Var& x, const Var& variance, const Var& lengthscale) {
  if (x.rank() != 3) throw ShapeError("batched_self_gram needs [N x P x D], got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), p = x.dim(1), d = x.dim(2);
  const double var = detail::scalar_of(variance);
  const double s = detail::inv_sq(lengthscale);
  Tensor out(Shape{n, p, p});
  RowMatrix r2;
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = detail::rows_view(x.value(), i * p, p, d);
    detail::DistanceRows(xi, xi, s).full(r2);
    detail::profile(family, r2.data(), r2.size(), out.data() + i * p * p, nullptr);
  }
  for (auto& v : out.values()) v *= var;
  return make_op("batched_self_gram", std::move(out), {x, variance, lengthscale}, [family, n, p, d](Node& self) {
    const Tensor& xv = parent_value(self, 0);
    const double var = parent_value(self, 1)[0];
    const double l = parent_value(self, 2)[0];
    const double s = 1.0 / (l * l);
    double gvar = 0.0, gl = 0.0;
    RowMatrix r2, phi(p, p), dphi(p, p);
    for (std::size_t i = 0; i < n; ++i) {
      auto xi = detail::rows_view(xv, i * p, p, d);
      detail::DistanceRows(xi, xi, s).full(r2);
      detail::profile(family, r2.data(), r2.size(), phi.data(), dphi.data());
      ConstMatrixMap g(self.grad.data() + i * p * p, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
      gvar += (g.array() * phi.array()).sum();
      RowMatrix w = (g.array() * dphi.array() * var).matrix();
      gl += (w.array() * r2.array()).sum();
      if (wants_grad(self, 0)) {
        RowMatrix ws = 0.5 * (w + w.transpose());
        detail::self_distance_backward(ws, xi, s, detail::rows_ptr(parent_grad(self, 0), i * p, d));
      }
    }
    detail::add_to_scalar(self, 1, gvar);
    detail::add_to_scalar(self, 2, -2.0 / l * gl);
  });
}

/// Stationary covariance sigma^2 phi(r / lengthscale). Value object over differentiable
/// hyperparameters: variance is a scalar, lengthscales a scalar or one per input dimension.
struct StationaryKernel {
  KernelFamily family = KernelFamily::SquaredExponential;
  Var variance = Var::scalar(1.0);
  Var lengthscales = Var::scalar(1.0);

  static StationaryKernel constant(KernelFamily f, double variance, double lengthscale) {
    return {f, Var(Tensor::vector({variance})), Var(Tensor::vector({lengthscale}))};
  }
  static StationaryKernel constant(KernelFamily f, double variance, std::vector<double> lengthscales) {
    return {f, Var(Tensor::vector({variance})), Var(Tensor::vector(std::move(lengthscales)))};
  }

  bool ard() const { return lengthscales.size() != 1; }

  /// Inputs and lengthscale handed to the fused ops: raw inputs with the scalar lengthscale, or
  /// ARD-scaled inputs with a unit lengthscale.
  Var op_input(const Var& x) const { return ard() ? div(x, lengthscales) : x; }
  Var op_lengthscale() const { return ard() ? Var(Tensor::vector({1.0})) : lengthscales; }

  Var gram(const Var& a, const Var& b) const {
    if (a.node_ptr() == b.node_ptr()) {
      Var s = op_input(a);
      return stationary_gram(family, s, s, variance, op_lengthscale());
    }
    return stationary_gram(family, op_input(a), op_input(b), variance, op_lengthscale());
  }

  /// Direct evaluation for a single pair of points.
  double operator()(std::span<const double> x, std::span<const double> y) const {
    if (x.size() != y.size()) throw ShapeError("kernel evaluation on inputs of different dimension");
    const Tensor& ls = lengthscales.value();
    double r2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double l = ls.size() == 1 ? ls[0] : ls[i];
      const double d = (x[i] - y[i]) / l;
      r2 += d * d;
    }
    return detail::scalar_of(variance) * detail::profile_scalar(family, r2);
  }

  double variance_value() const { return detail::scalar_of(variance); }
};

/// Expected number of zero up-crossings of a draw from a 1-D stationary GP in the unit interval,
/// (1 / 2 pi) sqrt(-k''(0) / k(0)). Requires a kernel twice differentiable at the origin.
inline double expected_zero_crossings(const StationaryKernel& k) {
  if (k.family != KernelFamily::SquaredExponential)
    throw NumericalError(std::string(family_name(k.family)) + " kernel is not twice differentiable at the origin");
  if (k.lengthscales.size() != 1) throw ShapeError("expected_zero_crossings needs a 1-D kernel");
  const double l = k.lengthscales.value()[0];
  // k(r) = s^2 exp(-r^2 / (2 l^2)) -> -k''(0) / k(0) = 1 / l^2
  return std::sqrt(1.0 / (l * l)) / (2.0 * std::numbers::pi);
}

}  // namespace tickgp
