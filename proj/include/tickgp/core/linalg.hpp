#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "tickgp/core/ops.hpp"

namespace tickgp {

/// Jitter policy for Cholesky factorizations.
struct CholeskyOptions {
  double jitter = 1e-6;
  bool escalate = true;     // retry with jitter x10 ...
  double max_jitter = 1e-2; // ... until this bound
};

namespace detail {

/// Plain right-looking Cholesky; returns the index of the first non-positive pivot on failure.
inline std::optional<std::size_t> cholesky_in_place(Eigen::Ref<RowMatrix> a) {
  const Eigen::Index n = a.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return static_cast<std::size_t>(j);
    d = std::sqrt(d);
    a(j, j) = d;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / d;
    }
  }
  return std::nullopt;
}

/// Factorizes one block, escalating jitter. Returns the jitter that succeeded.
inline double factor_block(ConstMatrixMap a, MatrixMap l, const CholeskyOptions& opt) {
  const Eigen::Index n = a.rows();
  double jitter = opt.jitter;
  for (;;) {
    RowMatrix shifted = a;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<RowMatrix> llt(shifted);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
      l = llt.matrixL().toDenseMatrix();
      return jitter;
    }
    const double next = jitter > 0.0 ? jitter * 10.0 : 1e-6;
    if (!opt.escalate || next > opt.max_jitter * (1.0 + 1e-12)) {
      RowMatrix probe = shifted;
      auto minor = cholesky_in_place(probe).value_or(static_cast<std::size_t>(n ? n - 1 : 0));
      throw DecompositionError("Cholesky failed with jitter " + std::to_string(jitter), minor);
    }
    jitter = next;
  }
}

}  // namespace detail

/// Lower-triangular L with L L^T = a + jitter I, batched over leading axes. Only the value of
/// `a` is symmetric by assumption; the gradient returned for `a` is symmetric.
inline Var cholesky(const Var& a, const CholeskyOptions& opt = {}) {
  const Tensor& x = a.value();
  if (x.rank() < 2 || x.dim(x.rank() - 1) != x.dim(x.rank() - 2))
    throw ShapeError("cholesky needs square trailing dims, got " + shape_string(x.shape()));
  Tensor out(x.shape());
  for (std::size_t b = 0; b < x.batch_count(); ++b) detail::factor_block(x.matrix(b), out.matrix(b), opt);
  return make_op("cholesky", std::move(out), {a}, [](Node& self) {
    auto& ga = parent_grad(self, 0);
    for (std::size_t b = 0; b < self.value.batch_count(); ++b) {
      auto l = self.value.matrix(b);
      RowMatrix p = l.transpose() * self.grad.matrix(b);
      p = p.triangularView<Eigen::Lower>();
      p.diagonal() *= 0.5;
      // S = L^-T P L^-1
      l.transpose().triangularView<Eigen::Upper>().solveInPlace(p);
      RowMatrix st = p.transpose();
      l.transpose().triangularView<Eigen::Upper>().solveInPlace(st);
      ga.matrix(b) += 0.5 * (st + st.transpose());
    }
  });
}

inline Var cholesky(const Var& a, double jitter) {
  CholeskyOptions opt;
  opt.jitter = jitter;
  return cholesky(a, opt);
}

/// Solves op(L) X = B for triangular L, where op is identity or transpose. L may be batched
/// like B or a single matrix broadcast over B's batch.
inline Var triangular_solve(const Var& l, const Var& b, bool lower = true, bool transpose_l = false) {
  const Tensor& lv = l.value();
  const Tensor& bv = b.value();
  if (lv.rank() < 2 || lv.dim(lv.rank() - 1) != lv.dim(lv.rank() - 2)) throw ShapeError("triangular_solve: L not square");
  const std::size_t n = lv.dim(lv.rank() - 1);
  const bool bvec = bv.rank() == 1;
  if (bv.rank() == 0 || (bvec ? bv.dim(0) : bv.dim(bv.rank() - 2)) != n)
    throw ShapeError("triangular_solve: " + shape_string(lv.shape()) + " vs " + shape_string(bv.shape()));
  const std::size_t lb = lv.batch_count();
  const std::size_t bb = bvec ? 1 : bv.batch_count();
  if (lb != 1 && lb != bb) throw ShapeError("triangular_solve: batch mismatch");
  for (std::size_t k = 0; k < lb; ++k)
    for (std::size_t i = 0; i < n; ++i)
      if (lv[(k * n + i) * n + i] == 0.0) throw NumericalError("triangular_solve: zero diagonal entry " + std::to_string(i));

  const std::size_t cols = bvec ? 1 : bv.dim(bv.rank() - 1);
  auto block_b = [n, cols](const Tensor& t, std::size_t i) {
    return ConstMatrixMap(t.data() + i * n * cols, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cols));
  };
  auto solve = [lower](ConstMatrixMap lm, bool trans, RowMatrix& rhs) {
    if (lower != trans) {
      if (trans) lm.transpose().triangularView<Eigen::Lower>().solveInPlace(rhs);
      else lm.triangularView<Eigen::Lower>().solveInPlace(rhs);
    } else {
      if (trans) lm.transpose().triangularView<Eigen::Upper>().solveInPlace(rhs);
      else lm.triangularView<Eigen::Upper>().solveInPlace(rhs);
    }
  };

  Tensor out(bv.shape());
  for (std::size_t i = 0; i < bb; ++i) {
    RowMatrix rhs = block_b(bv, i);
    solve(lv.matrix(lb == 1 ? 0 : i), transpose_l, rhs);
    MatrixMap(out.data() + i * n * cols, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cols)) = rhs;
  }
  return make_op("triangular_solve", std::move(out), {l, b},
                 [lower, transpose_l, n, cols, lb, bb, solve, block_b](Node& self) {
                   const Tensor& lval = parent_value(self, 0);
                   for (std::size_t i = 0; i < bb; ++i) {
                     auto lm = lval.matrix(lb == 1 ? 0 : i);
                     RowMatrix gb = block_b(self.grad, i);
                     solve(lm, !transpose_l, gb);  // B_bar = op(L)^-T X_bar
                     if (wants_grad(self, 1))
                       MatrixMap(parent_grad(self, 1).data() + i * n * cols, static_cast<Eigen::Index>(n),
                                 static_cast<Eigen::Index>(cols)) += gb;
                     if (wants_grad(self, 0)) {
                       auto xm = block_b(self.value, i);
                       RowMatrix gl = transpose_l ? RowMatrix(-xm * gb.transpose()) : RowMatrix(-gb * xm.transpose());
                       auto dst = parent_grad(self, 0).matrix(lb == 1 ? 0 : i);
                       if (lower) dst += gl.triangularView<Eigen::Lower>().toDenseMatrix();
                       else dst += gl.triangularView<Eigen::Upper>().toDenseMatrix();
                     }
                   }
                 });
}

}  // namespace tickgp
