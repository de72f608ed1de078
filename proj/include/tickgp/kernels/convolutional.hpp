#pragma once

#include <optional>
#include <vector>

#include "tickgp/kernels/patches.hpp"
#include "tickgp/kernels/stationary.hpp"

namespace tickgp {

// ---- fused patch sums ------------------------------------------------------------
//
// The single-output convolutional covariances are double sums over patches. Materializing every
// patch-pair kernel value for a minibatch is O(N P^2) memory, so these ops stream one image
// (or image pair) at a time and recompute in the backward pass.

/// out[m, n] = variance * sum_p mod[m, p] * phi(|z_m - x_{n,p}|^2 / l^2)
/// z: [M x D], x: [N x P x D], mod: [M x P], variance and lengthscale l scalars.
inline Var patch_cross_sum(KernelFamily family, const Var& z, const Var& x, const Var& mod, const Var& variance,
                           const Var& lengthscale) {
  if (z.rank() != 2 || x.rank() != 3 || z.dim(1) != x.dim(2) || mod.rank() != 2 || mod.dim(0) != z.dim(0) ||
      mod.dim(1) != x.dim(1))
    throw ShapeError("patch_cross_sum: z " + shape_string(z.shape()) + ", x " + shape_string(x.shape()) + ", mod " +
                     shape_string(mod.shape()));
  const std::size_t m = z.dim(0), n = x.dim(0), p = x.dim(1), d = x.dim(2);
  const double var = detail::scalar_of(variance);
  const double s = detail::inv_sq(lengthscale);
  Tensor out(Shape{m, n});
  {
    auto zm = z.value().matrix();
    auto modm = mod.value().matrix();
    RowMatrix r2, phi(m, p);
    for (std::size_t i = 0; i < n; ++i) {
      detail::DistanceRows(zm, detail::rows_view(x.value(), i * p, p, d), s).full(r2);
      detail::profile(family, r2.data(), r2.size(), phi.data(), nullptr);
      Eigen::VectorXd col = (phi.array() * modm.array()).rowwise().sum();
      for (std::size_t k = 0; k < m; ++k) out(k, i) = var * col[static_cast<Eigen::Index>(k)];
    }
  }
  return make_op("patch_cross_sum", std::move(out), {z, x, mod, variance, lengthscale},
                 [family, m, n, p, d](Node& self) {
                   const Tensor& zv = parent_value(self, 0);
                   const Tensor& xv = parent_value(self, 1);
                   auto zm = zv.matrix();
                   auto modm = parent_value(self, 2).matrix();
                   const double var = parent_value(self, 3)[0];
                   const double l = parent_value(self, 4)[0];
                   const double s = 1.0 / (l * l);
                   double gvar = 0.0, gl = 0.0;
                   RowMatrix r2, phi(m, p), dphi(m, p);
                   Eigen::VectorXd g(m);
                   for (std::size_t i = 0; i < n; ++i) {
                     auto xi = detail::rows_view(xv, i * p, p, d);
                     detail::DistanceRows(zm, xi, s).full(r2);
                     detail::profile(family, r2.data(), r2.size(), phi.data(), dphi.data());
                     for (std::size_t k = 0; k < m; ++k) g[static_cast<Eigen::Index>(k)] = self.grad(k, i);
                     gvar += g.dot((phi.array() * modm.array()).rowwise().sum().matrix());
                     if (wants_grad(self, 2)) parent_grad(self, 2).matrix().noalias() += var * (g.asDiagonal() * phi);
                     RowMatrix w = g.asDiagonal() * (modm.array() * dphi.array() * var).matrix();
                     gl += (w.array() * r2.array()).sum();
                     if (wants_grad(self, 0) || wants_grad(self, 1))
                       detail::distance_backward(
                           w, zm, xi, s, wants_grad(self, 0) ? parent_grad(self, 0).data() : nullptr,
                           wants_grad(self, 1) ? detail::rows_ptr(parent_grad(self, 1), i * p, d) : nullptr);
                   }
                   detail::add_to_scalar(self, 3, gvar);
                   detail::add_to_scalar(self, 4, -2.0 / l * gl);
                 });
}

namespace detail {

/// Single-image self terms of patch_pair_sum, visiting only p <= q. msym = mod + mod^T off the
/// diagonal and mod on it, so sum_{p<=q} msym phi equals the full double sum.
struct SelfPairSum {
  KernelFamily family;
  RowMatrix msym;
  Eigen::ArrayXd r2, phi, dphi;

  SelfPairSum(KernelFamily f, ConstMatrixMap mod) : family(f), msym(mod + mod.transpose()) {
    msym.diagonal() = mod.diagonal();
    r2.resize(mod.rows());
    phi.resize(mod.rows());
    dphi.resize(mod.rows());
  }

  double value(ConstMatrixMap xi, double s) {
    DistanceRows rows(xi, xi, s, true);
    const Eigen::Index p = xi.rows();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p; ++i) {
      const Eigen::Index len = p - i;
      rows.row(i, i, len, r2.data());
      profile(family, r2.data(), static_cast<std::size_t>(len), phi.data(), nullptr);
      acc += (phi.head(len) * msym.row(i).segment(i, len).transpose().array()).sum();
    }
    return acc;
  }

  /// Backward for upstream gradient c = g * variance. Returns sum(msym phi) and sum(W r2) over the
  /// full symmetric weight W = mod .* dphi * c; adds c * phi (upper) into phi_acc when given and the
  /// input gradient into x_bar when given.
  std::pair<double, double> backward(ConstMatrixMap xi, double s, double c, RowMatrix* phi_acc, double* x_bar) {
    DistanceRows rows(xi, xi, s, true);
    const Eigen::Index p = xi.rows();
    RowMatrix ws;
    if (x_bar) ws.setZero(p, p);
    double sphi = 0.0, swr = 0.0;
    for (Eigen::Index i = 0; i < p; ++i) {
      const Eigen::Index len = p - i;
      rows.row(i, i, len, r2.data());
      profile(family, r2.data(), static_cast<std::size_t>(len), phi.data(), dphi.data());
      auto m = msym.row(i).segment(i, len).transpose().array();
      sphi += (phi.head(len) * m).sum();
      dphi.head(len) *= m * c;
      swr += (dphi.head(len) * r2.head(len)).sum();
      if (phi_acc) phi_acc->row(i).segment(i, len).transpose().array() += c * phi.head(len);
      if (x_bar) ws.row(i).segment(i, len) = 0.5 * dphi.head(len).transpose();
    }
    if (x_bar) {
      // ws holds the upper half of the symmetric weight with each off-diagonal pair split evenly.
      ws.diagonal() *= 2.0;
      Eigen::VectorXd rs = ws.selfadjointView<Eigen::Upper>() * Eigen::VectorXd::Ones(p);
      MatrixMap gx(x_bar, p, xi.cols());
      gx.noalias() += (4.0 * s) * (rs.asDiagonal() * xi);
      gx.noalias() -= (4.0 * s) * (ws.selfadjointView<Eigen::Upper>() * xi);
    }
    return {sphi, swr};
  }
};

}  // namespace detail

/// out[i, j] = variance * sum_{p,q} mod[p, q] * phi(|x_{i,p} - y_{j,q}|^2 / l^2)
/// x: [N x P x D], y: [N2 x Q x D], mod: [P x Q]. With diag_only (N == N2) only i == j is
/// evaluated and the result is [N].
inline Var patch_pair_sum(KernelFamily family, const Var& x, const Var& y, const Var& mod, const Var& variance,
                          const Var& lengthscale, bool diag_only = false) {
  if (x.rank() != 3 || y.rank() != 3 || x.dim(2) != y.dim(2) || mod.rank() != 2 || mod.dim(0) != x.dim(1) ||
      mod.dim(1) != y.dim(1))
    throw ShapeError("patch_pair_sum: x " + shape_string(x.shape()) + ", y " + shape_string(y.shape()) + ", mod " +
                     shape_string(mod.shape()));
  if (diag_only && x.dim(0) != y.dim(0)) throw ShapeError("patch_pair_sum: diag_only needs equal batch sizes");
  const std::size_t n = x.dim(0), n2 = y.dim(0), p = x.dim(1), q = y.dim(1), d = x.dim(2);
  const bool self_diag = diag_only && x.node_ptr() == y.node_ptr();
  const double var = detail::scalar_of(variance);
  const double s = detail::inv_sq(lengthscale);
  Tensor out(diag_only ? Shape{n} : Shape{n, n2});
  {
    auto modm = mod.value().matrix();
    if (self_diag) {
      detail::SelfPairSum sp(family, modm);
      for (std::size_t i = 0; i < n; ++i) out[i] = var * sp.value(detail::rows_view(x.value(), i * p, p, d), s);
    } else {
      RowMatrix r2, phi(p, q);
      for (std::size_t i = 0; i < n; ++i) {
        auto xi = detail::rows_view(x.value(), i * p, p, d);
        for (std::size_t j = diag_only ? i : 0; j < (diag_only ? i + 1 : n2); ++j) {
          detail::DistanceRows(xi, detail::rows_view(y.value(), j * q, q, d), s).full(r2);
          detail::profile(family, r2.data(), r2.size(), phi.data(), nullptr);
          out[diag_only ? i : i * n2 + j] = var * (phi.array() * modm.array()).sum();
        }
      }
    }
  }
  return make_op("patch_pair_sum", std::move(out), {x, y, mod, variance, lengthscale},
                 [family, n, n2, p, q, d, self_diag, diag_only](Node& self) {
                   const Tensor& xv = parent_value(self, 0);
                   const Tensor& yv = parent_value(self, 1);
                   auto modm = parent_value(self, 2).matrix();
                   const double var = parent_value(self, 3)[0];
                   const double l = parent_value(self, 4)[0];
                   const double s = 1.0 / (l * l);
                   double gvar = 0.0, gl = 0.0;
                   const bool want_x = wants_grad(self, 0), want_y = wants_grad(self, 1);
                   if (self_diag) {
                     detail::SelfPairSum sp(family, modm);
                     RowMatrix phi_acc;
                     if (wants_grad(self, 2)) phi_acc.setZero(p, p);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double g = self.grad[i];
                       if (g == 0.0) continue;
                       auto [sphi, swr] =
                           sp.backward(detail::rows_view(xv, i * p, p, d), s, g * var,
                                       wants_grad(self, 2) ? &phi_acc : nullptr,
                                       want_x ? detail::rows_ptr(parent_grad(self, 0), i * p, d) : nullptr);
                       gvar += g * sphi;
                       gl += swr;
                     }
                     if (wants_grad(self, 2)) {
                       auto gm = parent_grad(self, 2).matrix();
                       gm.triangularView<Eigen::Upper>() += phi_acc;
                       gm.triangularView<Eigen::StrictlyLower>() += phi_acc.transpose();
                     }
                     detail::add_to_scalar(self, 3, gvar);
                     detail::add_to_scalar(self, 4, -2.0 / l * gl);
                     return;
                   }
                   RowMatrix r2, phi(p, q), dphi(p, q);
                   for (std::size_t i = 0; i < n; ++i) {
                     auto xi = detail::rows_view(xv, i * p, p, d);
                     for (std::size_t j = diag_only ? i : 0; j < (diag_only ? i + 1 : n2); ++j) {
                       const double g = self.grad[diag_only ? i : i * n2 + j];
                       if (g == 0.0) continue;
                       auto yj = detail::rows_view(yv, j * q, q, d);
                       detail::DistanceRows(xi, yj, s).full(r2);
                       detail::profile(family, r2.data(), r2.size(), phi.data(), dphi.data());
                       gvar += g * (phi.array() * modm.array()).sum();
                       if (wants_grad(self, 2)) parent_grad(self, 2).matrix().noalias() += (g * var) * phi;
                       RowMatrix w = (modm.array() * dphi.array() * (g * var)).matrix();
                       gl += (w.array() * r2.array()).sum();
                       if (want_x || want_y)
                         detail::distance_backward(w, xi, yj, s,
                                                   want_x ? detail::rows_ptr(parent_grad(self, 0), i * p, d) : nullptr,
                                                   want_y ? detail::rows_ptr(parent_grad(self, 1), j * q, d) : nullptr);
                     }
                   }
                   detail::add_to_scalar(self, 3, gvar);
                   detail::add_to_scalar(self, 4, -2.0 / l * gl);
                 });
}

// ---- kernel value types --------------------------------------------------------------

/// Patch-response covariance k_g. Plain convolutional when `location` is empty; TICK
/// (k_patch(x, x') * k_loc(l, l')) otherwise.
struct PatchResponseKernel {
  StationaryKernel patch;
  std::optional<StationaryKernel> location;

  bool is_tick() const { return location.has_value(); }

  /// Gram between (patch, location) sets: [A x D], [A x 2] vs [B x D], [B x 2].
  Var gram(const Var& patches_a, const Var& locs_a, const Var& patches_b, const Var& locs_b) const {
    Var k = patch.gram(patches_a, patches_b);
    if (is_tick()) k = k * location->gram(locs_a, locs_b);
    return k;
  }

  /// Location Gram, or nothing for the plain kernel.
  std::optional<Var> location_gram(const Var& locs_a, const Var& locs_b) const {
    if (!is_tick()) return std::nullopt;
    return location->gram(locs_a, locs_b);
  }

  /// k_g at zero lag: sigma_patch^2 (* sigma_loc^2).
  Var prior_variance() const {
    Var v = patch.variance;
    if (is_tick()) v = v * location->variance;
    return v;
  }
};

/// Elementwise product of the patch and location Grams; the TICK patch-response covariance.
inline Var tick_patch_response_cov(const PatchResponseKernel& k, const Var& patches_a, const Var& locs_a,
                                   const Var& patches_b, const Var& locs_b) {
  if (!k.is_tick()) throw ShapeError("tick_patch_response_cov needs a location kernel");
  if (locs_a.rank() != 2 || locs_a.dim(1) != 2 || locs_b.rank() != 2 || locs_b.dim(1) != 2)
    throw ShapeError("patch locations must be [n x 2]");
  if (patches_a.dim(0) != locs_a.dim(0) || patches_b.dim(0) != locs_b.dim(0))
    throw ShapeError("patch and location counts differ");
  return k.gram(patches_a, locs_a, patches_b, locs_b);
}

/// Single-output convolutional kernel f(x) = sum_p w_p g(x^[p]); TICK when the response kernel
/// carries a location kernel. Without weights the sum is uniform.
struct ConvKernel {
  PatchResponseKernel response;
  PatchScheme scheme;
  std::optional<Var> weights;  // [P]

  Var locations() const { return Var(patch_locations(scheme)); }

  /// Patch weights as a [P] variable (all ones when unweighted).
  Var weight_vector() const {
    if (weights) {
      if (weights->size() != scheme.num_patches()) throw ShapeError("patch weights do not match the patch count");
      return reshape(*weights, Shape{scheme.num_patches()});
    }
    return Var(Tensor(Shape{scheme.num_patches()}, 1.0));
  }

  /// w w^T (.* k_loc(l, l)) : the [P x P] modulation of the patch-pair sum.
  Var pair_modulation() const {
    const std::size_t p = scheme.num_patches();
    Var w = weight_vector();
    Var mod = reshape(w, Shape{p, 1}) * reshape(w, Shape{1, p});
    if (auto kl = response.location_gram(locations(), locations())) mod = mod * *kl;
    return mod;
  }

  /// Patches of every image as handed to the fused ops (see StationaryKernel::op_input).
  Var op_patches(const Var& images) const { return response.patch.op_input(extract_patches(images, scheme)); }

  /// [N x N2] covariance between two image batches.
  Var matrix(const Var& x, const Var& x2) const {
    const auto& k = response.patch;
    return patch_pair_sum(k.family, op_patches(x), op_patches(x2), pair_modulation(), k.variance, k.op_lengthscale());
  }

  /// [N] prior variances k(x_n, x_n).
  Var diag(const Var& x) const {
    const auto& k = response.patch;
    Var xs = op_patches(x);
    return patch_pair_sum(k.family, xs, xs, pair_modulation(), k.variance, k.op_lengthscale(), true);
  }
};

inline ConvKernel make_conv_kernel(StationaryKernel base, PatchScheme scheme, std::optional<Var> weights = {}) {
  return ConvKernel{PatchResponseKernel{std::move(base), std::nullopt}, scheme, std::move(weights)};
}

inline ConvKernel make_tick_kernel(StationaryKernel patch, StationaryKernel location, PatchScheme scheme,
                                   std::optional<Var> weights = {}) {
  return ConvKernel{PatchResponseKernel{std::move(patch), std::move(location)}, scheme, std::move(weights)};
}

/// K[i, j] = sum_p sum_p' w_p w_p' k_g(x_i^[p], x_j^[p']).
inline Var conv_kernel_matrix(const ConvKernel& k, const Var& x, const Var& x2) { return k.matrix(x, x2); }

/// Multi-output convolutional kernel: output p of image x is g(x^[p]).
struct MultiOutputConvKernel {
  PatchResponseKernel response;
  PatchScheme scheme;

  std::size_t num_outputs() const { return scheme.num_patches(); }
  Var locations() const { return Var(patch_locations(scheme)); }

  /// [N x P x P] within-image output covariances.
  Var batched_covariance(const Var& images) const {
    const auto& pk = response.patch;
    Var k = batched_self_gram(pk.family, pk.op_input(extract_patches(images, scheme)), pk.variance,
                              pk.op_lengthscale());
    if (auto kl = response.location_gram(locations(), locations())) k = k * *kl;
    return k;
  }

  /// [N x P] prior marginal variances (constant k_g(0)).
  Var marginal_variance(std::size_t n) const {
    return mul(Var(Tensor(Shape{n, num_outputs()}, 1.0)), response.prior_variance());
  }
};

/// cov[f_p(x), f_q(x2)] = k_g((x^[p], l_p), (x2^[q], l_q)) for single images x, x2 [H x W].
inline Var mock_covariance(const MultiOutputConvKernel& k, const Var& x, const Var& x2) {
  auto as_batch = [&](const Var& img) {
    if (img.rank() == 2) return reshape(img, Shape{1, img.dim(0), img.dim(1)});
    return img;
  };
  Var a = as_batch(x), b = as_batch(x2);
  check_images(a.shape(), k.scheme);
  check_images(b.shape(), k.scheme);
  if (a.dim(0) != 1 || b.dim(0) != 1) throw ShapeError("mock_covariance takes single images");
  const std::size_t p = k.num_outputs(), d = k.scheme.patch_dim();
  Var pa = reshape(extract_patches(a, k.scheme), Shape{p, d});
  Var pb = reshape(extract_patches(b, k.scheme), Shape{p, d});
  return k.response.gram(pa, k.locations(), pb, k.locations());
}

}  // namespace tickgp
