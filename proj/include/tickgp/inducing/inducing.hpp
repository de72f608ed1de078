#pragma once

#include <optional>

#include "tickgp/kernels/convolutional.hpp"

namespace tickgp {

/// Inter-domain inducing variables u = g(Z): M patch vectors plus, for TICK layers, M locations.
struct InducingPatches {
  Var z;                          // [M x h*w]
  std::optional<Var> locations;  // [M x 2]

  std::size_t size() const { return z.dim(0); }
  std::size_t patch_dim() const { return z.dim(1); }

  void validate(const PatchScheme& scheme, bool needs_locations) const {
    if (z.rank() != 2 || z.dim(0) == 0) throw ShapeError("inducing patches must be [M x D] with M >= 1");
    if (z.dim(1) != scheme.patch_dim())
      throw ShapeError("inducing patch dim " + std::to_string(z.dim(1)) + " != scheme patch dim " +
                       std::to_string(scheme.patch_dim()));
    if (needs_locations && !locations) throw ShapeError("TICK layer needs inducing locations");
    if (locations && (locations->rank() != 2 || locations->dim(0) != z.dim(0) || locations->dim(1) != 2))
      throw ShapeError("inducing locations must be [M x 2]");
  }
};

/// Location block k_loc(l(Z), l_p) used by TICK, or nothing for the plain kernel.
inline std::optional<Var> inducing_location_gram(const InducingPatches& ind, const PatchResponseKernel& k,
                                                 const Var& locs) {
  if (!k.is_tick()) return std::nullopt;
  if (!ind.locations) throw ShapeError("TICK layer needs inducing locations");
  return k.location->gram(*ind.locations, locs);
}

/// K_uu = k_g(Z, Z) + jitter I.
inline Var kuu(const InducingPatches& ind, const PatchResponseKernel& k, double jitter) {
  if (ind.z.rank() != 2 || ind.size() == 0) throw ShapeError("inducing patches must be [M x D] with M >= 1");
  if (k.is_tick() && !ind.locations) throw ShapeError("TICK layer needs inducing locations");
  Var locs = ind.locations ? *ind.locations : Var(Tensor(Shape{ind.size(), 2}));
  Var g = k.gram(ind.z, locs, ind.z, locs);
  if (jitter == 0.0) return g;
  return g + Var(Tensor::identity(ind.size(), jitter));
}

/// Single-output conv layer: [M x N], entry (m, n) = sum_p w_p k_g(z_m, x_n^[p]).
inline Var kuf(const InducingPatches& ind, const ConvKernel& k, const Var& images) {
  ind.validate(k.scheme, k.response.is_tick());
  const std::size_t m = ind.size(), p = k.scheme.num_patches();
  Var mod = reshape(k.weight_vector(), Shape{1, p});
  if (auto kl = inducing_location_gram(ind, k.response, k.locations())) mod = mod * *kl;
  else mod = mod * Var(Tensor(Shape{m, 1}, 1.0));
  const auto& patch = k.response.patch;
  return patch_cross_sum(patch.family, patch.op_input(ind.z), k.op_patches(images), mod, patch.variance,
                         patch.op_lengthscale());
}

/// Multi-output conv layer: [M x N x P], entry (m, n, p) = k_g(z_m, x_n^[p]).
inline Var kuf(const InducingPatches& ind, const MultiOutputConvKernel& k, const Var& images) {
  ind.validate(k.scheme, k.response.is_tick());
  const std::size_t m = ind.size(), p = k.num_outputs(), d = k.scheme.patch_dim();
  Var patches = extract_patches(images, k.scheme);
  const std::size_t n = patches.dim(0);
  Var kp = k.response.patch.gram(ind.z, reshape(patches, Shape{n * p, d}));
  Var out = reshape(kp, Shape{m, n, p});
  if (auto kl = inducing_location_gram(ind, k.response, k.locations())) out = out * reshape(*kl, Shape{m, 1, p});
  return out;
}

}  // namespace tickgp
