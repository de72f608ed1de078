#pragma once

#include <string>
#include <vector>

#include "tickgp/core/ops.hpp"

namespace tickgp {

/// Sliding-window geometry: image H x W, patch h x w, stride 1, no padding.
struct PatchScheme {
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::size_t patch_height = 0;
  std::size_t patch_width = 0;

  PatchScheme() = default;
  PatchScheme(std::size_t H, std::size_t W, std::size_t h, std::size_t w)
      : image_height(H), image_width(W), patch_height(h), patch_width(w) {
    if (h == 0 || w == 0 || h > H || w > W)
      throw ShapeError("patch " + std::to_string(h) + "x" + std::to_string(w) + " does not fit image " +
                       std::to_string(H) + "x" + std::to_string(W));
  }

  std::size_t out_height() const { return image_height - patch_height + 1; }
  std::size_t out_width() const { return image_width - patch_width + 1; }
  std::size_t num_patches() const { return out_height() * out_width(); }
  std::size_t patch_dim() const { return patch_height * patch_width; }
  std::size_t image_size() const { return image_height * image_width; }

  bool operator==(const PatchScheme&) const = default;

  /// Flat pixel index of element d of patch p, both row-major.
  std::vector<std::size_t> patch_index() const {
    std::vector<std::size_t> idx;
    idx.reserve(num_patches() * patch_dim());
    for (std::size_t r = 0; r < out_height(); ++r)
      for (std::size_t c = 0; c < out_width(); ++c)
        for (std::size_t i = 0; i < patch_height; ++i)
          for (std::size_t j = 0; j < patch_width; ++j) idx.push_back((r + i) * image_width + c + j);
    return idx;
  }
};

/// Upper-left (row, col) of every patch, in extraction order: [P x 2].
inline Tensor patch_locations(const PatchScheme& s) {
  Tensor out(Shape{s.num_patches(), 2});
  std::size_t p = 0;
  for (std::size_t r = 0; r < s.out_height(); ++r)
    for (std::size_t c = 0; c < s.out_width(); ++c, ++p) {
      out(p, 0) = static_cast<double>(r);
      out(p, 1) = static_cast<double>(c);
    }
  return out;
}

inline void check_images(const Shape& s, const PatchScheme& scheme) {
  if (s.size() != 3 || s[1] != scheme.image_height || s[2] != scheme.image_width)
    throw ShapeError("images " + shape_string(s) + " do not match scheme " + std::to_string(scheme.image_height) + "x" +
                     std::to_string(scheme.image_width));
}

/// images [N x H x W] -> patches [N x P x h*w], differentiable w.r.t. the pixels.
inline Var extract_patches(const Var& images, const PatchScheme& scheme) {
  check_images(images.shape(), scheme);
  return gather(images, 1, scheme.patch_index(), Shape{scheme.num_patches(), scheme.patch_dim()});
}

inline Tensor extract_patches(const Tensor& images, const PatchScheme& scheme) {
  return extract_patches(Var(images), scheme).value();
}

}  // namespace tickgp
