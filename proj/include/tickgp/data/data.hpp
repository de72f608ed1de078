#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "tickgp/core/tensor.hpp"

namespace tickgp {

/// Grey-scale images in [0, 1] with integer labels from a declared class set.
struct ImageBatch {
  Tensor images;  // [N x H x W]
  std::vector<int> labels;
  std::size_t num_classes = 10;
  std::string source;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }

  Tensor label_tensor() const {
    Tensor t(Shape{labels.size()});
    for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i];
    return t;
  }

  /// Images and labels at the given indices, in that order.
  ImageBatch select(const std::vector<std::size_t>& idx) const {
    const std::size_t px = height() * width();
    ImageBatch out;
    out.images = Tensor(Shape{idx.size(), height(), width()});
    out.num_classes = num_classes;
    out.source = source;
    out.labels.reserve(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= size()) throw DataError("image index " + std::to_string(idx[k]) + " out of range");
      std::copy_n(images.data() + idx[k] * px, px, out.images.data() + k * px);
      out.labels.push_back(labels[idx[k]]);
    }
    return out;
  }

  ImageBatch head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return select(idx);
  }

  void validate() const {
    if (images.rank() != 3 || images.dim(0) != labels.size())
      throw DataError("image tensor " + shape_string(images.shape()) + " does not match " +
                      std::to_string(labels.size()) + " labels");
    for (double v : images.values())
      if (!(v >= 0.0 && v <= 1.0)) throw DataError("pixel value " + std::to_string(v) + " outside [0, 1]");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw DataError("label " + std::to_string(y) + " outside the declared " + std::to_string(num_classes) +
                        " classes");
  }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw DataError("'" + path + "' truncated at offset " + std::to_string(off));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

inline std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

}  // namespace detail

/// Big-endian IDX pair: unsigned-byte images (magic 0x00000803) and labels (0x00000801).
inline ImageBatch load_idx(const std::string& images_path, const std::string& labels_path) {
  auto ib = detail::read_file(images_path);
  auto lb = detail::read_file(labels_path);
  const auto im = detail::read_be32(ib, 0, images_path);
  if (im != 0x00000803)
    throw DataError("'" + images_path + "': bad magic " + detail::hex(im) + " at offset 0 (expected 0x00000803)");
  const auto lm = detail::read_be32(lb, 0, labels_path);
  if (lm != 0x00000801)
    throw DataError("'" + labels_path + "': bad magic " + detail::hex(lm) + " at offset 0 (expected 0x00000801)");
  const std::size_t n = detail::read_be32(ib, 4, images_path);
  const std::size_t h = detail::read_be32(ib, 8, images_path);
  const std::size_t w = detail::read_be32(ib, 12, images_path);
  const std::size_t nl = detail::read_be32(lb, 4, labels_path);
  if (n != nl)
    throw DataError("image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (ib.size() < 16 + n * h * w)
    throw DataError("'" + images_path + "' truncated: " + std::to_string(ib.size()) + " bytes, expected " +
                    std::to_string(16 + n * h * w));
  if (lb.size() < 8 + n)
    throw DataError("'" + labels_path + "' truncated: " + std::to_string(lb.size()) + " bytes, expected " +
                    std::to_string(8 + n));
  ImageBatch out;
  out.images = Tensor(Shape{n, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) out.images[i] = ib[16 + i] / 255.0;
  out.labels.resize(n);
  int mx = 0;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, out.labels[i] = lb[8 + i]);
  out.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(mx) + 1);
  out.source = images_path;
  return out;
}

/// Writes an IDX pair; pixels are rounded to the nearest of 0..255.
inline void save_idx(const ImageBatch& b, const std::string& images_path, const std::string& labels_path) {
  std::ofstream im(images_path, std::ios::binary), lb(labels_path, std::ios::binary);
  if (!im || !lb) throw DataError("cannot write IDX files '" + images_path + "', '" + labels_path + "'");
  detail::write_be32(im, 0x00000803);
  detail::write_be32(im, static_cast<std::uint32_t>(b.size()));
  detail::write_be32(im, static_cast<std::uint32_t>(b.height()));
  detail::write_be32(im, static_cast<std::uint32_t>(b.width()));
  for (double v : b.images.values()) im.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  detail::write_be32(lb, 0x00000801);
  detail::write_be32(lb, static_cast<std::uint32_t>(b.size()));
  for (int y : b.labels) lb.put(static_cast<char>(static_cast<unsigned char>(y)));
}

/// Keeps images whose label is in `classes`, relabelled 0..k-1 in the given order.
inline ImageBatch subset_classes(const ImageBatch& b, const std::vector<int>& classes) {
  if (classes.empty()) throw DataError("subset_classes needs at least one class");
  for (int c : classes)
    if (c < 0 || static_cast<std::size_t>(c) >= b.num_classes)
      throw DataError("unknown class " + std::to_string(c) + " (dataset has " + std::to_string(b.num_classes) +
                      " classes)");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (std::find(classes.begin(), classes.end(), b.labels[i]) != classes.end()) idx.push_back(i);
  if (idx.empty()) throw DataError("class subset selects no images from " + b.source);
  ImageBatch out = b.select(idx);
  for (auto& y : out.labels) y = static_cast<int>(std::find(classes.begin(), classes.end(), y) - classes.begin());
  out.num_classes = classes.size();
  return out;
}

/// Zero-pads every image to H x W; an odd remainder goes to the bottom / right.
inline ImageBatch pad_center(const ImageBatch& b, std::size_t height, std::size_t width) {
  const std::size_t h = b.height(), w = b.width();
  if (height < h || width < w)
    throw DataError("cannot pad " + std::to_string(h) + "x" + std::to_string(w) + " images to " +
                    std::to_string(height) + "x" + std::to_string(width));
  const std::size_t top = (height - h) / 2, left = (width - w) / 2;
  ImageBatch out = b;
  out.images = Tensor(Shape{b.size(), height, width});
  for (std::size_t n = 0; n < b.size(); ++n)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(b.images.data() + (n * h + r) * w, w, out.images.data() + (n * height + top + r) * width + left);
  return out;
}

/// Semeion handwritten digits: per line 256 pixels followed by a 10-way one-hot label.
inline ImageBatch load_semeion(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<double> px;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<double> vals{std::istream_iterator<double>(ls), {}};
    if (vals.empty()) continue;
    if (vals.size() != 266)
      throw DataError("'" + path + "' line " + std::to_string(lineno) + ": expected 266 values, got " +
                      std::to_string(vals.size()));
    px.insert(px.end(), vals.begin(), vals.begin() + 256);
    labels.push_back(static_cast<int>(std::max_element(vals.begin() + 256, vals.end()) - (vals.begin() + 256)));
  }
  ImageBatch out;
  const std::size_t n = labels.size();
  out.images = Tensor(Shape{n, 16, 16}, std::move(px));
  out.labels = std::move(labels);
  out.num_classes = 10;
  out.source = path;
  out.validate();
  return out;
}

/// CIFAR-10 binary batches converted to grey with 0.299 R + 0.587 G + 0.114 B.
inline ImageBatch load_cifar10_grey(const std::vector<std::string>& paths) {
  constexpr std::size_t rec = 3073, px = 1024;
  std::vector<double> grey;
  std::vector<int> labels;
  for (const auto& p : paths) {
    auto bytes = detail::read_file(p);
    if (bytes.size() % rec != 0)
      throw DataError("'" + p + "': size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
    for (std::size_t off = 0; off < bytes.size(); off += rec) {
      labels.push_back(bytes[off]);
      const unsigned char* r = bytes.data() + off + 1;
      for (std::size_t i = 0; i < px; ++i)
        grey.push_back((0.299 * r[i] + 0.587 * r[px + i] + 0.114 * r[2 * px + i]) / 255.0);
    }
  }
  ImageBatch out;
  const std::size_t n = labels.size();
  out.images = Tensor(Shape{n, 32, 32}, std::move(grey));
  out.labels = std::move(labels);
  out.source = paths.empty() ? "" : paths.front();
  out.validate();
  return out;
}

}  // namespace tickgp
