#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tickgp/core/errors.hpp"

namespace tickgp {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Cache-line aligned allocation. Eigen's vectorized reductions peel by address, so a fixed base
/// alignment keeps floating-point results independent of where a buffer happens to land.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, const std::vector<double>& values)
      : Tensor(std::move(shape), Storage(values.begin(), values.end())) {}

  Tensor(Shape shape, Storage values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                       std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(v));
  }

  static Tensor identity(std::size_t n, double scale = 1.0) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = scale;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() & noexcept { return data_; }
  std::span<const double> values() const& noexcept { return data_; }
  std::span<const double> values() const&& = delete;
  Storage& storage() noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  /// Views a rank-2 tensor (or the trailing two dims of batch b) as an Eigen matrix.
  MatrixMap matrix(std::size_t batch = 0) {
    auto [r, c] = trailing_dims();
    return MatrixMap(data_.data() + batch * r * c, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  ConstMatrixMap matrix(std::size_t batch = 0) const {
    auto [r, c] = trailing_dims();
    return ConstMatrixMap(data_.data() + batch * r * c, static_cast<Eigen::Index>(r),
                          static_cast<Eigen::Index>(c));
  }

  /// Number of trailing-matrix blocks (product of all but the last two extents).
  std::size_t batch_count() const {
    if (rank() < 2) return 1;
    return shape_size(Shape(shape_.begin(), shape_.end() - 2));
  }

  Tensor reshaped(Shape shape) const& {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::pair<std::size_t, std::size_t> trailing_dims() const {
    if (rank() == 0) return {1, 1};
    if (rank() == 1) return {1, shape_[0]};
    return {shape_[rank() - 2], shape_[rank() - 1]};
  }

  Shape shape_;
  Storage data_;
};

}  // namespace tickgp
