#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "freqattack/error.hpp"

namespace freqattack {

using Shape = std::vector<std::size_t>;

/// Allocator returning 64-byte aligned blocks. Vectorised kernels peel a
/// different number of leading scalars depending on buffer alignment, which
/// changes the summation order; fixed alignment keeps results reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array. Rank 0 (empty shape) holds a single scalar.
template <typename Real>
class NdArray {
 public:
  using value_type = Real;

  NdArray() = default;
  explicit NdArray(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), Real{0}) {}
  NdArray(Shape shape, Real fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  NdArray(Shape shape, const std::vector<Real>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_fill();
  }
  NdArray(Shape shape, AlignedVector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_fill();
  }
  NdArray(Shape shape, std::initializer_list<Real> data) : shape_(std::move(shape)), data_(data) { check_fill(); }

  static NdArray scalar(Real value) { return NdArray(Shape{}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  Real* raw() noexcept { return data_.data(); }
  const Real* raw() const noexcept { return data_.data(); }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  const Real& operator[](std::size_t i) const noexcept { return data_[i]; }

  Real item() const {
    if (data_.size() != 1) fail(ErrorKind::ShapeMismatch, "item() on shape " + shape_string(shape_));
    return data_[0];
  }

  NdArray reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      fail(ErrorKind::ShapeMismatch,
           "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return NdArray(std::move(shape), data_);
  }

  void fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  /// Contiguous view of item `index` along axis 0.
  std::span<const Real> slab(std::size_t index) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<const Real>(data_).subspan(index * stride, stride);
  }
  std::span<Real> slab(std::size_t index) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<Real>(data_).subspan(index * stride, stride);
  }

  template <typename Other>
  NdArray<Other> cast() const {
    return NdArray<Other>(shape_, AlignedVector<Other>(data_.begin(), data_.end()));
  }

  friend bool operator==(const NdArray& a, const NdArray& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_fill() const {
    if (data_.size() != shape_size(shape_)) {
      fail(ErrorKind::ShapeMismatch, "buffer of " + std::to_string(data_.size()) +
                                         " values does not fill shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<Real> data_;
};

template <typename Real>
void require_same_shape(const NdArray<Real>& a, const NdArray<Real>& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::ShapeMismatch, std::string(what) + ": " + shape_string(a.shape()) + " vs " +
                                       shape_string(b.shape()));
  }
}

template <typename Real>
void require_finite(const NdArray<Real>& a, std::string_view what) {
  if (!a.all_finite()) fail(ErrorKind::NonFiniteEvaluation, std::string(what));
}

/// Stacks `count` slabs of `source` (axis 0) starting at `first` into a new array.
template <typename Real>
NdArray<Real> slice_batch(const NdArray<Real>& source, std::size_t first, std::size_t count) {
  if (source.rank() == 0 || first + count > source.extent(0)) {
    fail(ErrorKind::ShapeMismatch, "batch slice out of range for " + shape_string(source.shape()));
  }
  Shape shape = source.shape();
  shape[0] = count;
  const std::size_t stride = source.size() / source.extent(0);
  AlignedVector<Real> data(source.raw() + first * stride, source.raw() + (first + count) * stride);
  return NdArray<Real>(std::move(shape), std::move(data));
}

template <typename Real>
NdArray<Real> gather_batch(const NdArray<Real>& source, std::span<const std::size_t> indices) {
  Shape shape = source.shape();
  shape.at(0) = indices.size();
  NdArray<Real> out(shape);
  const std::size_t stride = source.size() / source.extent(0);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto from = source.slab(indices[k]);
    std::copy(from.begin(), from.end(), out.raw() + k * stride);
  }
  return out;
}

}  // namespace freqattack
