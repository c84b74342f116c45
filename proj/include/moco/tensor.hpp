#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moco/errors.hpp"

namespace moco {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Spatial extents of a 3-D grid, ordered (d, h, w) to match tensor layout.
struct Extent3 {
  std::size_t d = 0, h = 0, w = 0;

  std::size_t voxels() const { return d * h * w; }
  Shape shape() const { return {d, h, w}; }
  Shape shape(std::size_t channels) const { return {channels, d, h, w}; }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

inline std::string extent_str(const Extent3& e) {
  return std::to_string(e.d) + "x" + std::to_string(e.h) + "x" + std::to_string(e.w);
}

// Dense row-major array. Rank-3 tensors are volumes [D,H,W]; rank-4 tensors are
// channel stacks [C,D,H,W]. Scalars are shape {1}.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Voxel access for volumes and channel stacks.
  T& at(std::size_t z, std::size_t y, std::size_t x) {
    return data_[(z * shape_[rank() - 2] + y) * shape_[rank() - 1] + x];
  }
  const T& at(std::size_t z, std::size_t y, std::size_t x) const {
    return data_[(z * shape_[rank() - 2] + y) * shape_[rank() - 1] + x];
  }
  T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw DimensionError(std::string(what) + ": shape " + shape_str(shape_) + " vs " +
                           shape_str(o.shape_));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Extent3 spatial_extent(const Tensor<T>& t) {
  if (t.rank() < 3) throw DimensionError("expected a volume, got shape " + shape_str(t.shape()));
  const auto r = t.rank();
  return {t.dim(r - 3), t.dim(r - 2), t.dim(r - 1)};
}

template <class T>
void require_finite(const Tensor<T>& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value in input");
}

// Sum in 64-bit, fixed order.
template <class T>
double sum64(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x);
  return s;
}

}  // namespace moco
