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

#include "heimdal/errors.hpp"

namespace heimdal {

using Shape = std::vector<int>;

inline std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  return os.str();
}

inline std::size_t shape_size(const Shape& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_string(dims));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Dense row-major tensor. Activations are rank 4 [batch, channels, freq,
// time]; kernels are [out, in/groups, kf, kt]; per-channel parameters rank 1.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(Shape dims, S fill = S{}) : dims_(std::move(dims)), data_(shape_size(dims_), fill) {}
  Tensor(Shape dims, std::vector<S> values) : dims_(std::move(dims)), data_(std::move(values)) {
    if (data_.size() != shape_size(dims_))
      throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(dims_));
  }

  const Shape& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<S> values() { return data_; }
  std::span<const S> values() const { return data_; }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& storage() { return data_; }
  const std::vector<S>& storage() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int f, int t) const {
    return ((static_cast<std::size_t>(n) * dims_[1] + c) * dims_[2] + f) * dims_[3] + t;
  }
  S& operator()(int n, int c, int f, int t) { return data_[offset(n, c, f, t)]; }
  const S& operator()(int n, int c, int f, int t) const { return data_[offset(n, c, f, t)]; }
  // Rank-2 access, [row, col].
  S& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * dims_[1] + c]; }
  const S& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * dims_[1] + c]; }

  // Same storage, new extents; total size must be preserved.
  Tensor reshaped(Shape dims) const& { return Tensor(std::move(dims), data_); }
  Tensor reshaped(Shape dims) && { return Tensor(std::move(dims), std::move(data_)); }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](S v) { return static_cast<U>(v); });
    return Tensor<U>(dims_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.dims_ == b.dims_ && a.data_ == b.data_; }

 private:
  Shape dims_;
  std::vector<S> data_;
};

template <typename S>
void require_rank(const Tensor<S>& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(t.dims()));
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const std::string& what) {
  if (a.dims() != b.dims())
    throw ShapeError(what + ": shape " + shape_string(a.dims()) + " vs " + shape_string(b.dims()));
}

template <typename S>
Tensor<S>& operator+=(Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "tensor add");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

template <typename S>
Tensor<S> operator+(Tensor<S> a, const Tensor<S>& b) {
  a += b;
  return a;
}

template <typename S>
Tensor<S> hadamard(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "hadamard");
  Tensor<S> out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

}  // namespace heimdal
