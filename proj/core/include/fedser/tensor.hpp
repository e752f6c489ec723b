#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedser {

/// Dense row-major tensor of rank 1..4. The last dimension is contiguous;
/// model code keeps channels last so per-channel inner loops stay vectorizable.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > 4)
      throw std::invalid_argument("Tensor: rank must be 1..4");
    std::int64_t n = 1;
    for (int d : dims_) {
      if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
      n *= d;
    }
    data_.assign(static_cast<std::size_t>(n), T{});
  }

  Tensor(std::vector<int> dims, std::vector<T> values) : Tensor(std::move(dims)) {
    if (values.size() != data_.size())
      throw std::invalid_argument("Tensor: value count does not match shape");
    data_ = std::move(values);
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.dims_); }

  int rank() const { return static_cast<int>(dims_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& flat() { return data_; }
  const std::vector<T>& flat() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& operator()(int i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator()(int i) const { return data_[static_cast<std::size_t>(i)]; }

  T& operator()(int i, int j) {
    return data_[static_cast<std::size_t>(static_cast<std::int64_t>(i) * dims_[1] + j)];
  }
  const T& operator()(int i, int j) const {
    return data_[static_cast<std::size_t>(static_cast<std::int64_t>(i) * dims_[1] + j)];
  }

  T& operator()(int i, int j, int k) {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(i) * dims_[1] + j) * dims_[2] + k)];
  }
  const T& operator()(int i, int j, int k) const {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(i) * dims_[1] + j) * dims_[2] + k)];
  }

  T& operator()(int i, int j, int k, int l) {
    return data_[static_cast<std::size_t>(
        ((static_cast<std::int64_t>(i) * dims_[1] + j) * dims_[2] + k) * dims_[3] + l)];
  }
  const T& operator()(int i, int j, int k, int l) const {
    return data_[static_cast<std::size_t>(
        ((static_cast<std::int64_t>(i) * dims_[1] + j) * dims_[2] + k) * dims_[3] + l)];
  }

  void fill(T v) { data_.assign(data_.size(), v); }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

private:
  std::vector<int> dims_;
  std::vector<T> data_;

  template <typename U>
  friend class Tensor;
};

}  // namespace fedser
