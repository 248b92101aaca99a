#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dhseg {

/// Dense row-major float tensor. Network activations are rank 4 in
/// (batch, channels, height, width) order; weights use whatever rank they need.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(std::initializer_list<int> shape, float fill = 0.0f)
      : Tensor(std::vector<int>(shape), fill) {}
  Tensor(int n, int c, int h, int w, float fill = 0.0f)
      : Tensor(std::vector<int>{n, c, h, w}, fill) {}

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-4 accessors.
  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  float at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  /// Pointer to the (n, c) plane of a rank-4 tensor.
  float* plane_ptr(int n, int c) {
    return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * plane();
  }
  const float* plane_ptr(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * plane();
  }

  void fill(float v);
  /// Resizes to `shape`, zero-filled.
  void reset(std::vector<int> shape);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::string shape_string(const std::vector<int>& shape);

/// Concatenates rank-4 tensors along the channel axis.
Tensor concat_channels(std::span<const Tensor* const> parts);
/// Splits a channel-concatenated gradient back into parts of the given widths.
std::vector<Tensor> split_channels(const Tensor& joined, std::span<const int> widths);

}  // namespace dhseg
