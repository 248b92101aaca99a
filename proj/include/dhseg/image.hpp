#pragma once

// Interleaved (row, column, channel) rasters used for everything that is
// not a network tensor: color images, probability maps, masks and labels.

#include <cassert>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dhseg {

struct Size2 {
  int height = 0;
  int width = 0;

  long long area() const { return static_cast<long long>(height) * width; }
  friend bool operator==(const Size2&, const Size2&) = default;
};

template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int height, int width, int channels = 1, T fill = T{})
      : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels <= 0) {
      throw std::invalid_argument("Image: invalid dimensions");
    }
    data_.assign(static_cast<size_t>(height) * width * channels, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  Size2 size2() const { return {height_, width_}; }
  size_t pixel_count() const { return static_cast<size_t>(height_) * width_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int y, int x, int c = 0) {
    assert(y >= 0 && y < height_ && x >= 0 && x < width_ && c >= 0 && c < channels_);
    return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c];
  }
  const T& operator()(int y, int x, int c = 0) const {
    assert(y >= 0 && y < height_ && x >= 0 && x < width_ && c >= 0 && c < channels_);
    return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c];
  }

  bool contains(int y, int x) const {
    return y >= 0 && y < height_ && x >= 0 && x < width_;
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ &&
           a.channels_ == b.channels_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

/// 8-bit color raster (1 or 3 channels).
using RgbImage = Image<std::uint8_t>;
/// Single-channel {0,1} mask.
using BinaryMask = Image<std::uint8_t>;
/// Integer labels; 0 is background for component maps.
using LabelMap = Image<std::int32_t>;
/// Per-pixel class scores in [0,1]; one channel per class.
using ProbabilityMap = Image<float>;

/// Extracts one channel of a multi-channel raster.
template <typename T>
Image<T> channel_of(const Image<T>& image, int channel) {
  if (channel < 0 || channel >= image.channels()) {
    throw std::out_of_range("channel_of: channel " + std::to_string(channel) +
                            " out of range");
  }
  Image<T> out(image.height(), image.width(), 1);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) out(y, x) = image(y, x, channel);
  return out;
}

inline std::size_t count_foreground(const BinaryMask& mask) {
  std::size_t n = 0;
  for (auto v : mask.values()) n += v != 0;
  return n;
}

}  // namespace dhseg
