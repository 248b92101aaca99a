#include "dhseg/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dhseg {

namespace {

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reset(std::vector<int> shape) {
  shape_ = std::move(shape);
  data_.assign(element_count(shape_), 0.0f);
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Tensor& first = *parts[0];
  int channels = 0;
  for (const Tensor* t : parts) {
    if (t->rank() != 4 || t->n() != first.n() || t->h() != first.h() || t->w() != first.w()) {
      throw std::invalid_argument("concat_channels: mismatched shapes " +
                                  shape_string(first.shape()) + " vs " +
                                  shape_string(t->shape()));
    }
    channels += t->c();
  }
  Tensor out(first.n(), channels, first.h(), first.w());
  const std::size_t plane = first.plane();
  for (int n = 0; n < first.n(); ++n) {
    float* dst = out.plane_ptr(n, 0);
    for (const Tensor* t : parts) {
      const float* src = t->plane_ptr(n, 0);
      dst = std::copy(src, src + plane * t->c(), dst);
    }
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& joined, std::span<const int> widths) {
  const int total = std::accumulate(widths.begin(), widths.end(), 0);
  if (total != joined.c()) throw std::invalid_argument("split_channels: width mismatch");
  std::vector<Tensor> parts;
  parts.reserve(widths.size());
  for (int w : widths) parts.emplace_back(joined.n(), w, joined.h(), joined.w());
  const std::size_t plane = joined.plane();
  for (int n = 0; n < joined.n(); ++n) {
    const float* src = joined.plane_ptr(n, 0);
    for (size_t i = 0; i < parts.size(); ++i) {
      float* dst = parts[i].plane_ptr(n, 0);
      std::copy(src, src + plane * widths[i], dst);
      src += plane * widths[i];
    }
  }
  return parts;
}

}  // namespace dhseg
