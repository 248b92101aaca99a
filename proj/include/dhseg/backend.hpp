#pragma once

// Numeric kernels behind the network executor. The executor only talks to
// this interface, so a different implementation (another BLAS, an
// accelerator) can be dropped in without touching graph code.

#include <memory>
#include <string_view>

#include "dhseg/tensor.hpp"

namespace dhseg {

/// Square-kernel convolution geometry with symmetric zero padding.
struct ConvGeometry {
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int output_extent(int input) const { return (input + 2 * pad - kernel) / stride + 1; }
  /// Same-padding geometry: output = ceil(input / stride).
  static ConvGeometry same(int kernel, int stride = 1) { return {kernel, stride, kernel / 2}; }
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string_view name() const = 0;

  /// y = conv(x, kernel) + bias. `kernel` is (out, in, k, k); `bias` may be null.
  virtual void conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias,
                      ConvGeometry geom, Tensor& y) const = 0;

  /// Accumulates into `dkernel` / `dbias` (when non-null) and overwrites `dx`
  /// (when non-null).
  virtual void conv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy,
                               ConvGeometry geom, Tensor* dx, Tensor& dkernel,
                               Tensor* dbias) const = 0;

  /// Bilinear x2 upsampling with pixel-center alignment: output pixel i samples
  /// the input at (i + 0.5) / 2 - 0.5, clamped to the image.
  virtual void upsample_bilinear2x(const Tensor& x, Tensor& y) const = 0;
  virtual void upsample_bilinear2x_backward(const Tensor& dy, Tensor& dx) const = 0;
};

/// im2col + Eigen GEMM. The default backend.
std::unique_ptr<Backend> make_eigen_backend();
/// Direct nested-loop reference implementation; slow, used to cross-check.
std::unique_ptr<Backend> make_naive_backend();

const Backend& default_backend();

}  // namespace dhseg
