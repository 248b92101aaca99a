#include "dhseg/backend.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace dhseg {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Upper bound on the im2col scratch buffer, in floats.
constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

void check_conv_shapes(const Tensor& x, const Tensor& kernel, ConvGeometry geom) {
  if (x.rank() != 4 || kernel.rank() != 4) throw std::invalid_argument("conv2d: rank-4 tensors expected");
  if (kernel.dim(1) != x.c()) {
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                " input channels, got " + std::to_string(x.c()));
  }
  if (kernel.dim(2) != geom.kernel || kernel.dim(3) != geom.kernel) {
    throw std::invalid_argument("conv2d: kernel extent does not match geometry");
  }
}

struct ConvDims {
  int channels, height, width, out_h, out_w, k, stride, pad;
  int patch() const { return channels * k * k; }
};

// Fills cols[(c*k+ky)*k+kx][(oy-oy0)*out_w + ox] for oy in [oy0, oy1).
void im2col(const float* x, const ConvDims& d, int oy0, int oy1, float* cols) {
  const int ncols = (oy1 - oy0) * d.out_w;
  for (int c = 0; c < d.channels; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * d.height * d.width;
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        float* row = cols + static_cast<std::size_t>((c * d.k + ky) * d.k + kx) * ncols;
        for (int oy = oy0; oy < oy1; ++oy) {
          float* dst = row + static_cast<std::size_t>(oy - oy0) * d.out_w;
          const int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.height) {
            std::fill(dst, dst + d.out_w, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(iy) * d.width;
          if (d.stride == 1) {
            const int shift = kx - d.pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(d.out_w, d.width - shift);
            std::fill(dst, dst + lo, 0.0f);
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + std::max(lo, hi), dst + d.out_w, 0.0f);
          } else {
            for (int ox = 0; ox < d.out_w; ++ox) {
              const int ix = ox * d.stride - d.pad + kx;
              dst[ox] = (ix >= 0 && ix < d.width) ? src[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvDims& d, int oy0, int oy1, float* dx) {
  const int ncols = (oy1 - oy0) * d.out_w;
  for (int c = 0; c < d.channels; ++c) {
    float* xc = dx + static_cast<std::size_t>(c) * d.height * d.width;
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        const float* row = cols + static_cast<std::size_t>((c * d.k + ky) * d.k + kx) * ncols;
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.height) continue;
          const float* src = row + static_cast<std::size_t>(oy - oy0) * d.out_w;
          float* dst = xc + static_cast<std::size_t>(iy) * d.width;
          if (d.stride == 1) {
            const int shift = kx - d.pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(d.out_w, d.width - shift);
            for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
            continue;
          }
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Per-axis interpolation table for the x2 upsampler.
struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<float> frac;
};

AxisTaps upsample_taps(int in_extent) {
  AxisTaps t;
  const int out = 2 * in_extent;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (int i = 0; i < out; ++i) {
    const float src = std::max(0.0f, (static_cast<float>(i) + 0.5f) * 0.5f - 0.5f);
    const int lo = std::min(static_cast<int>(std::floor(src)), in_extent - 1);
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in_extent - 1);
    t.frac[i] = src - static_cast<float>(lo);
  }
  return t;
}

class EigenBackend final : public Backend {
 public:
  std::string_view name() const override { return "eigen"; }

  void conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias, ConvGeometry geom,
              Tensor& y) const override {
    check_conv_shapes(x, kernel, geom);
    const ConvDims d = dims(x, geom);
    const int out_c = kernel.dim(0);
    y.reset({x.n(), out_c, d.out_h, d.out_w});
    const int patch = d.patch();
    const int out_plane = d.out_h * d.out_w;
    Eigen::Map<const RowMat> w(kernel.data(), out_c, patch);
    const bool pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
    const int rows_per_chunk = chunk_rows(d);
    std::vector<float> cols(pointwise ? 0 : static_cast<std::size_t>(patch) * rows_per_chunk * d.out_w);

    for (int n = 0; n < x.n(); ++n) {
      float* yn = y.plane_ptr(n, 0);
      if (pointwise) {
        Eigen::Map<const RowMat> xin(x.plane_ptr(n, 0), d.channels, out_plane);
        Eigen::Map<RowMat> out(yn, out_c, out_plane);
        out.noalias() = w * xin;
      } else {
        for (int oy0 = 0; oy0 < d.out_h; oy0 += rows_per_chunk) {
          const int oy1 = std::min(d.out_h, oy0 + rows_per_chunk);
          const int ncols = (oy1 - oy0) * d.out_w;
          im2col(x.plane_ptr(n, 0), d, oy0, oy1, cols.data());
          Eigen::Map<const RowMat> c(cols.data(), patch, ncols);
          StridedMap out(yn + static_cast<std::size_t>(oy0) * d.out_w, out_c, ncols,
                         Eigen::OuterStride<>(out_plane));
          out.noalias() = w * c;
        }
      }
      if (bias) {
        for (int o = 0; o < out_c; ++o) {
          float* p = yn + static_cast<std::size_t>(o) * out_plane;
          const float b = (*bias)[static_cast<std::size_t>(o)];
          for (int i = 0; i < out_plane; ++i) p[i] += b;
        }
      }
    }
  }

  void conv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy, ConvGeometry geom,
                       Tensor* dx, Tensor& dkernel, Tensor* dbias) const override {
    check_conv_shapes(x, kernel, geom);
    const ConvDims d = dims(x, geom);
    const int out_c = kernel.dim(0);
    const int patch = d.patch();
    const int out_plane = d.out_h * d.out_w;
    if (dy.n() != x.n() || dy.c() != out_c || dy.h() != d.out_h || dy.w() != d.out_w) {
      throw std::invalid_argument("conv2d_backward: gradient shape mismatch");
    }
    if (dkernel.shape() != kernel.shape()) dkernel.reset(kernel.shape());
    if (dx) dx->reset(x.shape());

    Eigen::Map<const RowMat> w(kernel.data(), out_c, patch);
    Eigen::Map<RowMat> dw(dkernel.data(), out_c, patch);
    const bool pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
    const int rows_per_chunk = chunk_rows(d);
    std::vector<float> cols(pointwise ? 0 : static_cast<std::size_t>(patch) * rows_per_chunk * d.out_w);
    std::vector<float> dcols(pointwise || !dx ? 0 : cols.size());

    for (int n = 0; n < x.n(); ++n) {
      const float* dyn = dy.plane_ptr(n, 0);
      if (dbias) {
        for (int o = 0; o < out_c; ++o) {
          const float* p = dyn + static_cast<std::size_t>(o) * out_plane;
          double s = 0.0;
          for (int i = 0; i < out_plane; ++i) s += p[i];
          (*dbias)[static_cast<std::size_t>(o)] += static_cast<float>(s);
        }
      }
      if (pointwise) {
        Eigen::Map<const RowMat> xin(x.plane_ptr(n, 0), d.channels, out_plane);
        Eigen::Map<const RowMat> g(dyn, out_c, out_plane);
        dw.noalias() += g * xin.transpose();
        if (dx) {
          Eigen::Map<RowMat> gx(dx->plane_ptr(n, 0), d.channels, out_plane);
          gx.noalias() = w.transpose() * g;
        }
        continue;
      }
      for (int oy0 = 0; oy0 < d.out_h; oy0 += rows_per_chunk) {
        const int oy1 = std::min(d.out_h, oy0 + rows_per_chunk);
        const int ncols = (oy1 - oy0) * d.out_w;
        im2col(x.plane_ptr(n, 0), d, oy0, oy1, cols.data());
        Eigen::Map<const RowMat> c(cols.data(), patch, ncols);
        ConstStridedMap g(dyn + static_cast<std::size_t>(oy0) * d.out_w, out_c, ncols,
                          Eigen::OuterStride<>(out_plane));
        dw.noalias() += g * c.transpose();
        if (dx) {
          Eigen::Map<RowMat> gc(dcols.data(), patch, ncols);
          gc.noalias() = w.transpose() * g;
          col2im_add(dcols.data(), d, oy0, oy1, dx->plane_ptr(n, 0));
        }
      }
    }
  }

  void upsample_bilinear2x(const Tensor& x, Tensor& y) const override {
    const AxisTaps ty = upsample_taps(x.h());
    const AxisTaps tx = upsample_taps(x.w());
    const int oh = 2 * x.h(), ow = 2 * x.w();
    y.reset({x.n(), x.c(), oh, ow});
    std::vector<float> rowbuf(static_cast<std::size_t>(x.h()) * ow);
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < x.c(); ++c) {
        const float* src = x.plane_ptr(n, c);
        // Horizontal pass into rowbuf, then vertical pass.
        for (int iy = 0; iy < x.h(); ++iy) {
          const float* s = src + static_cast<std::size_t>(iy) * x.w();
          float* r = rowbuf.data() + static_cast<std::size_t>(iy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            r[ox] = s[tx.lo[ox]] * (1.0f - tx.frac[ox]) + s[tx.hi[ox]] * tx.frac[ox];
          }
        }
        float* dst = y.plane_ptr(n, c);
        for (int oy = 0; oy < oh; ++oy) {
          const float* a = rowbuf.data() + static_cast<std::size_t>(ty.lo[oy]) * ow;
          const float* b = rowbuf.data() + static_cast<std::size_t>(ty.hi[oy]) * ow;
          const float f = ty.frac[oy];
          float* o = dst + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) o[ox] = a[ox] * (1.0f - f) + b[ox] * f;
        }
      }
    }
  }

  void upsample_bilinear2x_backward(const Tensor& dy, Tensor& dx) const override {
    if (dy.h() % 2 || dy.w() % 2) throw std::invalid_argument("upsample backward: odd gradient extent");
    const int ih = dy.h() / 2, iw = dy.w() / 2;
    const AxisTaps ty = upsample_taps(ih);
    const AxisTaps tx = upsample_taps(iw);
    dx.reset({dy.n(), dy.c(), ih, iw});
    std::vector<float> rowbuf(static_cast<std::size_t>(ih) * dy.w());
    for (int n = 0; n < dy.n(); ++n) {
      for (int c = 0; c < dy.c(); ++c) {
        std::fill(rowbuf.begin(), rowbuf.end(), 0.0f);
        const float* g = dy.plane_ptr(n, c);
        for (int oy = 0; oy < dy.h(); ++oy) {
          const float f = ty.frac[oy];
          const float* gr = g + static_cast<std::size_t>(oy) * dy.w();
          float* a = rowbuf.data() + static_cast<std::size_t>(ty.lo[oy]) * dy.w();
          float* b = rowbuf.data() + static_cast<std::size_t>(ty.hi[oy]) * dy.w();
          for (int ox = 0; ox < dy.w(); ++ox) {
            a[ox] += gr[ox] * (1.0f - f);
            b[ox] += gr[ox] * f;
          }
        }
        float* out = dx.plane_ptr(n, c);
        for (int iy = 0; iy < ih; ++iy) {
          const float* r = rowbuf.data() + static_cast<std::size_t>(iy) * dy.w();
          float* o = out + static_cast<std::size_t>(iy) * iw;
          for (int ox = 0; ox < dy.w(); ++ox) {
            o[tx.lo[ox]] += r[ox] * (1.0f - tx.frac[ox]);
            o[tx.hi[ox]] += r[ox] * tx.frac[ox];
          }
        }
      }
    }
  }

 private:
  static ConvDims dims(const Tensor& x, ConvGeometry g) {
    return {x.c(), x.h(), x.w(), g.output_extent(x.h()), g.output_extent(x.w()),
            g.kernel, g.stride, g.pad};
  }
  static int chunk_rows(const ConvDims& d) {
    const std::size_t per_row = static_cast<std::size_t>(d.patch()) * d.out_w;
    return static_cast<int>(std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_row, 1), 1,
                                                     static_cast<std::size_t>(d.out_h)));
  }
};

class NaiveBackend final : public Backend {
 public:
  std::string_view name() const override { return "naive"; }

  void conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias, ConvGeometry g,
              Tensor& y) const override {
    check_conv_shapes(x, kernel, g);
    const int oh = g.output_extent(x.h()), ow = g.output_extent(x.w());
    y.reset({x.n(), kernel.dim(0), oh, ow});
    for (int n = 0; n < x.n(); ++n)
      for (int o = 0; o < kernel.dim(0); ++o)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
            for (int c = 0; c < x.c(); ++c)
              for (int ky = 0; ky < g.kernel; ++ky)
                for (int kx = 0; kx < g.kernel; ++kx) {
                  const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                  if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                  acc += static_cast<double>(x.at(n, c, iy, ix)) * kernel.at(o, c, ky, kx);
                }
            y.at(n, o, oy, ox) = static_cast<float>(acc);
          }
  }

  void conv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy, ConvGeometry g,
                       Tensor* dx, Tensor& dkernel, Tensor* dbias) const override {
    check_conv_shapes(x, kernel, g);
    if (dkernel.shape() != kernel.shape()) dkernel.reset(kernel.shape());
    if (dx) dx->reset(x.shape());
    for (int n = 0; n < x.n(); ++n)
      for (int o = 0; o < kernel.dim(0); ++o)
        for (int oy = 0; oy < dy.h(); ++oy)
          for (int ox = 0; ox < dy.w(); ++ox) {
            const float gv = dy.at(n, o, oy, ox);
            if (dbias) (*dbias)[static_cast<std::size_t>(o)] += gv;
            for (int c = 0; c < x.c(); ++c)
              for (int ky = 0; ky < g.kernel; ++ky)
                for (int kx = 0; kx < g.kernel; ++kx) {
                  const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                  if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                  dkernel.at(o, c, ky, kx) += gv * x.at(n, c, iy, ix);
                  if (dx) dx->at(n, c, iy, ix) += gv * kernel.at(o, c, ky, kx);
                }
          }
  }

  void upsample_bilinear2x(const Tensor& x, Tensor& y) const override {
    y.reset({x.n(), x.c(), 2 * x.h(), 2 * x.w()});
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c)
        for (int oy = 0; oy < y.h(); ++oy)
          for (int ox = 0; ox < y.w(); ++ox) {
            double acc = 0.0;
            visit_taps(x.h(), x.w(), oy, ox, [&](int iy, int ix, double wgt) {
              acc += wgt * x.at(n, c, iy, ix);
            });
            y.at(n, c, oy, ox) = static_cast<float>(acc);
          }
  }

  void upsample_bilinear2x_backward(const Tensor& dy, Tensor& dx) const override {
    dx.reset({dy.n(), dy.c(), dy.h() / 2, dy.w() / 2});
    for (int n = 0; n < dy.n(); ++n)
      for (int c = 0; c < dy.c(); ++c)
        for (int oy = 0; oy < dy.h(); ++oy)
          for (int ox = 0; ox < dy.w(); ++ox) {
            visit_taps(dx.h(), dx.w(), oy, ox, [&](int iy, int ix, double wgt) {
              dx.at(n, c, iy, ix) += static_cast<float>(wgt * dy.at(n, c, oy, ox));
            });
          }
  }

 private:
  template <typename F>
  static void visit_taps(int h, int w, int oy, int ox, F&& f) {
    auto axis = [](int extent, int o, int& lo, int& hi, double& frac) {
      double src = (o + 0.5) / 2.0 - 0.5;
      if (src < 0.0) src = 0.0;
      lo = std::min(static_cast<int>(std::floor(src)), extent - 1);
      hi = std::min(lo + 1, extent - 1);
      frac = src - lo;
    };
    int y0, y1, x0, x1;
    double fy, fx;
    axis(h, oy, y0, y1, fy);
    axis(w, ox, x0, x1, fx);
    f(y0, x0, (1 - fy) * (1 - fx));
    f(y0, x1, (1 - fy) * fx);
    f(y1, x0, fy * (1 - fx));
    f(y1, x1, fy * fx);
  }
};

}  // namespace

std::unique_ptr<Backend> make_eigen_backend() { return std::make_unique<EigenBackend>(); }
std::unique_ptr<Backend> make_naive_backend() { return std::make_unique<NaiveBackend>(); }

const Backend& default_backend() {
  static const EigenBackend backend;
  return backend;
}

}  // namespace dhseg
