#include "dhseg/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dhseg {

namespace {

void require_single_channel(const ProbabilityMap& map, const char* op) {
  if (map.channels() != 1) {
    throw std::invalid_argument(std::string(op) + ": expected a single-channel map, got " +
                                std::to_string(map.channels()) + " channels");
  }
}

}  // namespace

BinaryMask threshold_fixed(const ProbabilityMap& map, float t) {
  require_single_channel(map, "threshold_fixed");
  BinaryMask out(map.height(), map.width());
  auto src = map.values();
  auto dst = out.values();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= t ? 1 : 0;
  return out;
}

int otsu_bin(float value) {
  const float scaled = std::clamp(value, 0.0f, 1.0f) * kOtsuBins;
  return std::min(kOtsuBins - 1, static_cast<int>(scaled));
}

OtsuResult threshold_otsu(const ProbabilityMap& map) {
  require_single_channel(map, "threshold_otsu");
  std::array<long long, kOtsuBins> hist{};
  for (float v : map.values()) ++hist[static_cast<size_t>(otsu_bin(v))];
  const double total = static_cast<double>(map.pixel_count());
  double total_sum = 0.0;
  for (int b = 0; b < kOtsuBins; ++b) total_sum += static_cast<double>(b) * hist[static_cast<size_t>(b)];

  int best_k = -1;
  double best = -1.0;
  long long n0 = 0;
  double s0 = 0.0;
  for (int k = 1; k < kOtsuBins; ++k) {
    n0 += hist[static_cast<size_t>(k - 1)];
    s0 += static_cast<double>(k - 1) * hist[static_cast<size_t>(k - 1)];
    const double n1 = total - static_cast<double>(n0);
    if (n0 == 0 || n1 == 0) continue;
    const double w0 = static_cast<double>(n0) / total, w1 = n1 / total;
    const double mu0 = s0 / static_cast<double>(n0), mu1 = (total_sum - s0) / n1;
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  if (best_k < 0) throw std::invalid_argument("threshold_otsu: map has a single intensity level, no valid split");
  OtsuResult r;
  r.threshold = static_cast<double>(best_k) / kOtsuBins;
  r.mask = threshold_fixed(map, static_cast<float>(r.threshold));
  return r;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_filter: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace {

// Half-sample symmetric reflection: -1 -> 0, -2 -> 1, n -> n-1.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

ProbabilityMap gaussian_filter(const ProbabilityMap& map, double sigma) {
  require_single_channel(map, "gaussian_filter");
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int h = map.height(), w = map.width();
  std::vector<double> tmp(map.pixel_count());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) acc += k[static_cast<size_t>(d + radius)] * map(y, reflect(x + d, w));
      tmp[static_cast<size_t>(y) * w + x] = acc;
    }
  ProbabilityMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d)
        acc += k[static_cast<size_t>(d + radius)] * tmp[static_cast<size_t>(reflect(y + d, h)) * w + x];
      out(y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
    }
  return out;
}

BinaryMask hysteresis_threshold(const ProbabilityMap& map, float p_low, float p_high) {
  require_single_channel(map, "hysteresis_threshold");
  if (!(0.0f <= p_low && p_low <= p_high && p_high <= 1.0f)) {
    throw std::invalid_argument("hysteresis_threshold: need 0 <= p_low <= p_high <= 1");
  }
  const int h = map.height(), w = map.width();
  BinaryMask out(h, w);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (map(y, x) >= p_high && map(y, x) >= p_low && !out(y, x)) {
        out(y, x) = 1;
        stack.emplace_back(y, x);
        while (!stack.empty()) {
          auto [cy, cx] = stack.back();
          stack.pop_back();
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int ny = cy + dy, nx = cx + dx;
              if (!out.contains(ny, nx) || out(ny, nx) || map(ny, nx) < p_low) continue;
              out(ny, nx) = 1;
              stack.emplace_back(ny, nx);
            }
        }
      }
  return out;
}

namespace {

// 1D erosion/dilation along rows (axis 0) or columns (axis 1) with a window of
// half-width r; outside pixels are background.
BinaryMask line_pass(const BinaryMask& in, int r, bool dilate, bool along_rows) {
  const int h = in.height(), w = in.width();
  BinaryMask out(h, w);
  const int outer = along_rows ? h : w;
  const int inner = along_rows ? w : h;
  std::vector<int> prefix(static_cast<size_t>(inner) + 1);
  for (int o = 0; o < outer; ++o) {
    prefix[0] = 0;
    for (int i = 0; i < inner; ++i) {
      const auto v = along_rows ? in(o, i) : in(i, o);
      prefix[static_cast<size_t>(i) + 1] = prefix[static_cast<size_t>(i)] + (v ? 1 : 0);
    }
    for (int i = 0; i < inner; ++i) {
      const int lo = i - r, hi = i + r;
      const int clo = std::max(lo, 0), chi = std::min(hi, inner - 1);
      const int ones = prefix[static_cast<size_t>(chi) + 1] - prefix[static_cast<size_t>(clo)];
      std::uint8_t v;
      if (dilate) {
        v = ones > 0;
      } else {
        v = lo >= 0 && hi < inner && ones == 2 * r + 1;
      }
      (along_rows ? out(o, i) : out(i, o)) = v;
    }
  }
  return out;
}

BinaryMask disk_pass(const BinaryMask& in, int r, bool dilate) {
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) offsets.emplace_back(dy, dx);
  const int h = in.height(), w = in.width();
  BinaryMask out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool v = !dilate;
      for (auto [dy, dx] : offsets) {
        const int ny = y + dy, nx = x + dx;
        const bool on = in.contains(ny, nx) && in(ny, nx);
        if (dilate && on) {
          v = true;
          break;
        }
        if (!dilate && !on) {
          v = false;
          break;
        }
      }
      out(y, x) = v;
    }
  return out;
}

BinaryMask basic(const BinaryMask& m, bool dilate, StructuringElement s) {
  if (s.shape == SelemShape::disk) return disk_pass(m, s.radius, dilate);
  return line_pass(line_pass(m, s.radius, dilate, true), s.radius, dilate, false);
}

}  // namespace

BinaryMask morph(const BinaryMask& mask, MorphOp op, StructuringElement selem) {
  if (selem.radius < 1) throw std::invalid_argument("morph: structuring element radius must be >= 1");
  switch (op) {
    case MorphOp::erode: return basic(mask, false, selem);
    case MorphOp::dilate: return basic(mask, true, selem);
    case MorphOp::open: return basic(basic(mask, false, selem), true, selem);
    case MorphOp::close: return basic(basic(mask, true, selem), false, selem);
  }
  return mask;
}

namespace {

class UnionFind {
 public:
  int make() {
    parent_.push_back(static_cast<int>(parent_.size()));
    return parent_.back();
  }
  int find(int a) {
    while (parent_[static_cast<size_t>(a)] != a) {
      parent_[static_cast<size_t>(a)] = parent_[static_cast<size_t>(parent_[static_cast<size_t>(a)])];
      a = parent_[static_cast<size_t>(a)];
    }
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent_[static_cast<size_t>(a)] = b;
  }

 private:
  std::vector<int> parent_;
};

}  // namespace

Components connected_components(const BinaryMask& mask, int connectivity) {
  if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connected_components: connectivity must be 4 or 8");
  const int h = mask.height(), w = mask.width();
  LabelMap provisional(h, w);
  UnionFind uf;
  uf.make();  // label 0 = background
  // Previously visited neighbours: left, up, and (8-conn) up-left / up-right.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      int label = 0;
      auto consider = [&](int ny, int nx) {
        if (!mask.contains(ny, nx)) return;
        const int l = provisional(ny, nx);
        if (!l) return;
        if (!label) label = l;
        else uf.unite(label, l);
      };
      consider(y, x - 1);
      consider(y - 1, x);
      if (connectivity == 8) {
        consider(y - 1, x - 1);
        consider(y - 1, x + 1);
      }
      provisional(y, x) = label ? label : uf.make();
    }

  Components out;
  out.labels = LabelMap(h, w);
  std::vector<int> final_label;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int p = provisional(y, x);
      if (!p) continue;
      const int root = uf.find(p);
      if (static_cast<size_t>(root) >= final_label.size()) final_label.resize(static_cast<size_t>(root) + 1, 0);
      int& fl = final_label[static_cast<size_t>(root)];
      if (!fl) {
        out.table.push_back({static_cast<int>(out.table.size()) + 1, 0, {x, y, x + 1, y + 1}});
        fl = static_cast<int>(out.table.size());
      }
      out.labels(y, x) = fl;
      ComponentInfo& info = out.table[static_cast<size_t>(fl) - 1];
      ++info.size;
      info.bbox.x_min = std::min(info.bbox.x_min, x);
      info.bbox.y_min = std::min(info.bbox.y_min, y);
      info.bbox.x_max = std::max(info.bbox.x_max, x + 1);
      info.bbox.y_max = std::max(info.bbox.y_max, y + 1);
    }
  return out;
}

BinaryMask filter_small_components(const Components& c, long long min_size) {
  BinaryMask out(c.labels.height(), c.labels.width());
  auto lab = c.labels.values();
  auto dst = out.values();
  for (size_t i = 0; i < lab.size(); ++i) {
    const int l = lab[i];
    if (!l) continue;
    if (l < 1 || l > c.count()) throw std::invalid_argument("filter_small_components: label outside the component table");
    dst[i] = c.table[static_cast<size_t>(l) - 1].size >= min_size;
  }
  return out;
}

BinaryMask largest_component(const Components& c) {
  BinaryMask out(c.labels.height(), c.labels.width());
  int best = 0;
  long long best_size = 0;
  for (const auto& info : c.table)
    if (info.size > best_size) {
      best_size = info.size;
      best = info.label;
    }
  if (!best) return out;
  auto lab = c.labels.values();
  auto dst = out.values();
  for (size_t i = 0; i < lab.size(); ++i) dst[i] = lab[i] == best;
  return out;
}

std::vector<PixelCoord> component_pixels(const LabelMap& labels, int label) {
  std::vector<PixelCoord> px;
  for (int y = 0; y < labels.height(); ++y)
    for (int x = 0; x < labels.width(); ++x)
      if (labels(y, x) == label) px.push_back({x, y});
  return px;
}

std::vector<PixelCoord> foreground_pixels(const BinaryMask& mask) {
  std::vector<PixelCoord> px;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask(y, x)) px.push_back({x, y});
  return px;
}

Quad extract_extreme_quad(const BinaryMask& mask) {
  // Scores for TL, TR, BR, BL.
  constexpr int sx[4] = {-1, 1, 1, -1};
  constexpr int sy[4] = {-1, -1, 1, 1};
  std::array<long long, 4> best;
  best.fill(std::numeric_limits<long long>::min());
  std::array<PixelCoord, 4> arg{};
  bool any = false;
  // Raster order visits smaller y first, then smaller x, so strict '>' keeps
  // the required tie-break.
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask(y, x)) continue;
      any = true;
      for (int k = 0; k < 4; ++k) {
        const long long s = static_cast<long long>(sx[k]) * x + static_cast<long long>(sy[k]) * y;
        if (s > best[static_cast<size_t>(k)]) {
          best[static_cast<size_t>(k)] = s;
          arg[static_cast<size_t>(k)] = {x, y};
        }
      }
    }
  if (!any) throw std::invalid_argument("extract_extreme_quad: empty mask");
  Quad q;
  for (size_t k = 0; k < 4; ++k) q.corners[k] = {double(arg[k].x), double(arg[k].y)};
  if (!(polygon_area(to_polygon(q)) > 0.0)) throw std::invalid_argument("extract_extreme_quad: degenerate quad with zero area");
  if (!is_simple(q)) throw std::invalid_argument("extract_extreme_quad: extreme points form a self-intersecting quad");
  return q;
}

AxisAlignedBox min_enclosing_box(std::span<const PixelCoord> pixels) {
  if (pixels.empty()) throw std::invalid_argument("min_enclosing_box: empty pixel set");
  AxisAlignedBox b{pixels[0].x, pixels[0].y, pixels[0].x + 1, pixels[0].y + 1};
  for (const auto& p : pixels) {
    b.x_min = std::min(b.x_min, p.x);
    b.y_min = std::min(b.y_min, p.y);
    b.x_max = std::max(b.x_max, p.x + 1);
    b.y_max = std::max(b.y_max, p.y + 1);
  }
  return b;
}

std::vector<Point2> centroid_path(std::span<const PixelCoord> pixels) {
  if (pixels.empty()) throw std::invalid_argument("vectorize_polyline: empty component");
  const AxisAlignedBox box = min_enclosing_box(pixels);
  const bool horizontal = box.width() >= box.height();
  const int extent = horizontal ? box.width() : box.height();
  const int base = horizontal ? box.x_min : box.y_min;
  std::vector<double> sum(static_cast<size_t>(extent), 0.0);
  std::vector<long long> count(static_cast<size_t>(extent), 0);
  for (const auto& p : pixels) {
    const size_t i = static_cast<size_t>((horizontal ? p.x : p.y) - base);
    sum[i] += horizontal ? p.y : p.x;
    ++count[i];
  }
  std::vector<Point2> path;
  for (int i = 0; i < extent; ++i) {
    if (!count[static_cast<size_t>(i)]) continue;
    const double along = base + i;
    const double across = sum[static_cast<size_t>(i)] / static_cast<double>(count[static_cast<size_t>(i)]);
    path.push_back(horizontal ? Point2{along, across} : Point2{across, along});
  }
  return path;
}

std::vector<Point2> simplify_path(const std::vector<Point2>& path, double epsilon) {
  if (path.size() < 3 || epsilon <= 0.0) return path;
  std::vector<char> keep(path.size(), 0);
  keep.front() = keep.back() = 1;
  std::vector<std::pair<size_t, size_t>> stack{{0, path.size() - 1}};
  while (!stack.empty()) {
    auto [a, b] = stack.back();
    stack.pop_back();
    double worst = -1.0;
    size_t idx = a;
    for (size_t i = a + 1; i < b; ++i) {
      const double d = point_segment_distance(path[i], path[a], path[b]);
      if (d > worst) {
        worst = d;
        idx = i;
      }
    }
    if (worst > epsilon) {
      keep[idx] = 1;
      stack.emplace_back(a, idx);
      stack.emplace_back(idx, b);
    }
  }
  std::vector<Point2> out;
  for (size_t i = 0; i < path.size(); ++i)
    if (keep[i]) out.push_back(path[i]);
  return out;
}

PolyLine vectorize_polyline(std::span<const PixelCoord> pixels, double epsilon) {
  std::vector<Point2> dense = centroid_path(pixels);
  if (dense.size() < 2) throw std::invalid_argument("vectorize_polyline: component spans a single pixel column");
  return PolyLine{simplify_path(dense, epsilon)};
}

std::vector<AxisAlignedBox> filter_small_boxes(const std::vector<AxisAlignedBox>& boxes, Size2 image_size,
                                               double min_area_fraction) {
  const double min_area = min_area_fraction * static_cast<double>(image_size.area());
  std::vector<AxisAlignedBox> out;
  for (const auto& b : boxes)
    if (static_cast<double>(b.area()) >= min_area) out.push_back(b);
  return out;
}

AxisAlignedBox enforce_enclosure(const AxisAlignedBox& inner, const AxisAlignedBox& outer) {
  if (!inner.valid() || !outer.valid()) throw std::invalid_argument("enforce_enclosure: invalid box");
  AxisAlignedBox b{std::max(inner.x_min, outer.x_min), std::max(inner.y_min, outer.y_min),
                   std::min(inner.x_max, outer.x_max), std::min(inner.y_max, outer.y_max)};
  if (!b.valid()) throw std::invalid_argument("enforce_enclosure: boxes are disjoint");
  return b;
}

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
  if (a.size2() != b.size2()) throw std::invalid_argument("mask_and: size mismatch");
  BinaryMask out(a.height(), a.width());
  for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = a.values()[i] && b.values()[i];
  return out;
}

BinaryMask rasterize_box(const AxisAlignedBox& box, Size2 size) {
  BinaryMask out(size.height, size.width);
  for (int y = std::max(0, box.y_min); y < std::min(size.height, box.y_max); ++y)
    for (int x = std::max(0, box.x_min); x < std::min(size.width, box.x_max); ++x) out(y, x) = 1;
  return out;
}

BinaryMask rasterize_polygon(const std::vector<Point2>& poly, Size2 size) {
  BinaryMask out(size.height, size.width);
  if (poly.size() < 3) return out;
  constexpr double kTol = 1e-9;
  for (int y = 0; y < size.height; ++y) {
    // Even-odd crossings of the scanline through pixel centers.
    std::vector<double> xs;
    for (size_t i = 0; i < poly.size(); ++i) {
      const Point2 a = poly[i], b = poly[(i + 1) % poly.size()];
      if ((a.y <= y && b.y > y) || (b.y <= y && a.y > y)) {
        xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
      }
    }
    std::sort(xs.begin(), xs.end());
    for (size_t i = 0; i + 1 < xs.size(); i += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[i] - kTol)));
      const int x1 = std::min(size.width - 1, static_cast<int>(std::floor(xs[i + 1] + kTol)));
      for (int x = x0; x <= x1; ++x) out(y, x) = 1;
    }
    // Boundary pixels on horizontal or grazing edges.
    for (size_t i = 0; i < poly.size(); ++i) {
      const Point2 a = poly[i], b = poly[(i + 1) % poly.size()];
      const double ymin = std::min(a.y, b.y), ymax = std::max(a.y, b.y);
      if (y < ymin - kTol || y > ymax + kTol) continue;
      const int xlo = std::max(0, static_cast<int>(std::ceil(std::min(a.x, b.x) - kTol)));
      const int xhi = std::min(size.width - 1, static_cast<int>(std::floor(std::max(a.x, b.x) + kTol)));
      for (int x = xlo; x <= xhi; ++x)
        if (point_segment_distance({double(x), double(y)}, a, b) < 1e-7) out(y, x) = 1;
    }
  }
  return out;
}

}  // namespace dhseg
