#include "dhseg/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "dhseg/image_io.hpp"

namespace dhseg {

std::string to_string(Rgb c) {
  return "(" + std::to_string(c.r) + "," + std::to_string(c.g) + "," + std::to_string(c.b) + ")";
}

int ClassMap::index_of(const std::string& name) const {
  for (size_t i = 0; i < classes.size(); ++i)
    if (classes[i].name == name) return static_cast<int>(i);
  return -1;
}

void validate(const ClassMap& cm) {
  if (cm.classes.empty()) throw std::invalid_argument("class map has no classes");
  std::set<Rgb> seen;
  std::set<std::string> names;
  for (const auto& c : cm.classes) {
    if (!seen.insert(c.color).second) throw std::invalid_argument("class map: duplicate color " + to_string(c.color));
    if (!names.insert(c.name).second) throw std::invalid_argument("class map: duplicate class name '" + c.name + "'");
  }
  if (!cm.multilabel && !cm.composites.empty()) {
    throw std::invalid_argument("class map: composite colors require multilabel mode");
  }
  for (const auto& comp : cm.composites) {
    if (!seen.insert(comp.color).second) throw std::invalid_argument("class map: duplicate color " + to_string(comp.color));
    if (comp.classes.empty()) throw std::invalid_argument("class map: empty composite " + to_string(comp.color));
    for (int k : comp.classes)
      if (k < 0 || k >= cm.size()) throw std::invalid_argument("class map: composite references class " + std::to_string(k));
  }
}

namespace {

std::uint32_t pack(Rgb c) { return (std::uint32_t(c.r) << 16) | (std::uint32_t(c.g) << 8) | c.b; }

}  // namespace

Image<std::uint8_t> encode_mask(const RgbImage& label, const ClassMap& cm) {
  validate(cm);
  if (label.channels() != 3) throw std::invalid_argument("encode_mask: label image must be RGB");
  std::map<std::uint32_t, std::vector<int>> lookup;
  for (size_t i = 0; i < cm.classes.size(); ++i) lookup[pack(cm.classes[i].color)] = {static_cast<int>(i)};
  for (const auto& comp : cm.composites) lookup[pack(comp.color)] = comp.classes;

  Image<std::uint8_t> out(label.height(), label.width(), cm.size());
  std::map<Rgb, long long> unknown;
  std::uint32_t last_key = 0xffffffffu;
  const std::vector<int>* last = nullptr;
  for (int y = 0; y < label.height(); ++y)
    for (int x = 0; x < label.width(); ++x) {
      const Rgb c{label(y, x, 0), label(y, x, 1), label(y, x, 2)};
      const std::uint32_t key = pack(c);
      if (key != last_key) {
        auto it = lookup.find(key);
        last = it == lookup.end() ? nullptr : &it->second;
        last_key = key;
      }
      if (!last) {
        ++unknown[c];
        continue;
      }
      for (int k : *last) out(y, x, k) = 1;
    }
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << "encode_mask: label image contains colors missing from the class map:";
    for (const auto& [c, n] : unknown) msg << ' ' << to_string(c) << ": " << n << " px;";
    throw std::invalid_argument(msg.str());
  }
  return out;
}

RgbImage decode_mask(const LabelMap& indices, const ClassMap& cm) {
  RgbImage out(indices.height(), indices.width(), 3);
  for (int y = 0; y < indices.height(); ++y)
    for (int x = 0; x < indices.width(); ++x) {
      const int k = indices(y, x);
      if (k < 0 || k >= cm.size()) {
        throw std::invalid_argument("decode_mask: class index " + std::to_string(k) + " at (" + std::to_string(x) + "," +
                                    std::to_string(y) + ") outside [0, " + std::to_string(cm.size()) + ")");
      }
      const Rgb c = cm.classes[static_cast<size_t>(k)].color;
      out(y, x, 0) = c.r;
      out(y, x, 1) = c.g;
      out(y, x, 2) = c.b;
    }
  return out;
}

LabelMap class_indices(const Image<std::uint8_t>& target) {
  LabelMap out(target.height(), target.width());
  for (int y = 0; y < target.height(); ++y)
    for (int x = 0; x < target.width(); ++x) {
      int k = 0;
      while (k < target.channels() && !target(y, x, k)) ++k;
      out(y, x) = k < target.channels() ? k : 0;
    }
  return out;
}

namespace {

struct IPoint {
  long long x, y;
};

IPoint round_point(Point2 p) { return {std::llround(p.x), std::llround(p.y)}; }

void draw_bresenham(BinaryMask& m, IPoint a, IPoint b) {
  long long dx = std::llabs(b.x - a.x), dy = -std::llabs(b.y - a.y);
  const int sx = a.x < b.x ? 1 : -1, sy = a.y < b.y ? 1 : -1;
  long long err = dx + dy;
  for (;;) {
    if (m.contains(static_cast<int>(a.y), static_cast<int>(a.x))) m(static_cast<int>(a.y), static_cast<int>(a.x)) = 1;
    if (a.x == b.x && a.y == b.y) break;
    const long long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      a.x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      a.y += sy;
    }
  }
}

// Squared distance test carried out in extended precision on integer inputs.
bool within(IPoint p, IPoint a, IPoint b, long double r2) {
  const long long vx = b.x - a.x, vy = b.y - a.y;
  const long long wx = p.x - a.x, wy = p.y - a.y;
  const long long dot = vx * wx + vy * wy;
  const long long len2 = vx * vx + vy * vy;
  if (dot <= 0 || len2 == 0) return static_cast<long double>(wx * wx + wy * wy) <= r2;
  if (dot >= len2) {
    const long long ux = p.x - b.x, uy = p.y - b.y;
    return static_cast<long double>(ux * ux + uy * uy) <= r2;
  }
  const long double cross = static_cast<long double>(vx * wy - vy * wx);
  return cross * cross <= r2 * static_cast<long double>(len2);
}

}  // namespace

BinaryMask render_baselines(const std::vector<PolyLine>& polylines, Size2 size, double radius) {
  if (radius < 0) throw std::invalid_argument("render_baselines: negative radius");
  BinaryMask out(size.height, size.width);
  const long double r2 = static_cast<long double>(radius) * radius;
  const int reach = static_cast<int>(std::ceil(radius));
  for (const auto& line : polylines) {
    for (size_t i = 0; i < line.vertices.size(); ++i) {
      const IPoint a = round_point(line.vertices[i]);
      const IPoint b = round_point(line.vertices[i + 1 < line.vertices.size() ? i + 1 : i]);
      if (radius == 0.0) {
        draw_bresenham(out, a, b);
        continue;
      }
      const long long x0 = std::max<long long>(0, std::min(a.x, b.x) - reach);
      const long long x1 = std::min<long long>(size.width - 1, std::max(a.x, b.x) + reach);
      const long long y0 = std::max<long long>(0, std::min(a.y, b.y) - reach);
      const long long y1 = std::min<long long>(size.height - 1, std::max(a.y, b.y) + reach);
      for (long long y = y0; y <= y1; ++y)
        for (long long x = x0; x <= x1; ++x)
          if (within({x, y}, a, b, r2)) out(static_cast<int>(y), static_cast<int>(x)) = 1;
    }
  }
  return out;
}

std::vector<PolyLine> read_baselines_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read baselines: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed baseline JSON " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw std::runtime_error("baseline JSON must be a list of polylines: " + path.string());
  std::vector<PolyLine> lines;
  for (const auto& line : j) {
    PolyLine pl;
    for (const auto& v : line) {
      if (!v.is_array() || v.size() != 2) throw std::runtime_error("baseline vertex must be [x, y]: " + path.string());
      pl.vertices.push_back({v[0].get<double>(), v[1].get<double>()});
    }
    lines.push_back(std::move(pl));
  }
  return lines;
}

Size2 budget_size(Size2 size, double budget) {
  if (!(budget > 0)) throw std::invalid_argument("resize budget must be positive");
  if (static_cast<double>(size.area()) <= budget) return size;
  const double s = std::sqrt(budget / static_cast<double>(size.area()));
  int h = std::max(1, static_cast<int>(std::lround(size.height * s)));
  int w = std::max(1, static_cast<int>(std::lround(size.width * s)));
  while (static_cast<double>(h) * w > budget) {
    // Shrink the side whose rounding overshot the most.
    const double over_h = h - size.height * s, over_w = w - size.width * s;
    if ((over_h >= over_w && h > 1) || w == 1) --h;
    else --w;
  }
  return {h, w};
}

RgbImage resize_image(const RgbImage& image, Size2 size) {
  if (image.size2() == size) return image;
  cv::Mat src(image.height(), image.width(), CV_8UC(image.channels()), const_cast<std::uint8_t*>(image.values().data()));
  RgbImage out(size.height, size.width, image.channels());
  cv::Mat dst(size.height, size.width, CV_8UC(image.channels()), out.values().data());
  const bool shrinking = size.area() < image.size2().area();
  cv::resize(src, dst, dst.size(), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

Image<std::uint8_t> resize_nearest(const Image<std::uint8_t>& labels, Size2 size) {
  if (labels.size2() == size) return labels;
  Image<std::uint8_t> out(size.height, size.width, labels.channels());
  const double sy = static_cast<double>(labels.height()) / size.height;
  const double sx = static_cast<double>(labels.width()) / size.width;
  for (int y = 0; y < size.height; ++y) {
    const int yy = std::min(labels.height() - 1, static_cast<int>((y + 0.5) * sy));
    for (int x = 0; x < size.width; ++x) {
      const int xx = std::min(labels.width() - 1, static_cast<int>((x + 0.5) * sx));
      for (int c = 0; c < labels.channels(); ++c) out(y, x, c) = labels(yy, xx, c);
    }
  }
  return out;
}

ProbabilityMap resize_probabilities(const ProbabilityMap& map, Size2 size) {
  if (map.size2() == size) return map;
  ProbabilityMap out(size.height, size.width, map.channels());
  for (int c = 0; c < map.channels(); ++c) {
    cv::Mat src(map.height(), map.width(), CV_32FC1);
    for (int y = 0; y < map.height(); ++y)
      for (int x = 0; x < map.width(); ++x) src.at<float>(y, x) = map(y, x, c);
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(size.width, size.height), 0, 0, cv::INTER_LINEAR);
    for (int y = 0; y < size.height; ++y)
      for (int x = 0; x < size.width; ++x) out(y, x, c) = std::clamp(dst.at<float>(y, x), 0.0f, 1.0f);
  }
  return out;
}

RgbImage resize_to_pixel_budget(const RgbImage& image, double budget) {
  return resize_image(image, budget_size(image.size2(), budget));
}

Sample make_sample(RgbImage image, Image<std::uint8_t> target, std::string stem) {
  if (image.size2() != target.size2()) throw std::invalid_argument("sample image and target sizes differ");
  Sample s;
  s.ignore = BinaryMask(image.height(), image.width());
  s.image = std::move(image);
  s.target = std::move(target);
  s.stem = std::move(stem);
  return s;
}

Sample resize_sample(const Sample& sample, double budget) {
  const Size2 size = budget_size(sample.image.size2(), budget);
  if (size == sample.image.size2()) return sample;
  Sample out;
  out.image = resize_image(sample.image, size);
  out.target = resize_nearest(sample.target, size);
  out.ignore = resize_nearest(sample.ignore, size);
  out.stem = sample.stem;
  return out;
}

void validate(const PatchSpec& spec) {
  if (spec.height <= 0 || spec.width <= 0) throw std::invalid_argument("patch size must be positive");
  if (spec.margin < 0 || 2 * spec.margin >= std::min(spec.height, spec.width)) {
    throw std::invalid_argument("patch margin must be below half the patch side");
  }
}

std::vector<int> patch_starts(int extent, int size, int margin) {
  std::vector<int> starts;
  const int stride = size - 2 * margin;
  int s = 0;
  for (;;) {
    starts.push_back(s);
    if (s + size >= extent) break;
    s = std::min(s + stride, extent - size);
  }
  return starts;
}

std::vector<PatchOrigin> patch_grid(Size2 image, const PatchSpec& spec) {
  validate(spec);
  std::vector<PatchOrigin> grid;
  for (int y : patch_starts(image.height, spec.height, spec.margin))
    for (int x : patch_starts(image.width, spec.width, spec.margin)) grid.push_back({y, x});
  return grid;
}

std::vector<Patch> extract_patches(const Sample& sample, const PatchSpec& spec) {
  std::vector<Patch> out;
  for (const auto& o : patch_grid(sample.image.size2(), spec)) {
    Patch p;
    p.origin = o;
    p.sample.image = crop_padded(sample.image, o.y, o.x, spec.height, spec.width);
    p.sample.target = crop_padded(sample.target, o.y, o.x, spec.height, spec.width);
    p.sample.ignore = crop_padded<std::uint8_t>(sample.ignore, o.y, o.x, spec.height, spec.width, 1);
    p.sample.stem = sample.stem;
    out.push_back(std::move(p));
  }
  return out;
}

ProbabilityMap stitch_predictions(const std::vector<PredictedPatch>& patches, Size2 full) {
  if (patches.empty()) throw std::invalid_argument("stitch_predictions: no patches");
  const int channels = patches.front().map.channels();
  ProbabilityMap out(full.height, full.width, channels);
  std::vector<int> best(static_cast<size_t>(full.area()), -1);
  std::vector<PatchOrigin> owner(static_cast<size_t>(full.area()));
  for (const auto& p : patches) {
    if (p.map.channels() != channels) throw std::invalid_argument("stitch_predictions: channel count differs between patches");
    const int ph = p.map.height(), pw = p.map.width();
    for (int yy = 0; yy < ph; ++yy) {
      const int y = p.origin.y + yy;
      if (y < 0 || y >= full.height) continue;
      for (int xx = 0; xx < pw; ++xx) {
        const int x = p.origin.x + xx;
        if (x < 0 || x >= full.width) continue;
        const int d = std::min({yy, ph - 1 - yy, xx, pw - 1 - xx});
        const size_t i = static_cast<size_t>(y) * full.width + x;
        if (d > best[i] || (d == best[i] && p.origin < owner[i])) {
          best[i] = d;
          owner[i] = p.origin;
          for (int c = 0; c < channels; ++c) out(y, x, c) = p.map(yy, xx, c);
        }
      }
    }
  }
  for (size_t i = 0; i < best.size(); ++i)
    if (best[i] < 0) {
      throw std::invalid_argument("stitch_predictions: pixel (" + std::to_string(i % full.width) + "," +
                                  std::to_string(i / full.width) + ") is not covered by any patch");
    }
  return out;
}

void validate(const AugmentParams& p) {
  const double pi = std::numbers::pi;
  if (p.rotation_min > p.rotation_max || p.rotation_min < -pi || p.rotation_max > pi) {
    throw std::invalid_argument("augment: rotation range must be an interval within [-pi, pi]");
  }
  if (p.scale_min > p.scale_max || !(p.scale_min > 0)) throw std::invalid_argument("augment: scale range must be positive");
}

AugmentTransform sample_transform(const AugmentParams& p, std::mt19937_64& rng) {
  validate(p);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentTransform t;
  const double u_rot = unit(rng), u_scale = unit(rng), u_mirror = unit(rng);
  t.rotation = p.rotation_min + (p.rotation_max - p.rotation_min) * u_rot;
  t.scale = p.scale_min + (p.scale_max - p.scale_min) * u_scale;
  t.mirror = p.mirror && u_mirror < 0.5;
  return t;
}

namespace {

struct Affine {
  // src = m * (dst - c) + c
  double m00, m01, m10, m11, cx, cy;

  void source(int x, int y, double& sx, double& sy) const {
    const double dx = x - cx, dy = y - cy;
    sx = m00 * dx + m01 * dy + cx;
    sy = m10 * dx + m11 * dy + cy;
  }
};

Affine inverse_map(const AugmentTransform& t, Size2 size) {
  // Forward: dst - c = s * R * M * (src - c); inverse: M * R^T / s.
  const double c = std::cos(t.rotation), s = std::sin(t.rotation);
  const double mx = t.mirror ? -1.0 : 1.0;
  Affine a;
  a.m00 = mx * c / t.scale;
  a.m01 = mx * s / t.scale;
  a.m10 = -s / t.scale;
  a.m11 = c / t.scale;
  a.cx = (size.width - 1) / 2.0;
  a.cy = (size.height - 1) / 2.0;
  return a;
}

}  // namespace

Sample apply_transform(const Sample& sample, const AugmentTransform& t) {
  if (t.is_identity()) return sample;
  const int h = sample.image.height(), w = sample.image.width();
  const Affine a = inverse_map(t, sample.image.size2());
  Sample out;
  out.stem = sample.stem;
  out.image = RgbImage(h, w, sample.image.channels());
  out.target = Image<std::uint8_t>(h, w, sample.target.channels());
  out.ignore = BinaryMask(h, w, 1, 1);
  const int ch = sample.image.channels();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sx, sy;
      a.source(x, y, sx, sy);
      const int nx = static_cast<int>(std::floor(sx + 0.5)), ny = static_cast<int>(std::floor(sy + 0.5));
      if (!sample.image.contains(ny, nx)) continue;
      out.ignore(y, x) = sample.ignore(ny, nx);
      for (int c = 0; c < sample.target.channels(); ++c) out.target(y, x, c) = sample.target(ny, nx, c);
      const double fx = std::clamp(sx, 0.0, w - 1.0), fy = std::clamp(sy, 0.0, h - 1.0);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double ax = fx - x0, ay = fy - y0;
      for (int c = 0; c < ch; ++c) {
        const double top = sample.image(y0, x0, c) * (1 - ax) + sample.image(y0, x1, c) * ax;
        const double bottom = sample.image(y1, x0, c) * (1 - ax) + sample.image(y1, x1, c) * ax;
        out.image(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(top * (1 - ay) + bottom * ay), 0L, 255L));
      }
    }
  return out;
}

Sample augment(const Sample& sample, const AugmentParams& params) {
  std::mt19937_64 rng(params.seed);
  return apply_transform(sample, sample_transform(params, rng));
}

Tensor to_input_tensor(const std::vector<const RgbImage*>& images) {
  if (images.empty()) throw std::invalid_argument("to_input_tensor: empty batch");
  const int h = images.front()->height(), w = images.front()->width();
  Tensor t(static_cast<int>(images.size()), 3, h, w);
  for (size_t n = 0; n < images.size(); ++n) {
    const RgbImage& img = *images[n];
    if (img.height() != h || img.width() != w || img.channels() != 3) {
      throw std::invalid_argument("to_input_tensor: batch images must share one size and be RGB");
    }
    for (int c = 0; c < 3; ++c) {
      float* dst = t.plane_ptr(static_cast<int>(n), c);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dst[static_cast<size_t>(y) * w + x] = (img(y, x, c) / 255.0f - kImageMean[c]) / kImageStd[c];
    }
  }
  return t;
}

namespace {

bool is_image_file(const std::filesystem::path& p) {
  static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"};
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return exts.count(e) != 0;
}

std::map<std::string, std::filesystem::path> stems_in(const std::filesystem::path& dir, bool allow_json) {
  std::map<std::string, std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto& p = e.path();
    if (is_image_file(p) || (allow_json && p.extension() == ".json")) out[p.stem().string()] = p;
  }
  return out;
}

}  // namespace

std::vector<DatasetEntry> list_dataset(const std::filesystem::path& root) {
  const auto images_dir = root / "images", labels_dir = root / "labels";
  if (!std::filesystem::is_directory(images_dir)) throw std::runtime_error("dataset: missing directory " + images_dir.string());
  if (!std::filesystem::is_directory(labels_dir)) throw std::runtime_error("dataset: missing directory " + labels_dir.string());
  const auto images = stems_in(images_dir, false);
  const auto labels = stems_in(labels_dir, true);
  std::vector<std::string> unmatched;
  std::vector<DatasetEntry> out;
  for (const auto& [stem, path] : images) {
    auto it = labels.find(stem);
    if (it == labels.end()) unmatched.push_back("images/" + stem);
    else out.push_back({stem, path, it->second});
  }
  for (const auto& [stem, path] : labels)
    if (!images.count(stem)) unmatched.push_back("labels/" + stem);
  if (!unmatched.empty()) {
    std::string msg = "dataset: unmatched stems:";
    for (const auto& s : unmatched) msg += " " + s;
    throw std::runtime_error(msg);
  }
  if (out.empty()) throw std::runtime_error("dataset: no image/label pairs under " + root.string());
  return out;
}

Sample load_sample(const DatasetEntry& entry, const ClassMap& classmap, double baseline_radius) {
  RgbImage image = read_rgb(entry.image);
  Image<std::uint8_t> target;
  if (entry.label.extension() == ".json") {
    if (classmap.size() != 2) throw std::invalid_argument("baseline labels need a 2-class map");
    const BinaryMask lines = render_baselines(read_baselines_json(entry.label), image.size2(), baseline_radius);
    target = Image<std::uint8_t>(image.height(), image.width(), 2);
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) {
        target(y, x, 0) = !lines(y, x);
        target(y, x, 1) = lines(y, x);
      }
  } else {
    const RgbImage label = read_rgb(entry.label);
    if (label.size2() != image.size2()) throw std::invalid_argument("label size differs from image for " + entry.stem);
    target = encode_mask(label, classmap);
  }
  return make_sample(std::move(image), std::move(target), entry.stem);
}

}  // namespace dhseg
