#pragma once

// Post-processing operators that turn probability maps into masks and
// vector shapes. All functions are pure. Threshold comparisons are inclusive
// (value >= t) throughout.

#include <span>
#include <vector>

#include "dhseg/geometry.hpp"
#include "dhseg/image.hpp"

namespace dhseg {

// --- thresholding -----------------------------------------------------------

/// Pixel is 1 iff value >= t. `map` must be single-channel.
BinaryMask threshold_fixed(const ProbabilityMap& map, float t);

struct OtsuResult {
  double threshold = 0.0;
  BinaryMask mask;
};

/// Number of histogram bins used by threshold_otsu; bin b covers [b/256, (b+1)/256).
inline constexpr int kOtsuBins = 256;
int otsu_bin(float value);

/// Otsu's method over 256 bins on [0, 1]. The threshold is k/256 for the
/// split k (bins < k vs bins >= k) maximizing between-class variance, the
/// smallest such k on ties. Throws std::invalid_argument when every value
/// falls in one bin.
OtsuResult threshold_otsu(const ProbabilityMap& map);

/// Separable Gaussian blur, kernel truncated at 4 sigma, half-sample
/// symmetric border.
ProbabilityMap gaussian_filter(const ProbabilityMap& map, double sigma);
std::vector<double> gaussian_kernel(double sigma);

/// Union of the 8-connected components of {value >= p_low} that contain a
/// pixel with value >= p_high.
BinaryMask hysteresis_threshold(const ProbabilityMap& map, float p_low, float p_high);

// --- morphology -------------------------------------------------------------

enum class SelemShape { square, disk };

struct StructuringElement {
  SelemShape shape = SelemShape::square;
  int radius = 1;
};

enum class MorphOp { erode, dilate, open, close };

/// Binary morphology. Pixels outside the image count as background for both
/// erosion and dilation.
BinaryMask morph(const BinaryMask& mask, MorphOp op, StructuringElement selem = {});

// --- connected components ---------------------------------------------------

struct ComponentInfo {
  int label = 0;
  long long size = 0;
  AxisAlignedBox bbox;
};

struct Components {
  LabelMap labels;                  // 0 = background, 1..K
  std::vector<ComponentInfo> table;  // table[k - 1] describes label k
  int count() const { return static_cast<int>(table.size()); }
};

/// Two-pass union-find labeling; connectivity is 4 or 8. Labels are numbered
/// in raster order of each component's first pixel.
Components connected_components(const BinaryMask& mask, int connectivity = 8);

/// Keeps components with size >= min_size.
BinaryMask filter_small_components(const Components& components, long long min_size);

/// Mask of the component with the most pixels (lowest label on ties); empty
/// mask when there are none.
BinaryMask largest_component(const Components& components);

struct PixelCoord {
  int x = 0, y = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

std::vector<PixelCoord> component_pixels(const LabelMap& labels, int label);
std::vector<PixelCoord> foreground_pixels(const BinaryMask& mask);

// --- vectorization ----------------------------------------------------------

/// Corners maximizing -x-y, x-y, x+y, -x+y over foreground pixels (ties: smaller
/// y, then smaller x). Throws on an empty mask or a zero-area / self-crossing quad.
Quad extract_extreme_quad(const BinaryMask& mask);

/// Tight half-open bounds. Throws on an empty set.
AxisAlignedBox min_enclosing_box(std::span<const PixelCoord> pixels);

/// Centroid path along the longer bounding-box axis, simplified with
/// Ramer-Douglas-Peucker at `epsilon` (epsilon <= 0 keeps the dense path).
/// Throws when fewer than two path points exist.
PolyLine vectorize_polyline(std::span<const PixelCoord> pixels, double epsilon = 2.0);

/// The dense centroid path used by vectorize_polyline.
std::vector<Point2> centroid_path(std::span<const PixelCoord> pixels);

/// Ramer-Douglas-Peucker reduction.
std::vector<Point2> simplify_path(const std::vector<Point2>& path, double epsilon);

/// Keeps boxes with area >= min_area_fraction * image area.
std::vector<AxisAlignedBox> filter_small_boxes(const std::vector<AxisAlignedBox>& boxes, Size2 image_size,
                                               double min_area_fraction = 0.005);

/// `inner` clipped to `outer`. Throws when they do not overlap.
AxisAlignedBox enforce_enclosure(const AxisAlignedBox& inner, const AxisAlignedBox& outer);

// --- helpers ----------------------------------------------------------------

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);
BinaryMask rasterize_box(const AxisAlignedBox& box, Size2 size);
/// Pixel (x, y) is set when its center lies inside the polygon or on its boundary.
BinaryMask rasterize_polygon(const std::vector<Point2>& polygon, Size2 size);

}  // namespace dhseg
