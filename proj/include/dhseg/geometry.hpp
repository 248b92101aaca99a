#pragma once

#include <array>
#include <vector>

namespace dhseg {

/// Pixel coordinates: x is the column, y the row.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Four corners, clockwise from top-left (in image coordinates, y down).
struct Quad {
  std::array<Point2, 4> corners;
  friend bool operator==(const Quad&, const Quad&) = default;
};

/// Half-open integer box [x_min, x_max) x [y_min, y_max).
struct AxisAlignedBox {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long long area() const { return static_cast<long long>(width()) * height(); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  friend bool operator==(const AxisAlignedBox&, const AxisAlignedBox&) = default;
};

struct PolyLine {
  std::vector<Point2> vertices;
  friend bool operator==(const PolyLine&, const PolyLine&) = default;
};

/// Signed shoelace area; positive for clockwise order in image coordinates.
double signed_area(const std::vector<Point2>& polygon);
double polygon_area(const std::vector<Point2>& polygon);
std::vector<Point2> to_polygon(const Quad& q);
std::vector<Point2> to_polygon(const AxisAlignedBox& b);

/// True when no two non-adjacent edges intersect.
bool is_simple(const Quad& q);

/// Intersection of two convex polygons (Sutherland-Hodgman).
std::vector<Point2> convex_intersection(const std::vector<Point2>& subject, const std::vector<Point2>& clip);

double point_segment_distance(Point2 p, Point2 a, Point2 b);

}  // namespace dhseg
