#include "dhseg/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace dhseg {

double signed_area(const std::vector<Point2>& poly) {
  double a = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Point2& p = poly[i];
    const Point2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

double polygon_area(const std::vector<Point2>& poly) { return std::abs(signed_area(poly)); }

std::vector<Point2> to_polygon(const Quad& q) { return {q.corners.begin(), q.corners.end()}; }

std::vector<Point2> to_polygon(const AxisAlignedBox& b) {
  return {{double(b.x_min), double(b.y_min)},
          {double(b.x_max), double(b.y_min)},
          {double(b.x_max), double(b.y_max)},
          {double(b.x_min), double(b.y_max)}};
}

namespace {

double cross(Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool segments_intersect(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  const double d1 = cross(q1, q2, p1), d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1), d4 = cross(p1, p2, q2);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 && d4 != 0;
}

}  // namespace

bool is_simple(const Quad& q) {
  const auto& c = q.corners;
  return !segments_intersect(c[0], c[1], c[2], c[3]) && !segments_intersect(c[1], c[2], c[3], c[0]);
}

std::vector<Point2> convex_intersection(const std::vector<Point2>& subject, const std::vector<Point2>& clip_in) {
  std::vector<Point2> clip = clip_in;
  if (signed_area(clip) < 0) std::reverse(clip.begin(), clip.end());
  std::vector<Point2> out = subject;
  for (size_t i = 0; i < clip.size() && !out.empty(); ++i) {
    const Point2 a = clip[i], b = clip[(i + 1) % clip.size()];
    auto inside = [&](Point2 p) { return cross(a, b, p) >= 0; };
    auto hit = [&](Point2 p, Point2 q) {
      const double dp = cross(a, b, p), dq = cross(a, b, q);
      const double t = dp / (dp - dq);
      return Point2{p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
    };
    std::vector<Point2> in = std::move(out);
    out.clear();
    for (size_t j = 0; j < in.size(); ++j) {
      const Point2 cur = in[j], prev = in[(j + in.size() - 1) % in.size()];
      if (inside(cur)) {
        if (!inside(prev)) out.push_back(hit(prev, cur));
        out.push_back(cur);
      } else if (inside(prev)) {
        out.push_back(hit(prev, cur));
      }
    }
  }
  return out;
}

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace dhseg
