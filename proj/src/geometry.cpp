#include "mpg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mpg {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

Vec2 rotate(Vec2 v, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

double signed_area(const Polygon& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) a += cross(poly[i], poly[(i + 1) % poly.size()]);
  return 0.5 * a;
}

double area(const Polygon& poly) { return std::abs(signed_area(poly)); }

Vec2 centroid(const Polygon& poly) {
  double a = 0.0;
  Vec2 c{};
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 p = poly[i];
    const Vec2 q = poly[(i + 1) % poly.size()];
    const double w = cross(p, q);
    a += w;
    c = c + (p + q) * w;
  }
  if (std::abs(a) < 1e-300) return poly.empty() ? Vec2{} : poly.front();
  return c * (1.0 / (3.0 * a));
}

bool is_convex(const Polygon& poly) {
  if (poly.size() < 3) return false;
  int sign = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % poly.size()];
    const Vec2 c = poly[(i + 2) % poly.size()];
    const double z = cross(b - a, c - b);
    if (std::abs(z) < 1e-15) continue;
    const int s = z > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return sign != 0;
}

Polygon make_box(double width, double length) {
  const double hx = 0.5 * width;
  const double hy = 0.5 * length;
  return {{-hx, -hy}, {hx, -hy}, {hx, hy}, {-hx, hy}};
}

Polygon make_regular(int sides, double radius) {
  Polygon poly;
  poly.reserve(static_cast<std::size_t>(sides));
  for (int i = 0; i < sides; ++i) {
    const double a = 2.0 * std::numbers::pi * i / sides;
    poly.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return poly;
}

Polygon transformed(const Polygon& local, Vec2 position, double yaw) {
  Polygon out;
  out.reserve(local.size());
  for (const Vec2& v : local) out.push_back(rotate(v, yaw) + position);
  return out;
}

Polygon translated(const Polygon& poly, Vec2 offset) {
  Polygon out = poly;
  for (Vec2& v : out) v = v + offset;
  return out;
}

Polygon oriented_rect(Vec2 center, double axis_angle, double u_lo, double u_hi, double half_width) {
  const Vec2 u = unit(axis_angle);
  const Vec2 v{-u.y, u.x};
  return {center + u * u_lo - v * half_width, center + u * u_hi - v * half_width,
          center + u * u_hi + v * half_width, center + u * u_lo + v * half_width};
}

Interval project(const Polygon& poly, Vec2 axis) {
  Interval r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Vec2& p : poly) {
    const double d = dot(p, axis);
    r.lo = std::min(r.lo, d);
    r.hi = std::max(r.hi, d);
  }
  return r;
}

bool contains(const Polygon& poly, Vec2 p) {
  int sign = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % poly.size()];
    const double z = cross(b - a, p - a);
    if (std::abs(z) <= 1e-12) continue;
    const int s = z > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return true;
}

namespace {

void collect_axes(const Polygon& poly, std::vector<Vec2>& axes) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 e = poly[(i + 1) % poly.size()] - poly[i];
    const double len = norm(e);
    if (len < 1e-15) continue;
    axes.push_back({-e.y / len, e.x / len});
  }
}

}  // namespace

bool overlaps(const Polygon& a, const Polygon& b, double eps) {
  std::vector<Vec2> axes;
  collect_axes(a, axes);
  collect_axes(b, axes);
  for (const Vec2& n : axes) {
    const Interval pa = project(a, n);
    const Interval pb = project(b, n);
    if (pa.hi <= pb.lo + eps || pb.hi <= pa.lo + eps) return false;
  }
  return true;
}

std::optional<double> sweep_contact(const Polygon& moving, const Polygon& fixed, Vec2 dir, double eps) {
  std::vector<Vec2> axes;
  collect_axes(moving, axes);
  collect_axes(fixed, axes);
  double enter = -std::numeric_limits<double>::infinity();
  double exit = std::numeric_limits<double>::infinity();
  for (const Vec2& n : axes) {
    const Interval pa = project(moving, n);
    const Interval pb = project(fixed, n);
    const double v = dot(dir, n);
    // Overlap on this axis while pa.lo + v t < pb.hi - eps and pa.hi + v t > pb.lo + eps.
    if (std::abs(v) < 1e-15) {
      if (pa.hi <= pb.lo + eps || pb.hi <= pa.lo + eps) return std::nullopt;
      continue;
    }
    double t0 = (pb.lo + eps - pa.hi) / v;
    double t1 = (pb.hi - eps - pa.lo) / v;
    if (t0 > t1) std::swap(t0, t1);
    enter = std::max(enter, t0);
    exit = std::min(exit, t1);
    if (enter >= exit) return std::nullopt;
  }
  if (exit <= 0.0) return std::nullopt;
  return std::max(enter, 0.0);
}

double distance_to_point(const Polygon& poly, Vec2 p) {
  if (contains(poly, p)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % poly.size()];
    const Vec2 e = b - a;
    const double len2 = dot(e, e);
    const double t = len2 > 0 ? std::clamp(dot(p - a, e) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, norm(p - (a + e * t)));
  }
  return best;
}

Polygon clip_halfplane(const Polygon& poly, Vec2 normal, double offset) {
  Polygon out;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % poly.size()];
    const double da = dot(a, normal) - offset;
    const double db = dot(b, normal) - offset;
    if (da <= 0) out.push_back(a);
    if ((da < 0 && db > 0) || (da > 0 && db < 0)) {
      const double t = da / (da - db);
      out.push_back(a + (b - a) * t);
    }
  }
  return out;
}

double circumradius(const Polygon& poly, Vec2 center) {
  double r = 0.0;
  for (const Vec2& v : poly) r = std::max(r, norm(v - center));
  return r;
}

}  // namespace mpg
