#pragma once

#include <optional>
#include <vector>

namespace mpg {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  bool operator==(const Vec2&) const = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
double norm(Vec2 v);
Vec2 rotate(Vec2 v, double angle);
inline Vec2 unit(double angle) { return rotate({1.0, 0.0}, angle); }

/// Convex polygon, counter-clockwise vertex order in a y-down grid frame is
/// not assumed; routines below are orientation-agnostic unless noted.
using Polygon = std::vector<Vec2>;

struct Interval {
  double lo;
  double hi;
};

double signed_area(const Polygon& poly);
double area(const Polygon& poly);
Vec2 centroid(const Polygon& poly);
bool is_convex(const Polygon& poly);

Polygon make_box(double width, double length);
Polygon make_regular(int sides, double circumradius);
Polygon transformed(const Polygon& local, Vec2 position, double yaw);
Polygon translated(const Polygon& poly, Vec2 offset);

/// Rectangle spanning [u_lo, u_hi] along `axis` and [-half_width, half_width]
/// across it, anchored at `center`.
Polygon oriented_rect(Vec2 center, double axis_angle, double u_lo, double u_hi, double half_width);

Interval project(const Polygon& poly, Vec2 axis);

/// Point-in-polygon with boundary counted as inside.
bool contains(const Polygon& poly, Vec2 p);

/// True when the interiors overlap by more than `eps` along every separating axis.
bool overlaps(const Polygon& a, const Polygon& b, double eps = 1e-9);

/// Smallest t >= 0 at which `moving` translated by t * dir first overlaps
/// `fixed`; nullopt if it never does. `dir` must be a unit vector.
std::optional<double> sweep_contact(const Polygon& moving, const Polygon& fixed, Vec2 dir, double eps = 1e-9);

double distance_to_point(const Polygon& poly, Vec2 p);

/// Keeps the part of `poly` with dot(p, normal) <= offset.
Polygon clip_halfplane(const Polygon& poly, Vec2 normal, double offset);

double circumradius(const Polygon& poly, Vec2 center);

}  // namespace mpg
