#include "mpg/action_space.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mpg {

void GridConfig::validate() const {
  require(resolution >= 16, "grid resolution must be >= 16");
  require(extent > 0.0, "grid extent must be positive");
}

GridConfig GridConfig::with_resolution(int resolution) {
  return GridConfig{0.007 * resolution, resolution};
}

const char* to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::move: return "move";
    case ActionKind::grasp: return "grasp";
    case ActionKind::push: return "push";
  }
  return "?";
}

ActionKind kind_from_string(const std::string& name) {
  for (ActionKind k : kAllKinds)
    if (name == to_string(k)) return k;
  throw Error(ErrorKind::parse_error, "unknown action kind '" + name + "'");
}

ActionKind kind_from_branch(int branch) {
  require(branch >= 0 && branch < kBranches, "branch index out of range");
  return static_cast<ActionKind>(branch);
}

double rot_index_to_angle(int rot_idx) {
  require(rot_idx >= 0 && rot_idx < kRotations, "rotation index out of range");
  return rot_idx * (std::numbers::pi / 8.0);
}

Vec2 pixel_to_world(Pixel pixel, const GridConfig& cfg) {
  const double cs = cfg.cell_size();
  return {(pixel.col + 0.5) * cs, (pixel.row + 0.5) * cs};
}

Pixel world_to_pixel(Vec2 position, const GridConfig& cfg) {
  const double cs = cfg.cell_size();
  const int row = std::clamp(static_cast<int>(std::floor(position.y / cs)), 0, cfg.resolution - 1);
  const int col = std::clamp(static_cast<int>(std::floor(position.x / cs)), 0, cfg.resolution - 1);
  return {row, col};
}

double surface_height(const Grid<double>& depth, Pixel pixel) {
  require(depth.inside(pixel.row, pixel.col), "pixel outside grid");
  double h = 0.0;
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc)
      if (depth.inside(pixel.row + dr, pixel.col + dc)) h = std::max(h, depth(pixel.row + dr, pixel.col + dc));
  return h;
}

double height_rule(double h, ActionKind kind) {
  if (kind == ActionKind::push) return h > 0.0 ? h - kPushDescent : kPushFloor;
  return std::max(h - kGraspDescent, 0.0);
}

double action_height(const Grid<double>& depth, Pixel pixel, ActionKind kind) {
  return height_rule(surface_height(depth, pixel), kind);
}

WorldAction decode(int branch, int rot_idx, Pixel pixel, const Grid<double>& depth, const GridConfig& cfg) {
  const ActionKind kind = kind_from_branch(branch);
  require(depth.rows == cfg.resolution && depth.cols == cfg.resolution, "depth map does not match grid");
  const Vec2 p = pixel_to_world(pixel, cfg);
  return {kind, p.x, p.y, action_height(depth, pixel, kind), rot_index_to_angle(rot_idx)};
}

}  // namespace mpg
