#pragma once

#include "mpg/common.hpp"
#include "mpg/geometry.hpp"

#include <array>

namespace mpg {

/// Square tabletop workspace discretized into resolution x resolution cells.
struct GridConfig {
  double extent = 0.448;  // meters
  int resolution = 64;

  double cell_size() const { return extent / resolution; }
  void validate() const;

  /// Grid with the default 7 mm cells.
  static GridConfig with_resolution(int resolution);
};

enum class ActionKind { move = 0, grasp = 1, push = 2 };

inline constexpr int kRotations = 16;
inline constexpr int kBranches = 3;
inline constexpr std::array<ActionKind, 3> kAllKinds{ActionKind::move, ActionKind::grasp, ActionKind::push};

const char* to_string(ActionKind kind);
ActionKind kind_from_string(const std::string& name);
inline int branch_index(ActionKind kind) { return static_cast<int>(kind); }
ActionKind kind_from_branch(int branch);

struct Action {
  ActionKind kind = ActionKind::grasp;
  Pixel pixel;
  int rot_idx = 0;
  bool operator==(const Action&) const = default;
};

struct WorldAction {
  ActionKind kind = ActionKind::grasp;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double angle = 0.0;  // closing axis for grasp/move, travel direction for push
};

// Height offsets for the three primitives (meters).
inline constexpr double kGraspDescent = 0.04;
inline constexpr double kPushDescent = 0.01;
inline constexpr double kPushFloor = 0.02;
inline constexpr double kPushLength = 0.10;

double rot_index_to_angle(int rot_idx);

/// Cell-center convention with the workspace origin at the grid corner;
/// x runs along columns and y along rows.
Vec2 pixel_to_world(Pixel pixel, const GridConfig& cfg);
Pixel world_to_pixel(Vec2 position, const GridConfig& cfg);

/// Surface height under a pixel: max over its 3x3 neighborhood.
double surface_height(const Grid<double>& depth, Pixel pixel);

/// z-height rule applied to a known surface height h.
double height_rule(double h, ActionKind kind);

double action_height(const Grid<double>& depth, Pixel pixel, ActionKind kind);

WorldAction decode(int branch, int rot_idx, Pixel pixel, const Grid<double>& depth, const GridConfig& cfg);

}  // namespace mpg
