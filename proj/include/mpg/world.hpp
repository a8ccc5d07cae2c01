#pragma once

#include "mpg/action_space.hpp"
#include "mpg/common.hpp"
#include "mpg/geometry.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mpg {

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double yaw = 0.0;
  bool operator==(const Pose&) const = default;
};

struct SceneObject {
  int id = 0;
  Polygon footprint;  // object frame, meters
  double height = 0.0;
  Pose pose;
  int color_id = 0;

  Polygon world_footprint() const;
  double top() const { return pose.z + height; }
  bool operator==(const SceneObject&) const = default;
};

struct WorldState {
  std::vector<SceneObject> objects;
  int target_id = 0;
  bool target_grasped = false;  // target left the scene
  Rng rng;
  int motion_count = 0;

  const SceneObject* find(int id) const;
  bool target_present() const { return !target_grasped && find(target_id) != nullptr; }
  bool operator==(const WorldState&) const = default;
};

using Rgb = std::array<std::uint8_t, 3>;

struct Observation {
  Grid<Rgb> color;
  Grid<double> depth;
  Grid<std::uint8_t> goal_mask;
};

enum class MaskMode {
  target,       // footprint of the target object
  all_objects,  // union of every footprint (target-agnostic training)
};

struct ActionOutcome {
  ActionKind kind = ActionKind::grasp;
  std::optional<int> grasped_id;
  std::vector<int> displaced_ids;
  bool world_changed = false;
};

enum class SpawnMode { scattered, adjacent, stacked, mixed };

const char* to_string(SpawnMode mode);
SpawnMode spawn_mode_from_string(const std::string& name);

/// Parallel-jaw gripper: fingers sit at +-max_opening/2 along the closing axis.
struct GripperModel {
  double max_opening = 0.08;
  double finger_width = 0.02;  // across the closing axis
};

// Change and occlusion thresholds.
inline constexpr double kChangeThreshold = 0.001;
inline constexpr int kChangeMinCells = 3;
inline constexpr double kOcclusionTolerance = 0.002;
inline constexpr double kMaxObjectTop = 0.15;

extern const std::array<Rgb, 10> kPalette;

WorldState spawn_scene(const GridConfig& cfg, int n, SpawnMode mode, std::uint64_t seed);

Observation render(const WorldState& ws, const GridConfig& cfg, MaskMode mask = MaskMode::target);

bool check_occlusion(const WorldState& ws, const GridConfig& cfg);

std::pair<WorldState, ActionOutcome> execute_grasp(const WorldState& ws, Pixel pixel, int rot_idx,
                                                   const GridConfig& cfg);
std::pair<WorldState, ActionOutcome> execute_push(const WorldState& ws, Pixel pixel, int rot_idx,
                                                  const GridConfig& cfg);
std::pair<WorldState, ActionOutcome> execute_move(const WorldState& ws, Pixel pixel, int rot_idx,
                                                  const GridConfig& cfg);
std::pair<WorldState, ActionOutcome> execute(const WorldState& ws, const Action& action, const GridConfig& cfg);

bool change_detected(const Grid<double>& before, const Grid<double>& after);

/// Index of the object that a parallel-jaw close at this pose would hold,
/// or nullopt if the close fails.
std::optional<std::size_t> grasp_target(const WorldState& ws, Vec2 center, double angle, double z,
                                        const GridConfig& cfg, const GripperModel& gripper = {});

/// Drops every object onto whatever lies beneath it (or the table).
void settle(WorldState& ws);

/// True when the two objects' footprints and z-intervals both overlap.
bool interpenetrate(const SceneObject& a, const SceneObject& b);
bool collision_free(const WorldState& ws);
bool inside_workspace(const SceneObject& obj, const GridConfig& cfg, double tol = 1e-9);

// Scene snapshot: line-oriented text, round-trips exactly.
void write_scene(std::ostream& out, const WorldState& ws, const GridConfig& cfg);
std::pair<WorldState, GridConfig> read_scene(std::istream& in);

// Heightmap dumps. Depth: 16-bit binary PGM at 10000 counts per meter,
// big-endian samples as the format requires.
inline constexpr double kDepthCountsPerMeter = 10000.0;
void write_depth_pgm(std::ostream& out, const Grid<double>& depth);
Grid<std::uint16_t> read_depth_pgm(std::istream& in);
void write_color_ppm(std::ostream& out, const Grid<Rgb>& color);
void write_mask_pgm(std::ostream& out, const Grid<std::uint8_t>& mask);

}  // namespace mpg
