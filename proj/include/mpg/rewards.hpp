#pragma once

#include "mpg/action_space.hpp"
#include "mpg/common.hpp"
#include "mpg/world.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace mpg {

struct RewardContext {
  ActionOutcome outcome;
  int target_id = 0;
  double q_before = 0.0;  // masked max grasp Q before the action
  double q_after = 0.0;   // and after it
  bool occlusion_before = false;
  bool occlusion_after = false;
  bool changed = false;
};

// Thresholds on the improvement of the grasp Q value.
inline constexpr double kMoveImproveThreshold = 0.5;
inline constexpr double kPushImproveThreshold = 0.1;
inline constexpr int kRoughMaskMargin = 2;

double reward_grasp_agnostic(const ActionOutcome& outcome);
double reward_grasp_target(const ActionOutcome& outcome, int target_id);

/// Move succeeded: the occlusion went away and the target stayed on the table.
bool move_success(const RewardContext& ctx);
double reward_move(const RewardContext& ctx, double improve_threshold = kMoveImproveThreshold);
double reward_push(const RewardContext& ctx, double improve_threshold = kPushImproveThreshold);

/// Filled bounding rectangle of the set cells, grown by margin and clamped.
Grid<std::uint8_t> rough_mask(const Grid<std::uint8_t>& goal_mask, int margin = kRoughMaskMargin);

/// One map per rotation, each rows x cols.
using RotationMaps = std::vector<Grid<double>>;

struct MaskedMax {
  double value = 0.0;
  int rot_idx = 0;
  Pixel pixel;
};

/// Max over all rotations with values outside the mask read as 0.
/// Ties go to the lowest (rot, row, col).
MaskedMax masked_max_q(const RotationMaps& q, const Grid<std::uint8_t>& mask);

/// Max over masked cells only (values outside are ignored, not zeroed).
/// Used for action selection, where a negative inside value must still win.
MaskedMax masked_argmax(const RotationMaps& q, const Grid<std::uint8_t>& mask);

}  // namespace mpg
