#include "mpg/rewards.hpp"

#include <algorithm>
#include <cmath>

namespace mpg {

double reward_grasp_agnostic(const ActionOutcome& outcome) {
  require(outcome.kind == ActionKind::grasp, "reward_grasp_agnostic: not a grasp");
  return outcome.grasped_id ? 1.0 : 0.0;
}

double reward_grasp_target(const ActionOutcome& outcome, int target_id) {
  require(outcome.kind == ActionKind::grasp, "reward_grasp_target: not a grasp");
  return outcome.grasped_id && *outcome.grasped_id == target_id ? 1.0 : 0.0;
}

namespace {
bool took_target(const RewardContext& ctx) {
  return ctx.outcome.grasped_id && *ctx.outcome.grasped_id == ctx.target_id;
}
void check_q(const RewardContext& ctx) {
  require(std::isfinite(ctx.q_before) && std::isfinite(ctx.q_after), "reward: non-finite Q value");
}
}  // namespace

bool move_success(const RewardContext& ctx) {
  return ctx.occlusion_before && !ctx.occlusion_after && !took_target(ctx);
}

double reward_move(const RewardContext& ctx, double improve_threshold) {
  require(ctx.outcome.kind == ActionKind::move, "reward_move: not a move");
  check_q(ctx);
  if (move_success(ctx)) return 1.0;
  if (ctx.q_after - ctx.q_before > improve_threshold && ctx.changed) return 0.5;
  if (took_target(ctx) || !ctx.changed) return -0.5;
  return 0.0;
}

double reward_push(const RewardContext& ctx, double improve_threshold) {
  require(ctx.outcome.kind == ActionKind::push, "reward_push: not a push");
  check_q(ctx);
  if (ctx.q_after - ctx.q_before > improve_threshold && ctx.changed) return 0.5;
  if (!ctx.changed) return -0.5;
  return 0.0;
}

Grid<std::uint8_t> rough_mask(const Grid<std::uint8_t>& goal_mask, int margin) {
  require(margin >= 0, "rough_mask: negative margin");
  int r0 = goal_mask.rows, r1 = -1, c0 = goal_mask.cols, c1 = -1;
  for (int r = 0; r < goal_mask.rows; ++r)
    for (int c = 0; c < goal_mask.cols; ++c)
      if (goal_mask(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) throw Error(ErrorKind::target_absent, "rough_mask: goal mask is empty");
  r0 = std::max(0, r0 - margin);
  c0 = std::max(0, c0 - margin);
  r1 = std::min(goal_mask.rows - 1, r1 + margin);
  c1 = std::min(goal_mask.cols - 1, c1 + margin);
  Grid<std::uint8_t> out(goal_mask.rows, goal_mask.cols, 0);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) out(r, c) = 1;
  return out;
}

namespace {
void check_shapes(const RotationMaps& q, const Grid<std::uint8_t>& mask) {
  require(!q.empty(), "masked max: no maps");
  for (const auto& m : q) require(m.rows == mask.rows && m.cols == mask.cols, "masked max: shape mismatch");
}
}  // namespace

MaskedMax masked_max_q(const RotationMaps& q, const Grid<std::uint8_t>& mask) {
  check_shapes(q, mask);
  MaskedMax best;
  bool first = true;
  for (int k = 0; k < static_cast<int>(q.size()); ++k)
    for (int r = 0; r < mask.rows; ++r)
      for (int c = 0; c < mask.cols; ++c) {
        const double v = mask(r, c) ? q[k](r, c) : 0.0;
        if (first || v > best.value) {
          best = {v, k, {r, c}};
          first = false;
        }
      }
  return best;
}

MaskedMax masked_argmax(const RotationMaps& q, const Grid<std::uint8_t>& mask) {
  check_shapes(q, mask);
  MaskedMax best;
  bool found = false;
  for (int k = 0; k < static_cast<int>(q.size()); ++k)
    for (int r = 0; r < mask.rows; ++r)
      for (int c = 0; c < mask.cols; ++c) {
        if (!mask(r, c)) continue;
        if (!found || q[k](r, c) > best.value) {
          best = {q[k](r, c), k, {r, c}};
          found = true;
        }
      }
  if (!found) throw Error(ErrorKind::target_absent, "masked_argmax: empty mask");
  return best;
}

}  // namespace mpg
