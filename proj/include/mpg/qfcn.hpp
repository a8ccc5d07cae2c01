#pragma once

#include "mpg/action_space.hpp"
#include "mpg/common.hpp"
#include "mpg/rewards.hpp"
#include "mpg/world.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace mpg {

enum class Interp { bilinear, nearest };

const char* to_string(Interp interp);

struct ArchConfig {
  int resolution = 32;                         // input grid side
  std::array<int, 3> enc_channels{8, 16, 32};  // per stream, three 3x3 convs
  std::array<int, 3> strides{2, 2, 1};         // 1 or 2 each; output upsampled by their product
  int head_hidden = 32;
  Interp interp = Interp::bilinear;  // resampling used by the rotation batching

  void validate() const;
  int feature_side() const { return resolution / (strides[0] * strides[1] * strides[2]); }
  bool operator==(const ArchConfig&) const = default;
};

/// A named parameter tensor with its optimizer state. Values are kept in
/// double but always hold float32-representable numbers, so checkpoints
/// round-trip exactly.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  bool trainable = true;  // batch-norm running statistics are not

  std::size_t size() const { return value.size(); }
  bool operator==(const Tensor&) const = default;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 2e-5;
  double eps = 1e-8;
};

inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;
inline constexpr double kDepthInputScale = 10.0;

struct NetParams {
  ArchConfig arch;
  std::vector<Tensor> tensors;
  int completed_stage = 0;  // 0 = untrained, 1..5 after the matching stage
  double q_star = 1.85;
  std::uint64_t global_step = 0;

  // Tensor layout: the shared goal encoder first, then one block per branch.
  static constexpr int kGoalTensors = 6;
  static constexpr int kBranchTensors = 20;
  static int goal_conv(int layer) { return 2 * layer; }  // +1 for the bias
  static int branch_base(int branch) { return kGoalTensors + kBranchTensors * branch; }
  static int color_conv(int branch, int layer) { return branch_base(branch) + 2 * layer; }
  static int depth_conv(int branch, int layer) { return branch_base(branch) + 6 + 2 * layer; }
  static int head1(int branch) { return branch_base(branch) + 12; }
  static int bn(int branch) { return branch_base(branch) + 14; }  // gamma, beta, mean, var
  static int head2(int branch) { return branch_base(branch) + 18; }

  /// Whether tensor i belongs to the given branch (the goal encoder belongs to none).
  static bool in_branch(int tensor, int branch) {
    return tensor >= branch_base(branch) && tensor < branch_base(branch) + kBranchTensors;
  }

  bool operator==(const NetParams&) const = default;
};

NetParams init_params(const ArchConfig& arch, std::uint64_t seed);

/// 3 branches x 16 rotations x H x W; branches not requested stay empty.
struct QMaps {
  std::array<RotationMaps, 3> maps;
  const RotationMaps& operator[](ActionKind kind) const { return maps[branch_index(kind)]; }
  RotationMaps& operator[](ActionKind kind) { return maps[branch_index(kind)]; }
};

/// Network input planes before rotation: color scaled to [0,1] (3 planes),
/// depth scaled by kDepthInputScale, goal mask as 0/1.
struct NetInput {
  int side = 0;
  std::vector<double> color, depth, goal;
};

NetInput make_net_input(const Observation& obs);

/// Inference-mode forward (batch norm uses running statistics).
QMaps forward(const NetParams& params, const Observation& obs,
              const std::vector<ActionKind>& branches = {ActionKind::move, ActionKind::grasp, ActionKind::push});
QMaps forward(const NetParams& params, const NetInput& input,
              const std::vector<ActionKind>& branches = {ActionKind::move, ActionKind::grasp, ActionKind::push});

/// Forward of one branch with batch norm in training mode (the 16 rotations
/// form the batch). Returns the 16 maps; nothing is mutated.
RotationMaps forward_training(const NetParams& params, const Observation& obs, ActionKind branch);

/// Image rotation about the grid center used by the rotation batching:
/// out(p) = in(c + R(-angle)(p - c)), samples outside the grid read 0.
std::vector<double> rotate_image(const std::vector<double>& src, int channels, int side, double angle, Interp interp);

double huber(double delta);
double huber_grad(double diff);  // derivative of huber(|diff|) w.r.t. diff

double td_target(double reward, double next_max_q, bool terminal, double gamma);

struct Gradients {
  std::vector<std::vector<double>> per_tensor;  // empty when the tensor gets no update
  std::vector<double> batch_mean, batch_var;    // batch-norm statistics of the pass
};

struct LossEval {
  double loss = 0.0;
  double q = 0.0;      // Q(s, a) in training mode
  double delta = 0.0;  // |q - y|
};

/// Loss at the executed action and its gradient with respect to every tensor
/// the branch owns (plus the goal encoder when the grasp branch trains).
LossEval loss_and_gradients(const NetParams& params, const Observation& obs, const Action& action, double target,
                            Gradients& grads);

/// Loss only, same forward as above.
LossEval training_loss(const NetParams& params, const Observation& obs, const Action& action, double target);

struct TrainResult {
  double loss = 0.0;
  double q = 0.0;
  double delta = 0.0;
};

/// One optimizer step on the executed action. Only the executed branch is
/// updated; the shared goal encoder only when that branch is grasp.
TrainResult train_step(NetParams& params, const Observation& obs, const Action& action, double target,
                       const AdamConfig& adam = {});

void save_checkpoint(std::ostream& out, const NetParams& params);
NetParams load_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const NetParams& params);
NetParams load_checkpoint(const std::string& path);

}  // namespace mpg
