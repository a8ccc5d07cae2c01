#pragma once

#include "mpg/action_space.hpp"
#include "mpg/metrics.hpp"
#include "mpg/qfcn.hpp"
#include "mpg/rewards.hpp"
#include "mpg/world.hpp"

#include <array>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mpg {

// Stages are numbered 1..5: target-agnostic grasp, target grasp, move only,
// push only, joint alternation.
inline constexpr int kNumStages = 5;
const char* stage_name(int stage);  // "I".."V"
int stage_from_name(const std::string& name);

struct StageConfig {
  int stage = 1;
  int n_objects = 5;
  SpawnMode mode = SpawnMode::scattered;
  int max_moves = 5;
  int max_pushes = 5;
  int max_motions = 10;
  int grasp_limit = 2;  // consecutive failed grasps before the heuristic grasp
  int iterations = 500;

  void validate() const;
};

struct CoordinatorConfig {
  double q_star = 1.85;
  double move_q_threshold = kMoveImproveThreshold;
  double push_q_threshold = kPushImproveThreshold;
  double epsilon_start = 0.5;
  double epsilon_end = 0.1;
  int epsilon_decay_steps = 1500;
  double gamma = 0.5;

  void validate() const;
};

/// Everything a training run needs; parsed from a flat key=value file.
struct TrainConfig {
  int grid_resolution = 32;
  ArchConfig arch;
  std::array<StageConfig, kNumStages> stages;
  CoordinatorConfig coord;
  AdamConfig adam;
  int replay_capacity = 512;
  bool calibrate_q_star = true;
  int calibration_scenes = 60;
  int window = 200;

  TrainConfig();
  GridConfig grid() const { return GridConfig::with_resolution(grid_resolution); }
  void validate() const;
  const StageConfig& stage(int s) const { return stages.at(static_cast<std::size_t>(s - 1)); }
  StageConfig& stage(int s) { return stages.at(static_cast<std::size_t>(s - 1)); }
};

/// Applies key=value pairs; unknown keys and bad values raise parse_error.
void apply_config_line(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig parse_config(std::istream& in);
TrainConfig load_config(const std::string& path);
void write_config(std::ostream& out, const TrainConfig& cfg);

double epsilon(int step, const CoordinatorConfig& cfg);

enum class TerminationReason {
  target_grasped,
  scene_empty,
  move_success,
  target_disturbed,
  grasp_failed,
  motion_cap,
  move_cap,
  push_cap,
  budget,  // the stage ran out of iterations mid-episode
};
const char* to_string(TerminationReason reason);

struct EpisodeStep {
  Action action;
  bool heuristic = false;  // fallback grasp, no training sample
  bool explored = false;
  bool trained = false;
  double reward = 0.0;
  double loss = 0.0;
  double q_max = 0.0;  // masked max of the executed branch at decision time
  double epsilon = 0.0;
  bool success = false;  // grasp took the target (any object in stage I), move cleared, push improved
  bool changed = false;
};

struct EpisodeLog {
  int stage = 1;
  int episode = 0;
  std::vector<EpisodeStep> steps;
  TerminationReason reason = TerminationReason::motion_cap;
  double discounted_return = 0.0;  // accumulated as the episode runs
  bool target_grasped = false;
};

/// Counters the coordination rules depend on.
struct EpisodeCounters {
  int motions = 0;
  int moves = 0;
  int pushes = 0;
  int failed_grasps = 0;  // consecutive
};

struct Decision {
  Action action;
  double q_max = 0.0;   // masked max of the chosen branch (mask-zero semantics)
  double grasp_q = 0.0; // masked max of the grasp branch, when it was evaluated
  bool explored = false;
  bool stop = false;  // no admissible branch: pushes exhausted below the threshold
};

/// Which branch the coordinator wants for this state; empty once stage IV
/// or V has spent its pushes without the grasp value passing q_star.
std::optional<ActionKind> choose_branch(int stage, bool occluded, double grasp_q, double q_star,
                                        const EpisodeCounters& counters, const StageConfig& sc);

/// Chooses the action for a state. qmaps must hold the branches the stage
/// needs (grasp for stages IV and V, plus the chosen branch).
Decision select_action(const QMaps& qmaps, const Observation& obs, bool occluded, int stage,
                       const EpisodeCounters& counters, const StageConfig& sc, double q_star, double eps, Rng& rng);

/// Fallback grasp: mask centroid, closing axis across the principal axis.
/// Used from stage II on; stage I has no target to aim at.
Action heuristic_grasp(const Grid<std::uint8_t>& goal_mask);

struct Transition {
  Observation obs;
  Action action;
  double reward = 0.0;
  Observation next;
  bool terminal = false;
};

/// FIFO of positive-reward transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 512) : capacity_(capacity) {}
  void add(Transition t);
  /// Uniform sample among stored transitions of one branch.
  const Transition* sample(ActionKind kind, Rng& rng) const;
  std::size_t size() const { return items_.size(); }

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

/// Trainer state carried across episodes of a stage.
struct StageRun {
  int stage = 1;
  int iteration = 0;  // actions executed so far in this stage
  ReplayBuffer replay;
  Rng rng;
};

struct EpisodeOptions {
  bool train = true;
  std::optional<ActionKind> trained_branch;  // stage V: the only branch updated
  bool heuristic = true;
  bool random_policy = false;                // uniform actions in the rough mask, no network
  std::optional<double> fixed_epsilon;       // overrides the schedule
  int max_iterations = 1 << 30;              // stop once run.iteration reaches this
};

/// One episode on a prepared world. Mutates params when training.
EpisodeLog run_episode(WorldState& world, NetParams& params, const TrainConfig& cfg, int stage, int episode,
                       StageRun& run, const EpisodeOptions& opts = {});

/// Scene for an episode of a stage: spawn, choose the target, verify the
/// stage's occlusion requirement.
WorldState stage_scene(const TrainConfig& cfg, int stage, int iteration, std::uint64_t seed);

struct StageResult {
  std::vector<EpisodeLog> episodes;
  std::vector<MetricRow> rows;
  std::optional<double> calibrated_q_star;  // stages II-V, when calibration succeeded
  std::string note;                         // calibration outcome, for logs
};

/// Metric rows for one episode, with window summaries whenever the stage
/// iteration count crosses a multiple of window. rows holds the stage's
/// rows so far.
void append_metric_rows(const EpisodeLog& log, int first_iteration, int window, std::vector<MetricRow>& rows);

/// Branch trained in stage V episode e: move, push, grasp in turn.
ActionKind stage5_branch(int episode);

/// Runs one stage. params must have completed the previous stage.
/// A random policy run (exploration probability 1, no training) is available
/// through random_policy for baselines on the same scene seeds.
StageResult run_stage(NetParams& params, const TrainConfig& cfg, int stage, std::uint64_t seed,
                      bool random_policy = false);

/// Success-time grasp Q values on isolated-target scenes, 25th percentile.
double calibrate_q_star(const NetParams& params, const TrainConfig& cfg, int n_scenes, std::uint64_t seed);

/// Linear-interpolation percentile of a sample (q in [0, 1]).
double percentile(std::vector<double> values, double q);

/// Discounted return folded from the rewards, last step first.
double fold_return(const EpisodeLog& log, double gamma);

}  // namespace mpg
