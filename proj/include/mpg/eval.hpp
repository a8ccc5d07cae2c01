#pragma once

#include "mpg/curriculum.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mpg {

enum class Policy { mpg, grasp_only, random };
const char* to_string(Policy policy);
Policy policy_from_string(const std::string& name);

struct EvalScenario {
  int n_objects = 5;
  int n_runs = 50;
  int target_range = 5;  // target drawn among objects 0..target_range-1
  SpawnMode mode = SpawnMode::mixed;
  bool occluded_target = true;  // the target starts under another object
  int grid_resolution = 32;
  int max_motions = 10;
  int max_moves = 5;
  int max_pushes = 5;
  int grasp_limit = 2;  // consecutive failed grasps before the heuristic grasp
  bool heuristic = true;  // consecutive-grasp limit of the mpg policy; baselines never use it
  std::uint64_t seed = 0;

  void validate() const;
};

struct EvalRun {
  int run = 0;
  int target_id = 0;
  bool success = false;
  int motions = 0;
  int grasps = 0;  // policy and heuristic grasps
  int target_grasps = 0;
  int moves = 0;
  int pushes = 0;
  int heuristic_grasps = 0;
  std::string actions;  // one letter per motion: m, g, p, h (heuristic grasp)
  bool operator==(const EvalRun&) const = default;
};

struct EvalReport {
  Policy policy = Policy::mpg;
  EvalScenario scenario;
  std::vector<EvalRun> runs;
  double task_success_rate = 0.0;
  std::optional<double> avg_motion_number;  // over successful runs only
  std::optional<double> grasp_success_rate;  // target grasps per grasp attempt
};

/// Scene for one evaluation run; every policy sees the same sequence.
WorldState eval_scene(const EvalScenario& scenario, int run);

/// Greedy grasp at the masked argmax of the grasp branch, no coordination.
Action baseline_grasp_only(const Observation& obs, const NetParams& params);

/// Runs the scenario. params may be null for the random policy only.
/// Parameters are read, never modified.
EvalReport evaluate(const NetParams* params, const EvalScenario& scenario, Policy policy);

/// Fills the aggregate fields from the per-run logs.
void summarize(EvalReport& report);

// Report file: '#' summary lines, then a CSV with one row per run.
inline constexpr const char* kEvalHeader =
    "run,target_id,success,motions,grasps,target_grasps,moves,pushes,heuristic_grasps,actions";
void write_report(std::ostream& out, const EvalReport& report);
/// Reads the per-run rows back (summary lines are skipped); policy and
/// aggregates are recomputed.
EvalReport read_report(std::istream& in);

/// Vector plot of the given CSV files. Training metrics files become
/// windowed grasp-success curves, one labeled polyline each; evaluation
/// reports become bars of task success and average motion number.
void plot_emit(const std::vector<std::string>& csv_paths, const std::string& out_path, int window = 200);
std::string plot_svg(const std::vector<std::pair<std::string, std::vector<MetricRow>>>& curves,
                     const std::vector<std::pair<std::string, EvalReport>>& reports, int window);

}  // namespace mpg
