// Command-line front end: train, eval, calibrate, render, plot.
#include "CLI11.hpp"
#include "mpg/eval.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>

using namespace mpg;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::pair<int, int> parse_stage_range(const std::string& text) {
  const auto dash = text.find('-');
  try {
    if (dash == std::string::npos) {
      const int s = stage_from_name(text);
      return {s, s};
    }
    const int a = stage_from_name(text.substr(0, dash));
    const int b = stage_from_name(text.substr(dash + 1));
    if (a > b) throw UsageError("stage range '" + text + "' is not ordered");
    return {a, b};
  } catch (const Error&) {
    throw UsageError("bad stage range '" + text + "' (expected e.g. I-V or III)");
  }
}

TrainConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    apply_config_line(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& what, const auto& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io_error, "cannot write " + what + " " + path.string());
  writer(out);
  if (!out) throw Error(ErrorKind::io_error, "write failed: " + path.string());
}

fs::path stage_checkpoint(const fs::path& dir, int stage) {
  return dir / ("stage" + std::to_string(stage) + ".ckpt");
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, stages = "I-V", checkpoint;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a) {
  const TrainConfig cfg = build_config(a.config, a.overrides);
  const auto [first, last] = parse_stage_range(a.stages);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_file(dir / "config.cfg", "config", [&](std::ostream& o) { write_config(o, cfg); });

  NetParams params;
  if (first == 1) {
    params = init_params(cfg.arch, a.seed);
  } else {
    const fs::path in = a.checkpoint.empty() ? stage_checkpoint(dir, first - 1) : fs::path(a.checkpoint);
    if (!fs::exists(in))
      throw Error(ErrorKind::stage_order, std::string("stage ") + stage_name(first) + " needs the stage " +
                                              stage_name(first - 1) + " checkpoint " + in.string());
    params = load_checkpoint(in.string());
  }
  for (int s = first; s <= last; ++s) {
    std::cout << "stage " << stage_name(s) << ": " << cfg.stage(s).iterations << " iterations" << std::endl;
    const StageResult r = run_stage(params, cfg, s, a.seed);
    write_file(dir / ("stage" + std::to_string(s) + "_metrics.csv"), "metrics",
               [&](std::ostream& o) { write_metrics(o, r.rows); });
    save_checkpoint(stage_checkpoint(dir, s).string(), params);
    const auto recent = recent_grasp_success(r.rows, 100);
    std::cout << "  episodes " << r.episodes.size() << ", grasp success (last 100 attempts) "
              << (recent ? format_number(*recent) : std::string("n/a"));
    if (!r.note.empty()) std::cout << ", " << r.note;
    std::cout << std::endl;
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint, policy = "mpg", out, mode = "mixed";
  int objects = 5, runs = 50, grid = 0;
  bool any_target = false, no_heuristic = false;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  Policy policy;
  try {
    policy = policy_from_string(a.policy);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  EvalScenario sc;
  sc.n_objects = a.objects;
  sc.n_runs = a.runs;
  sc.target_range = std::min(5, a.objects);
  sc.occluded_target = !a.any_target;
  sc.heuristic = !a.no_heuristic;
  sc.seed = a.seed;
  try {
    sc.mode = spawn_mode_from_string(a.mode);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  std::optional<NetParams> params;
  if (!a.checkpoint.empty()) params = load_checkpoint(a.checkpoint);
  else if (policy != Policy::random) throw UsageError(std::string("--policy ") + a.policy + " needs --checkpoint");
  sc.grid_resolution = a.grid > 0 ? a.grid : params ? params->arch.resolution : 32;
  try {
    sc.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const EvalReport rep = evaluate(params ? &*params : nullptr, sc, policy);
  if (!a.out.empty()) {
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    write_file(a.out, "report", [&](std::ostream& o) { write_report(o, rep); });
  }
  std::cout << "policy " << to_string(policy) << ": task success " << format_number(rep.task_success_rate)
            << ", avg motions (successful runs) "
            << (rep.avg_motion_number ? format_number(*rep.avg_motion_number) : std::string("n/a"))
            << ", grasp success "
            << (rep.grasp_success_rate ? format_number(*rep.grasp_success_rate) : std::string("n/a")) << std::endl;
  return 0;
}

struct CalibrateArgs {
  std::string checkpoint, config, write;
  std::vector<std::string> overrides;
  int scenes = 60;
  std::uint64_t seed = 0;
};

int cmd_calibrate(const CalibrateArgs& a) {
  TrainConfig cfg = build_config(a.config, a.overrides);
  NetParams params = load_checkpoint(a.checkpoint);
  cfg.grid_resolution = params.arch.resolution;
  cfg.arch = params.arch;
  const double q = calibrate_q_star(params, cfg, a.scenes, a.seed);
  std::cout << "q_star " << format_number(q) << std::endl;
  if (!a.write.empty()) {
    params.q_star = q;
    save_checkpoint(a.write, params);
  }
  return 0;
}

struct RenderArgs {
  std::string mode = "mixed", out, checkpoint;
  int objects = 5, grid = 32;
  std::uint64_t seed = 0;
};

Grid<Rgb> heat(const Grid<double>& m, Pixel mark) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : m.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Grid<Rgb> img(m.rows, m.cols);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const double t = hi > lo ? (m.data[i] - lo) / (hi - lo) : 0.0;
    img.data[i] = Rgb{static_cast<std::uint8_t>(255 * t), static_cast<std::uint8_t>(255 * (1 - std::abs(2 * t - 1))),
                      static_cast<std::uint8_t>(255 * (1 - t))};
  }
  for (int d = -2; d <= 2; ++d) {
    if (img.inside(mark.row + d, mark.col)) img(mark.row + d, mark.col) = Rgb{255, 255, 255};
    if (img.inside(mark.row, mark.col + d)) img(mark.row, mark.col + d) = Rgb{255, 255, 255};
  }
  return img;
}

int cmd_render(const RenderArgs& a) {
  SpawnMode mode;
  try {
    mode = spawn_mode_from_string(a.mode);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const GridConfig grid = GridConfig::with_resolution(a.grid);
  grid.validate();
  WorldState ws = spawn_scene(grid, a.objects, mode, a.seed);
  // Prefer an occluded target when there is one, like the evaluation scenes.
  for (const SceneObject& o : ws.objects) {
    WorldState probe = ws;
    probe.target_id = o.id;
    if (check_occlusion(probe, grid)) {
      ws.target_id = o.id;
      break;
    }
  }
  const Observation obs = render(ws, grid);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_file(dir / "scene.txt", "scene", [&](std::ostream& o) { write_scene(o, ws, grid); });
  write_file(dir / "depth.pgm", "depth", [&](std::ostream& o) { write_depth_pgm(o, obs.depth); });
  write_file(dir / "color.ppm", "color", [&](std::ostream& o) { write_color_ppm(o, obs.color); });
  write_file(dir / "mask.pgm", "mask", [&](std::ostream& o) { write_mask_pgm(o, obs.goal_mask); });
  if (!a.checkpoint.empty()) {
    const NetParams p = load_checkpoint(a.checkpoint);
    if (p.arch.resolution != a.grid)
      throw Error(ErrorKind::contract_violation, "checkpoint resolution differs from --grid");
    const QMaps q = forward(p, obs);
    const Grid<std::uint8_t> rough = rough_mask(obs.goal_mask);
    for (ActionKind k : kAllKinds) {
      const MaskedMax best = masked_argmax(q[k], rough);
      write_file(dir / (std::string("q_") + to_string(k) + ".ppm"), "q map",
                 [&](std::ostream& o) { write_color_ppm(o, heat(q[k][best.rot_idx], best.pixel)); });
      std::cout << to_string(k) << ": max " << format_number(best.value) << " at (" << best.pixel.row << ", "
                << best.pixel.col << ") rotation " << best.rot_idx << std::endl;
    }
  }
  std::cout << "wrote " << dir.string() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Move/push/grasp Q-network training and evaluation"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "run training stages and write checkpoints and metrics");
  train->add_option("--seed", ta.seed, "run seed")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--config", ta.config, "key=value config file")->check(CLI::ExistingFile);
  train->add_option("--stages", ta.stages, "stage or range, e.g. I-V, III");
  train->add_option("--checkpoint", ta.checkpoint, "checkpoint to resume from (default: previous stage in --out)");
  train->add_option("--set", ta.overrides, "config override key=value (repeatable)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a policy on seeded scenes");
  eval->add_option("--seed", ea.seed, "scenario seed")->required();
  eval->add_option("--policy", ea.policy, "mpg, grasp-only or random");
  eval->add_option("--checkpoint", ea.checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--objects", ea.objects, "objects per scene");
  eval->add_option("--runs", ea.runs, "number of runs");
  eval->add_option("--mode", ea.mode, "placement mode");
  eval->add_option("--grid", ea.grid, "grid resolution (default: from the checkpoint)");
  eval->add_option("--out", ea.out, "report path");
  eval->add_flag("--any-target", ea.any_target, "do not require an occluded target");
  eval->add_flag("--no-heuristic", ea.no_heuristic, "disable the fallback grasp");

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "estimate the grasp threshold from a stage II checkpoint");
  cal->add_option("--checkpoint", ca.checkpoint, "checkpoint")->required()->check(CLI::ExistingFile);
  cal->add_option("--config", ca.config, "config file")->check(CLI::ExistingFile);
  cal->add_option("--set", ca.overrides, "config override key=value (repeatable)");
  cal->add_option("--scenes", ca.scenes, "calibration scenes");
  cal->add_option("--seed", ca.seed, "scene seed");
  cal->add_option("--write", ca.write, "write a copy of the checkpoint with the new threshold");

  RenderArgs ra;
  auto* rend = app.add_subcommand("render", "dump heightmaps and Q maps for a seeded scene");
  rend->add_option("--seed", ra.seed, "scene seed");
  rend->add_option("--mode", ra.mode, "placement mode");
  rend->add_option("--objects", ra.objects, "objects");
  rend->add_option("--grid", ra.grid, "grid resolution");
  rend->add_option("--out", ra.out, "output directory")->required();
  rend->add_option("--checkpoint", ra.checkpoint, "checkpoint for Q maps")->check(CLI::ExistingFile);

  std::vector<std::string> plot_inputs;
  std::string plot_out;
  int plot_window = 200;
  auto* plot = app.add_subcommand("plot", "SVG of metrics curves and evaluation reports");
  plot->add_option("inputs", plot_inputs, "metrics CSVs and/or evaluation reports")->required();
  plot->add_option("--out", plot_out, "SVG path")->required();
  plot->add_option("--window", plot_window, "window for success curves");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*cal) return cmd_calibrate(ca);
    if (*rend) return cmd_render(ra);
    if (*plot) {
      if (plot_window <= 0) throw UsageError("--window must be positive");
      plot_emit(plot_inputs, plot_out, plot_window);
      std::cout << "wrote " << plot_out << std::endl;
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
