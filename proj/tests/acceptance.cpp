// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any
// failure. Training criteria use the desk-scale config shipped in configs/.

#include "mpg/eval.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

using namespace mpg;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_s;
};

const Criterion kCriteria[] = {
    {1, "reward truth tables", 1},
    {2, "huber loss values and continuity", 1},
    {3, "gradient check on the toy net", 120},
    {4, "occlusion check vs brute-force oracle", 10},
    {5, "rotation consistency", 60},
    {6, "action heights and rotation codec", 1},
    {7, "stage I determinism", 1200},
    {8, "stage I beats random grasping 2x", 900},
    {9, "curriculum: mpg vs grasp-only", 7200},
    {10, "episode control rules", 10},
    {11, "discounted return identity", 1},
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

// Shared between criteria: every episode log produced, the Stage I net.
struct Shared {
  TrainConfig desk;
  std::vector<EpisodeLog> logs;
  std::optional<NetParams> stage1;
  std::uint64_t seed = 1;
  std::filesystem::path out;
};

// --- 1 -----------------------------------------------------------------

Verdict rewards_truth_tables() {
  int bad = 0, cases = 0;
  auto expect = [&](double got, double want) {
    ++cases;
    if (got != want) ++bad;
  };
  const int target = 7;
  const std::optional<int> grasped[] = {std::nullopt, 3, target};
  for (const auto& g : grasped) {
    ActionOutcome o;
    o.kind = ActionKind::grasp;
    o.grasped_id = g;
    expect(reward_grasp_agnostic(o), g ? 1.0 : 0.0);
    expect(reward_grasp_target(o, target), g == target ? 1.0 : 0.0);
  }
  // Improvement values straddle both thresholds, including the boundaries.
  const double improvements[] = {-0.4, 0.0, 0.05, 0.1, 0.3, 0.5, 0.6};
  for (const auto& g : grasped)
    for (double qi : improvements)
      for (int bits = 0; bits < 8; ++bits) {
        RewardContext c;
        c.outcome.kind = ActionKind::move;
        c.outcome.grasped_id = g;
        c.target_id = target;
        c.q_before = 0.25;
        c.q_after = 0.25 + qi;
        c.occlusion_before = bits & 1;
        c.occlusion_after = bits & 2;
        c.changed = bits & 4;
        const bool took = g == target;
        const double delta = c.q_after - c.q_before;
        double want;
        if (c.occlusion_before && !c.occlusion_after && !took) want = 1.0;
        else if (delta > 0.5 && c.changed) want = 0.5;
        else if (took || !c.changed) want = -0.5;
        else want = 0.0;
        expect(reward_move(c), want);
        expect(move_success(c), c.occlusion_before && !c.occlusion_after && !took);
        if (g) continue;
        c.outcome.kind = ActionKind::push;
        want = delta > 0.1 && c.changed ? 0.5 : (!c.changed ? -0.5 : 0.0);
        expect(reward_push(c), want);
      }
  return {bad == 0, std::to_string(cases) + " cases, " + std::to_string(bad) + " mismatches"};
}

// --- 2 -----------------------------------------------------------------

Verdict huber_values() {
  const std::pair<double, double> table[] = {{0, 0}, {0.5, 0.125}, {1, 0.5}, {2, 1.5}};
  bool ok = true;
  std::string d;
  for (auto [x, want] : table) {
    ok = ok && huber(x) == want;
    d += fmt(huber(x)) + " ";
  }
  const double jump = std::max(std::abs(huber(1.0) - huber(std::nextafter(1.0, 0.0))),
                               std::abs(huber(std::nextafter(1.0, 2.0)) - huber(1.0)));
  ok = ok && jump < 1e-12;
  return {ok, "values " + d + "jump at 1: " + fmt(jump)};
}

// --- 3 -----------------------------------------------------------------

Observation random_obs(int side, std::uint64_t seed) {
  Rng rng(seed);
  Observation o{Grid<Rgb>(side, side), Grid<double>(side, side, 0.0), Grid<std::uint8_t>(side, side, 0)};
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      if (uniform01(rng) < 0.5) continue;
      o.depth(r, c) = uniform(rng, 0.02, 0.1);
      o.color(r, c) = kPalette[uniform_index(rng, kPalette.size())];
      o.goal_mask(r, c) = uniform01(rng) < 0.5;
    }
  return o;
}

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Verdict gradient_check() {
  ArchConfig arch;
  arch.resolution = 8;
  arch.enc_channels = {2, 3, 4};
  arch.head_hidden = 4;
  NetParams p = init_params(arch, 77);
  // Biases and batch-norm affine terms off their initial values, so every
  // tensor carries gradient and no ReLU input sits within a step of zero.
  Rng rng(1);
  for (Tensor& t : p.tensors)
    if (t.name.ends_with(".b"))
      for (double& x : t.value) x = uniform(rng, -0.2, 0.2);
  for (int b = 0; b < 3; ++b)
    for (int k = 0; k < 2; ++k)
      for (double& x : p.tensors[NetParams::bn(b) + k].value) x = uniform(rng, 0.5, 1.5) * (k == 0 ? 1.0 : 0.3);
  const Observation obs = random_obs(8, 5);
  const double h = 1e-4;
  double worst = 0.0;
  std::string worst_name;
  std::set<std::size_t> covered;
  for (ActionKind kind : kAllKinds)
    for (double target : {0.3, 4.0}) {
      const Action act{kind, {3, 5}, 6};
      Gradients g;
      loss_and_gradients(p, obs, act, target, g);
      for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        if (g.per_tensor[i].empty()) continue;
        covered.insert(i);
        std::vector<double> diff(p.tensors[i].size()), num(diff.size());
        for (std::size_t j = 0; j < num.size(); ++j) {
          const double keep = p.tensors[i].value[j];
          p.tensors[i].value[j] = keep + h;
          const double up = training_loss(p, obs, act, target).loss;
          p.tensors[i].value[j] = keep - h;
          const double dn = training_loss(p, obs, act, target).loss;
          p.tensors[i].value[j] = keep;
          num[j] = (up - dn) / (2 * h);
          diff[j] = num[j] - g.per_tensor[i][j];
        }
        const double scale = std::max(norm2(num), norm2(g.per_tensor[i]));
        const double rel = scale < 1e-12 ? 0.0 : norm2(diff) / scale;
        if (rel > worst) {
          worst = rel;
          worst_name = p.tensors[i].name;
        }
      }
    }
  std::size_t trainable = 0;
  for (const Tensor& t : p.tensors) trainable += t.trainable;
  const bool all = covered.size() == trainable;
  return {all && worst < 1e-3, std::to_string(covered.size()) + "/" + std::to_string(trainable) +
                                   " tensors, worst relative error " + fmt(worst) + " (" + worst_name + ")"};
}

// --- 4 -----------------------------------------------------------------

// Crossing-number containment, independent of the library's polygon code.
bool covers(const Polygon& poly, Vec2 p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 a = poly[i], b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

bool oracle_occluded(const WorldState& ws, const GridConfig& cfg) {
  const SceneObject* target = ws.find(ws.target_id);
  const Polygon tfp = target->world_footprint();
  for (int r = 0; r < cfg.resolution; ++r)
    for (int c = 0; c < cfg.resolution; ++c) {
      const Vec2 p{(c + 0.5) * cfg.cell_size(), (r + 0.5) * cfg.cell_size()};
      if (!covers(tfp, p)) continue;
      for (const SceneObject& o : ws.objects)
        if (o.id != target->id && covers(o.world_footprint(), p) && o.top() > target->top() + kOcclusionTolerance)
          return true;
    }
  return false;
}

Verdict occlusion_oracle() {
  const GridConfig grid = GridConfig::with_resolution(32);
  const SpawnMode modes[] = {SpawnMode::mixed, SpawnMode::stacked, SpawnMode::adjacent, SpawnMode::scattered};
  int agree = 0, occluded = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const int n = 2 + static_cast<int>(seed % 5);
    WorldState ws = spawn_scene(grid, n, modes[seed % 4], seed);
    ws.target_id = ws.objects[seed % ws.objects.size()].id;
    const bool lib = check_occlusion(ws, grid);
    agree += lib == oracle_occluded(ws, grid);
    occluded += lib;
  }
  return {agree == 200, std::to_string(agree) + "/200 agree, " + std::to_string(occluded) + " occluded"};
}

// --- 5 -----------------------------------------------------------------

double rotation_deviation(const NetParams& p, int n_obs, std::uint64_t seed) {
  const int side = p.arch.resolution;
  const GridConfig grid = GridConfig::with_resolution(side);
  const Interp interp = p.arch.interp;
  double worst = 0.0;
  for (int i = 0; i < n_obs; ++i) {
    WorldState ws = spawn_scene(grid, 4, SpawnMode::mixed, split_seed(seed, i));
    ws.target_id = ws.objects[i % ws.objects.size()].id;
    const NetInput in = make_net_input(render(ws, grid));
    const QMaps q = forward(p, in);
    for (int k = 0; k < kRotations; ++k) {
      const double a = rot_index_to_angle(k);
      NetInput turned = in;
      turned.color = rotate_image(in.color, 3, side, -a, interp);
      turned.depth = rotate_image(in.depth, 1, side, -a, interp);
      turned.goal = rotate_image(in.goal, 1, side, -a, interp);
      const QMaps base = forward(p, turned);
      for (ActionKind kind : kAllKinds) {
        const auto back = rotate_image(base[kind][0].data, 1, side, a, interp);
        for (int r = 4; r < side - 4; ++r)
          for (int c = 4; c < side - 4; ++c)
            worst = std::max(worst, std::abs(q[kind][k](r, c) - back[r * side + c]));
      }
    }
  }
  return worst;
}

Verdict rotation_consistency(Shared& sh) {
  ArchConfig nn;
  nn.interp = Interp::nearest;
  const double untrained = rotation_deviation(init_params(nn, 5), 10, 300);
  if (!sh.stage1) return {false, "no Stage I net (criterion 8 did not run); untrained nearest " + fmt(untrained)};
  const double trained = rotation_deviation(*sh.stage1, 10, 400);
  return {trained < 0.05 && untrained < 1e-6,
          "trained (" + std::string(to_string(sh.stage1->arch.interp)) + ") " + fmt(trained) +
              ", untrained nearest " + fmt(untrained)};
}

// --- 6 -----------------------------------------------------------------

Verdict action_geometry() {
  int bad = 0;
  // Heights on a rendered depth map: every cell, all three primitives.
  const GridConfig grid = GridConfig::with_resolution(32);
  WorldState ws = spawn_scene(grid, 5, SpawnMode::mixed, 3);
  const Grid<double> depth = render(ws, grid).depth;
  for (int r = 0; r < depth.rows; ++r)
    for (int c = 0; c < depth.cols; ++c) {
      const double h = surface_height(depth, {r, c});
      bad += action_height(depth, {r, c}, ActionKind::grasp) != std::max(h - 0.04, 0.0);
      bad += action_height(depth, {r, c}, ActionKind::move) != std::max(h - 0.04, 0.0);
      bad += action_height(depth, {r, c}, ActionKind::push) != (h > 0.0 ? h - 0.01 : 0.02);
    }
  for (double h : {0.0, 0.01, 0.04, 0.05, 0.1}) {
    bad += height_rule(h, ActionKind::grasp) != std::max(h - 0.04, 0.0);
    bad += height_rule(h, ActionKind::push) != (h > 0.0 ? h - 0.01 : 0.02);
  }
  std::set<double> angles;
  for (int k = 0; k < kRotations; ++k) {
    const double a = rot_index_to_angle(k);
    angles.insert(a);
    bad += a != k * (std::numbers::pi / 8.0);
    bad += std::abs(a * 180.0 / std::numbers::pi - 22.5 * k) > 1e-12;
  }
  bad += angles.size() != 16;
  return {bad == 0, std::to_string(angles.size()) + " distinct angles, " + std::to_string(bad) + " mismatches"};
}

// --- 7, 8 --------------------------------------------------------------

std::string csv_text(const std::vector<MetricRow>& rows) {
  std::ostringstream s;
  write_metrics(s, rows);
  return s.str();
}

std::string ckpt_bytes(const NetParams& p) {
  std::ostringstream s;
  save_checkpoint(s, p);
  return s.str();
}

Verdict determinism(Shared& sh) {
  TrainConfig cfg = sh.desk;
  cfg.stage(1).n_objects = 3;
  cfg.stage(1).iterations = 300;
  std::string ck[2], csv[2];
  for (int i = 0; i < 2; ++i) {
    NetParams p = init_params(cfg.arch, sh.seed);
    StageResult r = run_stage(p, cfg, 1, sh.seed);
    ck[i] = ckpt_bytes(p);
    csv[i] = csv_text(r.rows);
    const auto dir = sh.out / ("determinism_" + std::to_string(i));
    std::filesystem::create_directories(dir);
    save_checkpoint((dir / "stage1.ckpt").string(), p);
    std::ofstream(dir / "stage1_metrics.csv") << csv[i];
    for (EpisodeLog& l : r.episodes) sh.logs.push_back(std::move(l));
  }
  const bool ok = ck[0] == ck[1] && csv[0] == csv[1];
  return {ok, std::to_string(ck[0].size()) + " checkpoint bytes, " + std::to_string(csv[0].size()) + " CSV bytes, " +
                  (ok ? "identical" : "different")};
}

Verdict stage1_vs_random(Shared& sh) {
  TrainConfig cfg = sh.desk;
  cfg.stage(1).n_objects = 3;
  cfg.stage(1).iterations = 500;
  NetParams p = init_params(cfg.arch, sh.seed);
  StageResult learned = run_stage(p, cfg, 1, sh.seed);
  NetParams unused = init_params(cfg.arch, sh.seed);
  const StageResult random = run_stage(unused, cfg, 1, sh.seed, true);
  const auto a = recent_grasp_success(learned.rows, 100);
  const auto b = recent_grasp_success(random.rows, 100);
  std::ofstream(sh.out / "stage1_metrics.csv") << csv_text(learned.rows);
  std::ofstream(sh.out / "stage1_random_metrics.csv") << csv_text(random.rows);
  save_checkpoint((sh.out / "stage1.ckpt").string(), p);
  sh.stage1 = p;
  for (const EpisodeLog& l : learned.episodes) sh.logs.push_back(l);
  if (!a || !b) return {false, "no grasp attempts"};
  return {*a >= 2.0 * *b, "trained " + fmt(*a) + " vs random " + fmt(*b) + " over the last 100 attempts"};
}

// --- 9 -----------------------------------------------------------------

Verdict curriculum(Shared& sh) {
  const TrainConfig& cfg = sh.desk;
  NetParams p = init_params(cfg.arch, sh.seed);
  std::string notes;
  for (int s = 1; s <= kNumStages; ++s) {
    StageResult r = run_stage(p, cfg, s, sh.seed);
    std::ofstream(sh.out / ("curriculum_stage" + std::to_string(s) + "_metrics.csv")) << csv_text(r.rows);
    if (!r.note.empty()) std::cerr << "  stage " << s << ": " << r.note << '\n';
    for (EpisodeLog& l : r.episodes) sh.logs.push_back(std::move(l));
  }
  save_checkpoint((sh.out / "curriculum_stage5.ckpt").string(), p);
  EvalScenario sc;
  sc.seed = 1234;
  const EvalReport mpg = evaluate(&p, sc, Policy::mpg);
  const EvalReport base = evaluate(&p, sc, Policy::grasp_only);
  for (const EvalReport* r : {&mpg, &base}) {
    std::ofstream out(sh.out / (std::string("eval_") + to_string(r->policy) + ".csv"));
    write_report(out, *r);
  }
  const double gap = mpg.task_success_rate - base.task_success_rate;
  const bool fewer = mpg.avg_motion_number && base.avg_motion_number && *mpg.avg_motion_number < *base.avg_motion_number;
  auto motions = [](const EvalReport& r) { return r.avg_motion_number ? fmt(*r.avg_motion_number) : std::string("n/a"); };
  return {gap >= 0.15 - 1e-12 && fewer, "success mpg " + fmt(mpg.task_success_rate) + " vs grasp-only " +
                                            fmt(base.task_success_rate) + ", motions " + motions(mpg) + " vs " +
                                            motions(base)};
}

// --- 10 ----------------------------------------------------------------

// Replays the counters of a log independently of the trainer.
bool episode_rules_hold(const EpisodeLog& log, const StageConfig& sc, int& heuristics, std::string& why) {
  int moves = 0, pushes = 0, failed = 0;
  if (static_cast<int>(log.steps.size()) > sc.max_motions) why = "motion cap";
  for (const EpisodeStep& s : log.steps) {
    const bool due = s.action.kind == ActionKind::grasp && failed >= sc.grasp_limit;
    if (s.heuristic != due) why = "heuristic grasp out of turn";
    heuristics += s.heuristic;
    if (s.action.kind == ActionKind::grasp && !s.heuristic && !s.success)
      ++failed;
    else
      failed = 0;
    moves += s.action.kind == ActionKind::move;
    pushes += s.action.kind == ActionKind::push;
  }
  if (moves > sc.max_moves || pushes > sc.max_pushes) why = "move/push cap";
  return why.empty();
}

Verdict episode_control(Shared& sh) {
  TrainConfig cfg;
  cfg.arch.enc_channels = {4, 4, 8};
  cfg.arch.head_hidden = 8;
  NetParams net = init_params(cfg.arch, 4);
  net.completed_stage = 4;
  net.q_star = 0.0;  // an untrained net then grasps whenever it is not moving
  int episodes = 0, heuristics = 0, violations = 0;
  std::string why;
  for (int stage = 2; stage <= kNumStages; ++stage)
    for (int e = 0; e < 40; ++e) {
      const bool learned = e % 2 == 1;
      WorldState ws = stage_scene(cfg, stage, 1000, split_seed(77, 100 * stage + e));
      StageRun run{stage, 0, ReplayBuffer(0), Rng(e)};
      EpisodeOptions opts;
      opts.train = false;
      opts.random_policy = !learned;
      opts.fixed_epsilon = 0.0;
      const EpisodeLog log = run_episode(ws, net, cfg, stage, e, run, opts);
      std::string w;
      if (!episode_rules_hold(log, cfg.stage(stage), heuristics, w)) {
        ++violations;
        why = w;
      }
      ++episodes;
      sh.logs.push_back(log);
    }
  // Evaluation runs obey the same caps.
  EvalScenario sc;
  sc.n_runs = 10;
  sc.seed = 5;
  for (Policy pol : {Policy::random, Policy::mpg}) {
    const EvalReport r = evaluate(pol == Policy::random ? nullptr : &net, sc, pol);
    for (const EvalRun& run : r.runs) {
      ++episodes;
      if (run.motions > 10 || run.moves > 5 || run.pushes > 5) {
        ++violations;
        why = "eval caps";
      }
    }
  }
  const bool ok = violations == 0 && heuristics > 0;
  return {ok, std::to_string(episodes) + " episodes, " + std::to_string(heuristics) + " heuristic grasps, " +
                  std::to_string(violations) + " violations" + (why.empty() ? "" : " (" + why + ")")};
}

// --- 11 ----------------------------------------------------------------

Verdict return_identity(const Shared& sh) {
  double worst = 0.0;
  for (const EpisodeLog& l : sh.logs) worst = std::max(worst, std::abs(l.discounted_return - fold_return(l, sh.desk.coord.gamma)));
  return {!sh.logs.empty() && worst <= 1e-9,
          std::to_string(sh.logs.size()) + " episodes, max difference " + fmt(worst)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string config = MPG_DESK_CONFIG;
  std::string out = "acceptance_out";
  std::uint64_t seed = 1;
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--config", config, "training config for criteria 7-9");
  app.add_option("--out", out, "directory for checkpoints, metrics and reports");
  app.add_option("--seed", seed, "training seed");
  CLI11_PARSE(app, argc, argv);

  Shared sh;
  try {
    sh.desk = load_config(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  sh.seed = seed;
  sh.out = out;
  std::filesystem::create_directories(sh.out);

  const std::map<int, std::function<Verdict()>> checks = {
      {1, rewards_truth_tables},
      {2, huber_values},
      {3, gradient_check},
      {4, occlusion_oracle},
      {5, [&] { return rotation_consistency(sh); }},
      {6, action_geometry},
      {7, [&] { return determinism(sh); }},
      {8, [&] { return stage1_vs_random(sh); }},
      {9, [&] { return curriculum(sh); }},
      {10, [&] { return episode_control(sh); }},
      {11, [&] { return return_identity(sh); }},
  };
  // Criterion 5 reuses the Stage I net from 8, and 11 checks every log.
  const int order[] = {1, 2, 3, 4, 6, 10, 8, 5, 7, 9, 11};
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  if (!only.empty() && wanted(5) && !wanted(8)) only.push_back(8);

  std::map<int, std::string> lines;
  bool all = true;
  for (int id : order) {
    const Criterion& c = kCriteria[id - 1];
    if (!wanted(id)) continue;
    std::cerr << "running " << id << ": " << c.name << std::endl;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = checks.at(id)();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (secs > c.limit_s) {
      v.pass = false;
      v.detail += "; over the " + fmt(c.limit_s) + " s budget";
    }
    all = all && v.pass;
    std::ostringstream line;
    line << (v.pass ? "PASS" : "FAIL") << "  " << id << ". " << c.name << ": " << v.detail << " [" << fmt(secs) << " s]";
    lines[id] = line.str();
    std::cerr << "  " << line.str() << std::endl;
  }
  for (const auto& [id, line] : lines) std::cout << line << '\n';
  std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
