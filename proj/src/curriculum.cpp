#include "mpg/curriculum.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace mpg {

namespace {
const char* kStageNames[kNumStages] = {"I", "II", "III", "IV", "V"};
}

const char* stage_name(int stage) {
  require(stage >= 1 && stage <= kNumStages, "stage out of range");
  return kStageNames[stage - 1];
}

int stage_from_name(const std::string& name) {
  for (int s = 1; s <= kNumStages; ++s)
    if (name == kStageNames[s - 1] || name == std::to_string(s)) return s;
  throw Error(ErrorKind::parse_error, "unknown stage '" + name + "'");
}

void StageConfig::validate() const {
  require(stage >= 1 && stage <= kNumStages, "stage config: stage out of range");
  require(n_objects >= 1 && n_objects <= 10, "stage config: objects must be in 1..10");
  require(max_moves > 0 && max_pushes > 0 && max_motions > 0 && grasp_limit > 0, "stage config: caps must be positive");
  require(iterations >= 0, "stage config: negative iterations");
  if (stage == 3 || stage == 5)
    require(mode == SpawnMode::stacked || mode == SpawnMode::mixed,
            std::string("stage ") + stage_name(stage) + " needs occluded placements (stacked or mixed)");
  if (stage == 3 || stage == 5) require(n_objects >= 2, "occluded stages need at least two objects");
}

void CoordinatorConfig::validate() const {
  require(0.0 <= epsilon_end && epsilon_end <= epsilon_start && epsilon_start <= 1.0,
          "coordinator: need 0 <= epsilon_end <= epsilon_start <= 1");
  require(q_star > 0.0, "coordinator: q_star must be positive");
  require(epsilon_decay_steps > 0, "coordinator: epsilon_decay_steps must be positive");
  require(gamma >= 0.0 && gamma < 1.0, "coordinator: gamma must lie in [0, 1)");
}

TrainConfig::TrainConfig() {
  const SpawnMode modes[kNumStages] = {SpawnMode::scattered, SpawnMode::scattered, SpawnMode::mixed,
                                       SpawnMode::adjacent, SpawnMode::mixed};
  const int objects[kNumStages] = {5, 5, 4, 4, 5};
  const int iterations[kNumStages] = {500, 500, 400, 400, 900};
  for (int s = 1; s <= kNumStages; ++s) {
    StageConfig& sc = stage(s);
    sc.stage = s;
    sc.mode = modes[s - 1];
    sc.n_objects = objects[s - 1];
    sc.iterations = iterations[s - 1];
  }
  arch.resolution = grid_resolution;
}

void TrainConfig::validate() const {
  grid().validate();
  arch.validate();
  require(arch.resolution == grid_resolution, "config: network resolution must equal the grid resolution");
  for (const StageConfig& sc : stages) sc.validate();
  coord.validate();
  require(adam.lr > 0.0 && adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
              adam.weight_decay >= 0.0,
          "config: bad optimizer settings");
  require(replay_capacity >= 0, "config: negative replay capacity");
  require(calibration_scenes >= 1, "config: calibration_scenes must be positive");
  require(window > 0, "config: window must be positive");
}

// ---------------------------------------------------------------------------
// Config file

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  int x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw Error(ErrorKind::parse_error, key + ": expected an integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  double x;
  if (!(is >> x) || !is.eof() || !std::isfinite(x))
    throw Error(ErrorKind::parse_error, key + ": expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorKind::parse_error, key + ": expected true or false, got '" + v + "'");
}

}  // namespace

void apply_config_line(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key.starts_with("stage") && key.size() > 7 && key[6] == '.') {
    const int s = key[5] - '0';
    if (s < 1 || s > kNumStages) throw Error(ErrorKind::parse_error, "unknown config key '" + key + "'");
    StageConfig& sc = cfg.stage(s);
    const std::string field = key.substr(7);
    if (field == "objects") sc.n_objects = to_int(key, value);
    else if (field == "mode") {
      try {
        sc.mode = spawn_mode_from_string(value);
      } catch (const Error&) {
        throw Error(ErrorKind::parse_error, key + ": unknown placement mode '" + value + "'");
      }
    } else if (field == "max_moves") sc.max_moves = to_int(key, value);
    else if (field == "max_pushes") sc.max_pushes = to_int(key, value);
    else if (field == "max_motions") sc.max_motions = to_int(key, value);
    else if (field == "grasp_limit") sc.grasp_limit = to_int(key, value);
    else if (field == "iterations") sc.iterations = to_int(key, value);
    else throw Error(ErrorKind::parse_error, "unknown config key '" + key + "'");
    return;
  }
  if (key == "grid_resolution") {
    cfg.grid_resolution = to_int(key, value);
    cfg.arch.resolution = cfg.grid_resolution;
  } else if (key == "arch.c1") cfg.arch.enc_channels[0] = to_int(key, value);
  else if (key == "arch.c2") cfg.arch.enc_channels[1] = to_int(key, value);
  else if (key == "arch.c3") cfg.arch.enc_channels[2] = to_int(key, value);
  else if (key == "arch.s1") cfg.arch.strides[0] = to_int(key, value);
  else if (key == "arch.s2") cfg.arch.strides[1] = to_int(key, value);
  else if (key == "arch.s3") cfg.arch.strides[2] = to_int(key, value);
  else if (key == "arch.head_hidden") cfg.arch.head_hidden = to_int(key, value);
  else if (key == "arch.interp") {
    if (value == "bilinear") cfg.arch.interp = Interp::bilinear;
    else if (value == "nearest") cfg.arch.interp = Interp::nearest;
    else throw Error(ErrorKind::parse_error, key + ": expected bilinear or nearest");
  } else if (key == "q_star") cfg.coord.q_star = to_double(key, value);
  else if (key == "move_q_threshold") cfg.coord.move_q_threshold = to_double(key, value);
  else if (key == "push_q_threshold") cfg.coord.push_q_threshold = to_double(key, value);
  else if (key == "epsilon_start") cfg.coord.epsilon_start = to_double(key, value);
  else if (key == "epsilon_end") cfg.coord.epsilon_end = to_double(key, value);
  else if (key == "epsilon_decay_steps") cfg.coord.epsilon_decay_steps = to_int(key, value);
  else if (key == "gamma") cfg.coord.gamma = to_double(key, value);
  else if (key == "adam.lr") cfg.adam.lr = to_double(key, value);
  else if (key == "adam.beta1") cfg.adam.beta1 = to_double(key, value);
  else if (key == "adam.beta2") cfg.adam.beta2 = to_double(key, value);
  else if (key == "adam.weight_decay") cfg.adam.weight_decay = to_double(key, value);
  else if (key == "replay_capacity") cfg.replay_capacity = to_int(key, value);
  else if (key == "calibrate_q_star") cfg.calibrate_q_star = to_bool(key, value);
  else if (key == "calibration_scenes") cfg.calibration_scenes = to_int(key, value);
  else if (key == "window") cfg.window = to_int(key, value);
  else throw Error(ErrorKind::parse_error, "unknown config key '" + key + "'");
}

TrainConfig parse_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::parse_error, "config line " + std::to_string(n) + ": expected key=value");
    try {
      apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(ErrorKind::parse_error, "config line " + std::to_string(n) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::parse_error, std::string("config: ") + e.what());
  }
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io_error, "cannot read config " + path);
  return parse_config(in);
}

void write_config(std::ostream& out, const TrainConfig& cfg) {
  out << "grid_resolution=" << cfg.grid_resolution << '\n';
  out << "arch.c1=" << cfg.arch.enc_channels[0] << "\narch.c2=" << cfg.arch.enc_channels[1]
      << "\narch.c3=" << cfg.arch.enc_channels[2] << "\narch.s1=" << cfg.arch.strides[0]
      << "\narch.s2=" << cfg.arch.strides[1] << "\narch.s3=" << cfg.arch.strides[2] << "\narch.head_hidden=" << cfg.arch.head_hidden
      << "\narch.interp=" << to_string(cfg.arch.interp) << '\n';
  for (const StageConfig& sc : cfg.stages) {
    const std::string p = "stage" + std::to_string(sc.stage) + ".";
    out << p << "objects=" << sc.n_objects << '\n'
        << p << "mode=" << to_string(sc.mode) << '\n'
        << p << "max_moves=" << sc.max_moves << '\n'
        << p << "max_pushes=" << sc.max_pushes << '\n'
        << p << "max_motions=" << sc.max_motions << '\n'
        << p << "grasp_limit=" << sc.grasp_limit << '\n'
        << p << "iterations=" << sc.iterations << '\n';
  }
  out << "q_star=" << format_number(cfg.coord.q_star) << '\n'
      << "move_q_threshold=" << format_number(cfg.coord.move_q_threshold) << '\n'
      << "push_q_threshold=" << format_number(cfg.coord.push_q_threshold) << '\n'
      << "epsilon_start=" << format_number(cfg.coord.epsilon_start) << '\n'
      << "epsilon_end=" << format_number(cfg.coord.epsilon_end) << '\n'
      << "epsilon_decay_steps=" << cfg.coord.epsilon_decay_steps << '\n'
      << "gamma=" << format_number(cfg.coord.gamma) << '\n'
      << "adam.lr=" << format_number(cfg.adam.lr) << '\n'
      << "adam.beta1=" << format_number(cfg.adam.beta1) << '\n'
      << "adam.beta2=" << format_number(cfg.adam.beta2) << '\n'
      << "adam.weight_decay=" << format_number(cfg.adam.weight_decay) << '\n'
      << "replay_capacity=" << cfg.replay_capacity << '\n'
      << "calibrate_q_star=" << (cfg.calibrate_q_star ? "true" : "false") << '\n'
      << "calibration_scenes=" << cfg.calibration_scenes << '\n'
      << "window=" << cfg.window << '\n';
}

// ---------------------------------------------------------------------------
// Policy pieces

double epsilon(int step, const CoordinatorConfig& cfg) {
  require(step >= 0, "epsilon: negative step");
  if (step >= cfg.epsilon_decay_steps) return cfg.epsilon_end;
  const double t = static_cast<double>(step) / cfg.epsilon_decay_steps;
  return cfg.epsilon_start + t * (cfg.epsilon_end - cfg.epsilon_start);
}

const char* to_string(TerminationReason reason) {
  switch (reason) {
    case TerminationReason::target_grasped: return "target-grasped";
    case TerminationReason::scene_empty: return "scene-empty";
    case TerminationReason::move_success: return "move-success";
    case TerminationReason::target_disturbed: return "target-disturbed";
    case TerminationReason::grasp_failed: return "grasp-failed";
    case TerminationReason::motion_cap: return "motion-cap";
    case TerminationReason::move_cap: return "move-cap";
    case TerminationReason::push_cap: return "push-cap";
    case TerminationReason::budget: return "budget";
  }
  return "?";
}

std::optional<ActionKind> choose_branch(int stage, bool occluded, double grasp_q, double q_star,
                                        const EpisodeCounters& counters, const StageConfig& sc) {
  switch (stage) {
    case 1:
    case 2: return ActionKind::grasp;
    case 3: return ActionKind::move;
    case 5:
      if (occluded && counters.moves < sc.max_moves) return ActionKind::move;
      [[fallthrough]];
    case 4:
      if (grasp_q > q_star) return ActionKind::grasp;
      if (counters.pushes < sc.max_pushes) return ActionKind::push;
      return std::nullopt;  // pushes used up and the target never looked graspable
  }
  throw Error(ErrorKind::contract_violation, "choose_branch: stage out of range");
}

Decision select_action(const QMaps& qmaps, const Observation& obs, bool occluded, int stage,
                       const EpisodeCounters& counters, const StageConfig& sc, double q_star, double eps, Rng& rng) {
  const Grid<std::uint8_t> rough = rough_mask(obs.goal_mask);
  Decision d;
  if (!qmaps[ActionKind::grasp].empty()) d.grasp_q = masked_max_q(qmaps[ActionKind::grasp], rough).value;
  const std::optional<ActionKind> branch = choose_branch(stage, occluded, d.grasp_q, q_star, counters, sc);
  if (!branch) {
    d.stop = true;
    return d;
  }
  const ActionKind kind = *branch;
  const RotationMaps& maps = qmaps[kind];
  d.explored = uniform01(rng) < eps || maps.empty();
  d.action.kind = kind;
  if (!maps.empty()) d.q_max = masked_max_q(maps, rough).value;
  if (d.explored) {
    std::vector<Pixel> cells;
    for (int r = 0; r < rough.rows; ++r)
      for (int c = 0; c < rough.cols; ++c)
        if (rough(r, c)) cells.push_back({r, c});
    d.action.pixel = cells[uniform_index(rng, cells.size())];
    d.action.rot_idx = static_cast<int>(uniform_index(rng, kRotations));
  } else {
    const MaskedMax best = masked_argmax(maps, rough);
    d.action.pixel = best.pixel;
    d.action.rot_idx = best.rot_idx;
  }
  return d;
}

Action heuristic_grasp(const Grid<std::uint8_t>& goal_mask) {
  double n = 0, sx = 0, sy = 0;
  for (int r = 0; r < goal_mask.rows; ++r)
    for (int c = 0; c < goal_mask.cols; ++c)
      if (goal_mask(r, c)) {
        n += 1;
        sx += c;
        sy += r;
      }
  if (n == 0) throw Error(ErrorKind::target_absent, "heuristic_grasp: empty goal mask");
  const double mx = sx / n, my = sy / n;
  double cxx = 0, cyy = 0, cxy = 0;
  for (int r = 0; r < goal_mask.rows; ++r)
    for (int c = 0; c < goal_mask.cols; ++c)
      if (goal_mask(r, c)) {
        cxx += (c - mx) * (c - mx);
        cyy += (r - my) * (r - my);
        cxy += (c - mx) * (r - my);
      }
  // Close the jaws across the long axis.
  const double axis = 0.5 * std::atan2(2.0 * cxy, cxx - cyy);
  const double closing = axis + 0.5 * std::numbers::pi;
  const double step = std::numbers::pi / 8.0;
  // Jaws are symmetric, so keep the index in the first half turn.
  const int half = kRotations / 2;
  int rot = static_cast<int>(std::lround(closing / step)) % half;
  if (rot < 0) rot += half;
  Action a;
  a.kind = ActionKind::grasp;
  a.rot_idx = rot;
  a.pixel = {std::clamp(static_cast<int>(std::lround(my)), 0, goal_mask.rows - 1),
             std::clamp(static_cast<int>(std::lround(mx)), 0, goal_mask.cols - 1)};
  return a;
}

void ReplayBuffer::add(Transition t) {
  if (capacity_ == 0 || t.reward <= 0.0) return;
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(t));
}

const Transition* ReplayBuffer::sample(ActionKind kind, Rng& rng) const {
  std::vector<const Transition*> pool;
  for (const Transition& t : items_)
    if (t.action.kind == kind) pool.push_back(&t);
  if (pool.empty()) return nullptr;
  return pool[uniform_index(rng, pool.size())];
}

// ---------------------------------------------------------------------------
// Scenes

WorldState stage_scene(const TrainConfig& cfg, int stage, int iteration, std::uint64_t seed) {
  const StageConfig& sc = cfg.stage(stage);
  const GridConfig grid = cfg.grid();
  int n = sc.n_objects;
  SpawnMode mode = sc.mode;
  if (stage == 3 && iteration < sc.iterations / 2) {
    // Simple occlusions first: one object stacked on another.
    n = 2;
    mode = SpawnMode::stacked;
  }
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const std::uint64_t sub = split_seed(seed, attempt);
    WorldState ws;
    try {
      ws = spawn_scene(grid, n, mode, sub);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::scene_infeasible) continue;
      throw;
    }
    if (stage == 1) return ws;
    std::vector<int> candidates;
    for (const SceneObject& o : ws.objects) {
      if (stage == 2) {
        candidates.push_back(o.id);
        continue;
      }
      WorldState probe = ws;
      probe.target_id = o.id;
      const bool occ = check_occlusion(probe, grid);
      if ((stage == 3 || stage == 5) == occ) candidates.push_back(o.id);
    }
    if (candidates.empty()) continue;
    Rng pick(split_seed(sub, 0x7a7));
    ws.target_id = candidates[uniform_index(pick, candidates.size())];
    return ws;
  }
  throw Error(ErrorKind::scene_infeasible, std::string("no suitable scene for stage ") + stage_name(stage));
}

// ---------------------------------------------------------------------------
// Episodes

namespace {

ActionKind stage_branch(int stage) {
  switch (stage) {
    case 1:
    case 2: return ActionKind::grasp;
    case 3: return ActionKind::move;
    case 4: return ActionKind::push;
  }
  throw Error(ErrorKind::contract_violation, "stage V trains one branch per episode; none given");
}

bool mask_empty(const Grid<std::uint8_t>& m) {
  return std::none_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; });
}

// Bootstrapped target with the live network: max over the rough mask of the
// same branch on the next state.
double bootstrap_target(const NetParams& params, const Observation& next, ActionKind kind, double reward,
                        bool terminal, double gamma, const QMaps* cached) {
  if (terminal || mask_empty(next.goal_mask)) return reward;
  const Grid<std::uint8_t> rough = rough_mask(next.goal_mask);
  if (cached && !(*cached)[kind].empty()) return td_target(reward, masked_argmax((*cached)[kind], rough).value, false, gamma);
  const QMaps q = forward(params, next, {kind});
  return td_target(reward, masked_argmax(q[kind], rough).value, false, gamma);
}

}  // namespace

ActionKind stage5_branch(int episode) {
  static constexpr ActionKind order[3] = {ActionKind::move, ActionKind::push, ActionKind::grasp};
  return order[episode % 3];
}

EpisodeLog run_episode(WorldState& world, NetParams& params, const TrainConfig& cfg, int stage, int episode,
                       StageRun& run, const EpisodeOptions& opts) {
  const StageConfig& sc = cfg.stage(stage);
  const GridConfig grid = cfg.grid();
  const MaskMode mask_mode = stage == 1 ? MaskMode::all_objects : MaskMode::target;
  const ActionKind trained = opts.trained_branch ? *opts.trained_branch
                             : (opts.train ? stage_branch(stage) : ActionKind::grasp);
  EpisodeLog log;
  log.stage = stage;
  log.episode = episode;
  EpisodeCounters ctr;
  double discount = 1.0;

  std::vector<ActionKind> needed;
  switch (stage) {
    case 1:
    case 2: needed = {ActionKind::grasp}; break;
    case 3: needed = {ActionKind::move, ActionKind::grasp}; break;
    case 4: needed = {ActionKind::grasp, ActionKind::push}; break;
    default: needed = {ActionKind::move, ActionKind::grasp, ActionKind::push};
  }

  for (;;) {
    if (stage == 1 && world.objects.empty()) {
      log.reason = TerminationReason::scene_empty;
      break;
    }
    if (stage != 1 && !world.target_present()) {
      log.reason = TerminationReason::target_grasped;
      break;
    }
    if (ctr.motions >= sc.max_motions) {
      log.reason = TerminationReason::motion_cap;
      break;
    }
    if (stage == 3 && ctr.moves >= sc.max_moves) {
      log.reason = TerminationReason::move_cap;
      break;
    }
    if (run.iteration >= opts.max_iterations) {
      log.reason = TerminationReason::budget;
      break;
    }

    const Observation obs = render(world, grid, mask_mode);
    const bool occluded = (stage == 3 || stage == 5) && check_occlusion(world, grid);
    if (stage == 3 && !occluded) {
      // A move shuffled the scene without earning the success flag.
      log.reason = TerminationReason::target_disturbed;
      break;
    }

    QMaps q;
    if (!opts.random_policy) q = forward(params, obs, needed);
    const double eps = opts.random_policy ? 1.0 : opts.fixed_epsilon.value_or(epsilon(run.iteration, cfg.coord));

    Decision d = select_action(q, obs, occluded, stage, ctr, sc, params.q_star, eps, run.rng);
    if (d.stop) {
      log.reason = TerminationReason::push_cap;
      break;
    }
    bool heuristic = false;
    if (opts.heuristic && stage != 1 && d.action.kind == ActionKind::grasp &&
        ctr.failed_grasps >= sc.grasp_limit) {
      d.action = heuristic_grasp(obs.goal_mask);
      d.explored = false;
      heuristic = true;
    }

    auto [next_world, outcome] = execute(world, d.action, grid);
    const Observation next_obs = render(next_world, grid, mask_mode);
    const bool changed = change_detected(obs.depth, next_obs.depth);
    const ActionKind kind = d.action.kind;
    const bool will_train = opts.train && !heuristic && kind == trained;

    // Next-state grasp values feed the move/push rewards; the bootstrap
    // reuses them when the trained branch is grasp.
    QMaps next_q;
    if (!opts.random_policy && kind != ActionKind::grasp && !mask_empty(next_obs.goal_mask)) {
      std::vector<ActionKind> want{ActionKind::grasp};
      if (will_train) want.push_back(kind);
      next_q = forward(params, next_obs, want);
    }

    double reward = 0.0;
    bool terminal = false;
    bool success = false;
    if (kind == ActionKind::grasp) {
      if (stage == 1) {
        reward = reward_grasp_agnostic(outcome);
        terminal = next_world.objects.empty();
      } else {
        reward = reward_grasp_target(outcome, world.target_id);
        terminal = reward == 1.0;
      }
      success = reward == 1.0;
    } else {
      RewardContext ctx;
      ctx.outcome = outcome;
      ctx.target_id = world.target_id;
      ctx.q_before = d.grasp_q;
      ctx.q_after = next_q[ActionKind::grasp].empty()
                        ? 0.0
                        : masked_max_q(next_q[ActionKind::grasp], rough_mask(next_obs.goal_mask)).value;
      ctx.occlusion_before = occluded;
      ctx.occlusion_after = next_world.target_present() && check_occlusion(next_world, grid);
      ctx.changed = changed;
      if (kind == ActionKind::move) {
        reward = reward_move(ctx, cfg.coord.move_q_threshold);
        success = move_success(ctx);
        terminal = stage == 3 && success;
      } else {
        reward = reward_push(ctx, cfg.coord.push_q_threshold);
        success = reward > 0.0;
      }
    }

    EpisodeStep st;
    st.action = d.action;
    st.heuristic = heuristic;
    st.explored = d.explored;
    st.reward = reward;
    st.q_max = d.q_max;
    st.epsilon = eps;
    st.success = success;
    st.changed = changed;

    if (will_train) {
      const double y = bootstrap_target(params, next_obs, kind, reward, terminal, cfg.coord.gamma, &next_q);
      st.loss = train_step(params, obs, d.action, y, cfg.adam).loss;
      st.trained = true;
      run.replay.add({obs, d.action, reward, next_obs, terminal});
      if (const Transition* t = run.replay.sample(kind, run.rng)) {
        const double ry = bootstrap_target(params, t->next, kind, t->reward, t->terminal, cfg.coord.gamma, nullptr);
        train_step(params, t->obs, t->action, ry, cfg.adam);
      }
    }

    log.steps.push_back(st);
    log.discounted_return += discount * reward;
    discount *= cfg.coord.gamma;

    ++ctr.motions;
    ++run.iteration;
    if (kind == ActionKind::move) ++ctr.moves;
    if (kind == ActionKind::push) ++ctr.pushes;
    if (kind == ActionKind::grasp && !heuristic && !success)
      ++ctr.failed_grasps;
    else
      ctr.failed_grasps = 0;

    world = std::move(next_world);
    if (kind == ActionKind::grasp && stage != 1 && success) log.target_grasped = true;

    if (stage == 3 && success) {
      log.reason = TerminationReason::move_success;
      break;
    }
    if (stage == 4 && kind == ActionKind::grasp) {
      log.reason = success ? TerminationReason::target_grasped : TerminationReason::grasp_failed;
      break;
    }
  }
  return log;
}

double fold_return(const EpisodeLog& log, double gamma) {
  double g = 0.0;
  for (auto it = log.steps.rbegin(); it != log.steps.rend(); ++it) g = it->reward + gamma * g;
  return g;
}

// ---------------------------------------------------------------------------
// Stages

void append_metric_rows(const EpisodeLog& log, int first_iteration, int window, std::vector<MetricRow>& rows) {
  int it = first_iteration;
  for (const EpisodeStep& s : log.steps) {
    MetricRow r;
    r.stage = log.stage;
    r.episode = log.episode;
    r.step = it;
    r.action_kind = s.heuristic ? "heuristic" : to_string(s.action.kind);
    r.reward = format_number(s.reward);
    r.loss = s.trained ? format_number(s.loss) : "";
    r.q_max = format_number(s.q_max);
    r.epsilon = format_number(s.epsilon);
    r.success = s.success ? "1" : "0";
    rows.push_back(std::move(r));
    ++it;
    if (it % window == 0) {
      // Summary over the last `window` action rows.
      std::vector<MetricRow> recent;
      for (auto p = rows.rbegin(); p != rows.rend() && static_cast<int>(recent.size()) < window; ++p)
        if (!is_summary(*p)) recent.push_back(*p);
      std::reverse(recent.begin(), recent.end());
      const auto rates = grasp_success_window(recent, window);
      MetricRow sum;
      sum.stage = log.stage;
      sum.episode = log.episode;
      sum.step = it - 1;
      sum.action_kind = "window=" + std::to_string(window);
      sum.success = !rates.empty() && rates.back() ? format_number(*rates.back()) : kGapMarker;
      rows.push_back(std::move(sum));
    }
  }
}

StageResult run_stage(NetParams& params, const TrainConfig& cfg, int stage, std::uint64_t seed, bool random_policy) {
  cfg.validate();
  require(stage >= 1 && stage <= kNumStages, "run_stage: stage out of range");
  require(params.arch == cfg.arch, "run_stage: network architecture differs from the config");
  if (!random_policy && params.completed_stage != stage - 1)
    throw Error(ErrorKind::stage_order, std::string("stage ") + stage_name(stage) + " needs a checkpoint from stage " +
                                            (stage > 1 ? stage_name(stage - 1) : "none") + ", got completed stage " +
                                            std::to_string(params.completed_stage));
  const StageConfig& sc = cfg.stage(stage);
  StageRun run{stage, 0, ReplayBuffer(static_cast<std::size_t>(cfg.replay_capacity)), Rng(split_seed(seed, 100 + stage))};
  const std::uint64_t scene_base = split_seed(seed, stage);

  StageResult result;
  int episode = 0;
  while (run.iteration < sc.iterations) {
    WorldState ws = stage_scene(cfg, stage, run.iteration, split_seed(scene_base, episode));
    EpisodeOptions opts;
    opts.train = !random_policy;
    opts.random_policy = random_policy;
    opts.max_iterations = sc.iterations;
    if (stage == 5) opts.trained_branch = stage5_branch(episode);
    const int first = run.iteration;
    EpisodeLog log = run_episode(ws, params, cfg, stage, episode, run, opts);
    append_metric_rows(log, first, cfg.window, result.rows);
    result.episodes.push_back(std::move(log));
    ++episode;
  }

  if (!random_policy) {
    params.completed_stage = stage;
    // Stage V keeps training the grasp branch, so the threshold is refreshed
    // after every stage from II on. A failed calibration keeps the previous one.
    if (stage == 2 || !cfg.calibrate_q_star) params.q_star = cfg.coord.q_star;
    if (stage >= 2) {
      result.note = "q_star fixed at " + format_number(params.q_star);
      if (cfg.calibrate_q_star) {
        try {
          const double q = calibrate_q_star(params, cfg, cfg.calibration_scenes, split_seed(seed, 0xCA1));
          params.q_star = q;
          result.calibrated_q_star = q;
          result.note = "q_star calibrated to " + format_number(q);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::calibration_insufficient) throw;
          result.note = std::string(e.what()) + "; keeping q_star " + format_number(params.q_star);
        }
      }
    }
  }
  return result;
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), "percentile: empty sample");
  require(q >= 0.0 && q <= 1.0, "percentile: q outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

double calibrate_q_star(const NetParams& params, const TrainConfig& cfg, int n_scenes, std::uint64_t seed) {
  require(n_scenes >= 1, "calibrate_q_star: need at least one scene");
  if (params.completed_stage < 2)
    throw Error(ErrorKind::stage_order, "calibration needs a checkpoint that finished stage II");
  const GridConfig grid = cfg.grid();
  std::vector<double> qs;
  for (int i = 0; i < n_scenes; ++i) {
    WorldState ws = stage_scene(cfg, 2, 0, split_seed(seed, static_cast<std::uint64_t>(i)));
    const Observation obs = render(ws, grid);
    const QMaps q = forward(params, obs, {ActionKind::grasp});
    const Grid<std::uint8_t> rough = rough_mask(obs.goal_mask);
    const MaskedMax best = masked_argmax(q[ActionKind::grasp], rough);
    const auto [next, outcome] = execute(ws, {ActionKind::grasp, best.pixel, best.rot_idx}, grid);
    if (reward_grasp_target(outcome, ws.target_id) == 1.0) qs.push_back(masked_max_q(q[ActionKind::grasp], rough).value);
  }
  if (qs.size() < 20)
    throw Error(ErrorKind::calibration_insufficient,
                "only " + std::to_string(qs.size()) + " successful grasps in " + std::to_string(n_scenes) + " scenes");
  return percentile(qs, 0.25);
}

}  // namespace mpg
