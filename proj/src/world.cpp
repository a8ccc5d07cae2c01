#include "mpg/world.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace mpg {

const std::array<Rgb, 10> kPalette{{
    {78, 121, 167}, {89, 161, 79}, {156, 117, 95}, {242, 142, 43}, {237, 201, 72},
    {186, 176, 172}, {225, 87, 89}, {175, 122, 161}, {118, 183, 178}, {255, 157, 167},
}};

namespace {

constexpr double kPoseTolerance = 1e-9;
constexpr int kPlacementAttempts = 500;
constexpr double kStackedMinHeight = 0.04;

double polygon_distance(const Polygon& a, const Polygon& b) {
  if (overlaps(a, b, 0.0)) return 0.0;
  double d = std::numeric_limits<double>::infinity();
  for (const Vec2& v : a) d = std::min(d, distance_to_point(b, v));
  for (const Vec2& v : b) d = std::min(d, distance_to_point(a, v));
  return d;
}

bool rests_on(const SceneObject& upper, const SceneObject& lower) {
  return std::abs(upper.pose.z - lower.top()) < 1e-6 && overlaps(upper.world_footprint(), lower.world_footprint());
}

SceneObject random_object(Rng& rng, const GridConfig& cfg, int id, double min_height) {
  const double cs = cfg.cell_size();
  SceneObject o;
  o.id = id;
  if (uniform01(rng) < 0.6) {
    const double w = uniform(rng, 3.0, 8.0) * cs;
    const double l = uniform(rng, 3.0, 8.0) * cs;
    o.footprint = make_box(w, l);
  } else {
    constexpr std::array<int, 3> sides{5, 6, 8};
    const int k = sides[uniform_index(rng, sides.size())];
    o.footprint = make_regular(k, 0.5 * uniform(rng, 3.0, 8.0) * cs);
  }
  o.height = std::round(uniform(rng, min_height, 0.06) * 1000.0) / 1000.0;
  o.color_id = static_cast<int>(uniform_index(rng, kPalette.size()));
  o.pose.yaw = uniform(rng, 0.0, std::numbers::pi);
  return o;
}

void place_at(SceneObject& o, Vec2 p, double z) {
  o.pose.x = p.x;
  o.pose.y = p.y;
  o.pose.z = z;
}

Vec2 sample_inside(Rng& rng, const Polygon& poly) {
  Interval xs = project(poly, {1, 0});
  Interval ys = project(poly, {0, 1});
  for (;;) {
    const Vec2 p{uniform(rng, xs.lo, xs.hi), uniform(rng, ys.lo, ys.hi)};
    if (contains(poly, p)) return p;
  }
}

bool clear_of(const SceneObject& o, const std::vector<SceneObject>& others, double clearance) {
  const Polygon fp = o.world_footprint();
  for (const SceneObject& other : others)
    if (polygon_distance(fp, other.world_footprint()) < clearance) return false;
  return true;
}

void add_scattered(WorldState& ws, Rng& rng, const GridConfig& cfg, int id) {
  const double cs = cfg.cell_size();
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    SceneObject o = random_object(rng, cfg, id, 0.02);
    const double r = circumradius(o.footprint, {});
    if (2.0 * r >= cfg.extent) continue;
    place_at(o, {uniform(rng, r, cfg.extent - r), uniform(rng, r, cfg.extent - r)}, 0.0);
    if (!inside_workspace(o, cfg) || !clear_of(o, ws.objects, 2.0 * cs)) continue;
    ws.objects.push_back(std::move(o));
    return;
  }
  throw Error(ErrorKind::scene_infeasible, "could not place object " + std::to_string(id) + " with clearance");
}

void add_free(WorldState& ws, Rng& rng, const GridConfig& cfg, int id) {
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    SceneObject o = random_object(rng, cfg, id, 0.02);
    const double r = circumradius(o.footprint, {});
    place_at(o, {uniform(rng, r, cfg.extent - r), uniform(rng, r, cfg.extent - r)}, 0.0);
    if (inside_workspace(o, cfg) && clear_of(o, ws.objects, 1e-9)) {
      ws.objects.push_back(std::move(o));
      return;
    }
  }
  throw Error(ErrorKind::scene_infeasible, "no free space for object " + std::to_string(id));
}

void add_near_center(WorldState& ws, Rng& rng, const GridConfig& cfg, int id) {
  const double lo = 0.3 * cfg.extent;
  const double hi = 0.7 * cfg.extent;
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    SceneObject o = random_object(rng, cfg, id, 0.02);
    place_at(o, {uniform(rng, lo, hi), uniform(rng, lo, hi)}, 0.0);
    if (inside_workspace(o, cfg) && clear_of(o, ws.objects, 1e-9)) {
      ws.objects.push_back(std::move(o));
      return;
    }
  }
  throw Error(ErrorKind::scene_infeasible, "could not place seed object");
}

// Places a new object within one cell of an existing table-level object.
bool try_add_adjacent(WorldState& ws, Rng& rng, const GridConfig& cfg, int id) {
  const double cs = cfg.cell_size();
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < ws.objects.size(); ++i)
    if (ws.objects[i].pose.z == 0.0) anchors.push_back(i);
  if (anchors.empty()) return false;
  const SceneObject& anchor = ws.objects[anchors[uniform_index(rng, anchors.size())]];
  const Polygon anchor_fp = anchor.world_footprint();
  SceneObject o = random_object(rng, cfg, id, 0.02);
  const Vec2 dir = unit(uniform(rng, 0.0, 2.0 * std::numbers::pi));
  const Vec2 anchor_center{anchor.pose.x, anchor.pose.y};
  const Vec2 start = anchor_center + dir * (circumradius(anchor_fp, anchor_center) + circumradius(o.footprint, {}) + 2 * cs);
  place_at(o, start, 0.0);
  const auto contact = sweep_contact(o.world_footprint(), anchor_fp, dir * -1.0);
  if (!contact) return false;
  const double gap = uniform(rng, 0.0, cs);
  place_at(o, start - dir * std::max(*contact - gap, 0.0), 0.0);
  if (!inside_workspace(o, cfg) || !clear_of(o, ws.objects, 1e-9)) return false;
  ws.objects.push_back(std::move(o));
  return true;
}

void add_adjacent(WorldState& ws, Rng& rng, const GridConfig& cfg, int id) {
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt)
    if (try_add_adjacent(ws, rng, cfg, id)) return;
  throw Error(ErrorKind::scene_infeasible, "could not place object " + std::to_string(id) + " adjacently");
}

// Drops a new object over `support`; its centroid must rest on the highest
// surface it overlaps.
bool try_drop_on(WorldState& ws, Rng& rng, const GridConfig& cfg, int id, std::size_t support) {
  SceneObject o = random_object(rng, cfg, id, kStackedMinHeight);
  const Polygon support_fp = ws.objects[support].world_footprint();
  place_at(o, sample_inside(rng, support_fp), 0.0);
  if (!inside_workspace(o, cfg)) return false;
  const Polygon fp = o.world_footprint();
  double z = 0.0;
  std::size_t highest = ws.objects.size();
  for (std::size_t i = 0; i < ws.objects.size(); ++i) {
    if (!overlaps(fp, ws.objects[i].world_footprint())) continue;
    if (highest == ws.objects.size() || ws.objects[i].top() > z) {
      z = ws.objects[i].top();
      highest = i;
    }
  }
  if (highest == ws.objects.size() || z + o.height > kMaxObjectTop) return false;
  if (!contains(ws.objects[highest].world_footprint(), {o.pose.x, o.pose.y})) return false;
  o.pose.z = z;
  ws.objects.push_back(std::move(o));
  return true;
}

void add_occluder(WorldState& ws, Rng& rng, const GridConfig& cfg, int id) {
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    if (!try_drop_on(ws, rng, cfg, id, 0)) continue;
    if (check_occlusion(ws, cfg)) return;
    ws.objects.pop_back();
  }
  throw Error(ErrorKind::scene_infeasible, "could not stack an occluder on the target");
}

std::vector<int> displaced_between(const WorldState& before, const WorldState& after) {
  std::vector<int> ids;
  for (const SceneObject& o : after.objects) {
    const SceneObject* prev = before.find(o.id);
    if (prev == nullptr) continue;
    const Pose& a = prev->pose;
    const Pose& b = o.pose;
    if (std::abs(a.x - b.x) > kPoseTolerance || std::abs(a.y - b.y) > kPoseTolerance ||
        std::abs(a.z - b.z) > kPoseTolerance || std::abs(a.yaw - b.yaw) > kPoseTolerance)
      ids.push_back(o.id);
  }
  return ids;
}

Grid<double> depth_only(const WorldState& ws, const GridConfig& cfg) {
  return render(ws, cfg).depth;
}

double boundary_travel(const Polygon& fp, Vec2 dir, double extent) {
  double travel = std::numeric_limits<double>::infinity();
  for (const Vec2& p : fp) {
    if (dir.x > 1e-12) travel = std::min(travel, (extent - p.x) / dir.x);
    if (dir.x < -1e-12) travel = std::min(travel, -p.x / dir.x);
    if (dir.y > 1e-12) travel = std::min(travel, (extent - p.y) / dir.y);
    if (dir.y < -1e-12) travel = std::min(travel, -p.y / dir.y);
  }
  return std::max(travel, 0.0);
}

bool z_overlap(const SceneObject& a, const SceneObject& b) {
  return std::min(a.top(), b.top()) - std::max(a.pose.z, b.pose.z) > 1e-9;
}

Vec2 choose_placement(const WorldState& ws, const SceneObject& obj, Vec2 target_centroid, const GridConfig& cfg,
                      double& drop_z) {
  const double cs = cfg.cell_size();
  std::vector<Polygon> others;
  for (const SceneObject& o : ws.objects) others.push_back(o.world_footprint());
  double best_free = -1.0;
  double best_fit = -1.0;
  Vec2 free_cell{};
  Vec2 fit_cell{};
  for (int r = 0; r < cfg.resolution; ++r) {
    for (int c = 0; c < cfg.resolution; ++c) {
      const Vec2 p = pixel_to_world({r, c}, cfg);
      SceneObject candidate = obj;
      place_at(candidate, p, 0.0);
      if (!inside_workspace(candidate, cfg)) continue;
      const double dist = norm(p - target_centroid);
      if (dist > best_fit) {
        best_fit = dist;
        fit_cell = p;
      }
      const double clearance = circumradius(candidate.world_footprint(), p) + cs;
      bool free = true;
      for (const Polygon& fp : others)
        if (distance_to_point(fp, p) < clearance) {
          free = false;
          break;
        }
      if (free && dist > best_free) {
        best_free = dist;
        free_cell = p;
      }
    }
  }
  drop_z = 0.0;
  if (best_free >= 0.0) return free_cell;
  // No free cell: release on top of whatever occupies the farthest fitting cell.
  SceneObject candidate = obj;
  place_at(candidate, fit_cell, 0.0);
  const Polygon fp = candidate.world_footprint();
  for (const SceneObject& o : ws.objects)
    if (overlaps(fp, o.world_footprint())) drop_z = std::max(drop_z, o.top());
  return fit_cell;
}

}  // namespace

Polygon SceneObject::world_footprint() const { return transformed(footprint, {pose.x, pose.y}, pose.yaw); }

const SceneObject* WorldState::find(int id) const {
  for (const SceneObject& o : objects)
    if (o.id == id) return &o;
  return nullptr;
}

const char* to_string(SpawnMode mode) {
  switch (mode) {
    case SpawnMode::scattered: return "scattered";
    case SpawnMode::adjacent: return "adjacent";
    case SpawnMode::stacked: return "stacked";
    case SpawnMode::mixed: return "mixed";
  }
  return "?";
}

SpawnMode spawn_mode_from_string(const std::string& name) {
  for (SpawnMode m : {SpawnMode::scattered, SpawnMode::adjacent, SpawnMode::stacked, SpawnMode::mixed})
    if (name == to_string(m)) return m;
  throw Error(ErrorKind::parse_error, "unknown placement mode '" + name + "'");
}

bool inside_workspace(const SceneObject& obj, const GridConfig& cfg, double tol) {
  for (const Vec2& p : obj.world_footprint())
    if (p.x < -tol || p.y < -tol || p.x > cfg.extent + tol || p.y > cfg.extent + tol) return false;
  return true;
}

bool interpenetrate(const SceneObject& a, const SceneObject& b) {
  return z_overlap(a, b) && overlaps(a.world_footprint(), b.world_footprint(), 1e-7);
}

bool collision_free(const WorldState& ws) {
  for (std::size_t i = 0; i < ws.objects.size(); ++i)
    for (std::size_t j = i + 1; j < ws.objects.size(); ++j)
      if (interpenetrate(ws.objects[i], ws.objects[j])) return false;
  return true;
}

WorldState spawn_scene(const GridConfig& cfg, int n, SpawnMode mode, std::uint64_t seed) {
  cfg.validate();
  require(n >= 1, "spawn_scene: need at least one object");
  require(mode != SpawnMode::stacked || n >= 2, "spawn_scene: stacked mode needs n >= 2");
  require(mode != SpawnMode::mixed || n >= 2, "spawn_scene: mixed mode needs n >= 2");
  Rng rng(seed);
  WorldState ws;
  ws.rng.seed(split_seed(seed, 1));
  ws.target_id = 0;
  switch (mode) {
    case SpawnMode::scattered:
      for (int i = 0; i < n; ++i) add_scattered(ws, rng, cfg, i);
      break;
    case SpawnMode::adjacent:
      add_near_center(ws, rng, cfg, 0);
      for (int i = 1; i < n; ++i) add_adjacent(ws, rng, cfg, i);
      break;
    case SpawnMode::stacked:
      add_near_center(ws, rng, cfg, 0);
      add_occluder(ws, rng, cfg, 1);
      for (int i = 2; i < n; ++i) add_scattered(ws, rng, cfg, i);
      break;
    case SpawnMode::mixed:
      add_near_center(ws, rng, cfg, 0);
      add_occluder(ws, rng, cfg, 1);
      for (int i = 2; i < n; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
          if (uniform01(rng) < 0.4) {
            // Piles stay two levels deep: drop only onto table-level objects.
            const std::size_t support = uniform_index(rng, ws.objects.size());
            placed = ws.objects[support].pose.z == 0.0 && try_drop_on(ws, rng, cfg, i, support);
          } else {
            placed = try_add_adjacent(ws, rng, cfg, i);
          }
        }
        if (!placed) add_free(ws, rng, cfg, i);
      }
      break;
  }
  return ws;
}

Observation render(const WorldState& ws, const GridConfig& cfg, MaskMode mask) {
  const int n = cfg.resolution;
  const double cs = cfg.cell_size();
  Observation obs{Grid<Rgb>(n, n, Rgb{0, 0, 0}), Grid<double>(n, n, 0.0), Grid<std::uint8_t>(n, n, 0)};
  for (const SceneObject& o : ws.objects) {
    const Polygon fp = o.world_footprint();
    const Interval xs = project(fp, {1, 0});
    const Interval ys = project(fp, {0, 1});
    const int c0 = std::max(0, static_cast<int>(std::floor(xs.lo / cs)) - 1);
    const int c1 = std::min(n - 1, static_cast<int>(std::ceil(xs.hi / cs)) + 1);
    const int r0 = std::max(0, static_cast<int>(std::floor(ys.lo / cs)) - 1);
    const int r1 = std::min(n - 1, static_cast<int>(std::ceil(ys.hi / cs)) + 1);
    const bool in_mask = mask == MaskMode::all_objects || (!ws.target_grasped && o.id == ws.target_id);
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        if (!contains(fp, pixel_to_world({r, c}, cfg))) continue;
        if (o.top() > obs.depth(r, c)) {
          obs.depth(r, c) = o.top();
          obs.color(r, c) = kPalette[static_cast<std::size_t>(o.color_id) % kPalette.size()];
        }
        if (in_mask) obs.goal_mask(r, c) = 1;
      }
    }
  }
  return obs;
}

bool check_occlusion(const WorldState& ws, const GridConfig& cfg) {
  if (!ws.target_present()) throw Error(ErrorKind::target_grasped, "target is no longer in the world");
  const Observation obs = render(ws, cfg);
  const double true_top = ws.find(ws.target_id)->top();
  double cropped_max = 0.0;
  for (std::size_t i = 0; i < obs.depth.data.size(); ++i)
    if (obs.goal_mask.data[i]) cropped_max = std::max(cropped_max, obs.depth.data[i]);
  return cropped_max > true_top + kOcclusionTolerance;
}

std::optional<std::size_t> grasp_target(const WorldState& ws, Vec2 center, double angle, double z,
                                        const GridConfig& cfg, const GripperModel& gripper) {
  const double half = 0.5 * gripper.max_opening;
  const double thickness = cfg.cell_size();
  const double half_width = 0.5 * gripper.finger_width;
  const Polygon jaw = oriented_rect(center, angle, -half, half, half_width);
  const Polygon finger_a = oriented_rect(center, angle, half, half + thickness, half_width);
  const Polygon finger_b = oriented_rect(center, angle, -half - thickness, -half, half_width);

  std::optional<std::size_t> engaged;
  for (std::size_t i = 0; i < ws.objects.size(); ++i) {
    const SceneObject& o = ws.objects[i];
    if (o.top() <= z + 1e-9) continue;
    const Polygon fp = o.world_footprint();
    if (overlaps(fp, finger_a) || overlaps(fp, finger_b)) return std::nullopt;
    if (!overlaps(fp, jaw)) continue;
    if (engaged) return std::nullopt;
    engaged = i;
  }
  if (!engaged) return std::nullopt;

  const SceneObject& held = ws.objects[*engaged];
  const Vec2 u = unit(angle);
  const Vec2 v{-u.y, u.x};
  Polygon band = clip_halfplane(held.world_footprint(), v, dot(center, v) + half_width);
  band = clip_halfplane(band, v * -1.0, -dot(center, v) + half_width);
  if (band.size() < 3) return std::nullopt;
  const Interval cross_section = project(band, u);
  if (cross_section.hi - cross_section.lo > gripper.max_opening) return std::nullopt;

  // A load resting on the object pins it in place.
  for (const SceneObject& other : ws.objects)
    if (other.id != held.id && rests_on(other, held)) return std::nullopt;
  return engaged;
}

void settle(WorldState& ws) {
  std::vector<std::size_t> order(ws.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ws.objects[a].pose.z < ws.objects[b].pose.z; });
  std::vector<Polygon> fps(ws.objects.size());
  for (std::size_t i = 0; i < fps.size(); ++i) fps[i] = ws.objects[i].world_footprint();
  for (std::size_t k = 0; k < order.size(); ++k) {
    SceneObject& o = ws.objects[order[k]];
    double support = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (overlaps(fps[order[k]], fps[order[j]])) support = std::max(support, ws.objects[order[j]].top());
    o.pose.z = support;
  }
}

std::pair<WorldState, ActionOutcome> execute_grasp(const WorldState& ws, Pixel pixel, int rot_idx,
                                                   const GridConfig& cfg) {
  require(pixel.row >= 0 && pixel.col >= 0 && pixel.row < cfg.resolution && pixel.col < cfg.resolution,
          "grasp pixel outside grid");
  const double z = action_height(depth_only(ws, cfg), pixel, ActionKind::grasp);
  WorldState next = ws;
  next.motion_count += 1;
  ActionOutcome outcome;
  outcome.kind = ActionKind::grasp;
  const auto idx = grasp_target(ws, pixel_to_world(pixel, cfg), rot_index_to_angle(rot_idx), z, cfg);
  if (idx) {
    const int id = ws.objects[*idx].id;
    next.objects.erase(next.objects.begin() + static_cast<std::ptrdiff_t>(*idx));
    if (id == ws.target_id) next.target_grasped = true;
    settle(next);
    outcome.grasped_id = id;
    outcome.displaced_ids = displaced_between(ws, next);
  }
  outcome.world_changed = outcome.grasped_id.has_value() || !outcome.displaced_ids.empty();
  return {std::move(next), std::move(outcome)};
}

std::pair<WorldState, ActionOutcome> execute_push(const WorldState& ws, Pixel pixel, int rot_idx,
                                                  const GridConfig& cfg) {
  require(pixel.row >= 0 && pixel.col >= 0 && pixel.row < cfg.resolution && pixel.col < cfg.resolution,
          "push pixel outside grid");
  const double cs = cfg.cell_size();
  const double z = action_height(depth_only(ws, cfg), pixel, ActionKind::push);
  const double angle = rot_index_to_angle(rot_idx);
  const Vec2 dir = unit(angle);
  const Polygon tip = oriented_rect(pixel_to_world(pixel, cfg), angle, -0.5 * cs, 0.5 * cs, 0.5 * cs);

  const std::size_t n = ws.objects.size();
  std::vector<Polygon> fps(n);
  for (std::size_t i = 0; i < n; ++i) fps[i] = ws.objects[i].world_footprint();
  const double inf = std::numeric_limits<double>::infinity();
  // join[k]: tip travel at which object k starts moving with the push.
  std::vector<double> join(n, inf);
  std::vector<bool> done(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    if (ws.objects[k].top() <= z + 1e-9) continue;
    if (auto t = sweep_contact(tip, fps[k], dir); t && *t < kPushLength) join[k] = *t;
  }
  double travel = kPushLength;
  for (;;) {
    std::size_t k = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i] && join[i] < inf && (k == n || join[i] < join[k])) k = i;
    if (k == n || join[k] >= travel) break;
    done[k] = true;
    // The push stalls once any pushed object reaches the workspace edge.
    travel = std::min(travel, join[k] + boundary_travel(fps[k], dir, cfg.extent));
    for (std::size_t m = 0; m < n; ++m) {
      if (done[m]) continue;
      double candidate = inf;
      if (rests_on(ws.objects[m], ws.objects[k])) {
        candidate = join[k];
      } else if (z_overlap(ws.objects[k], ws.objects[m])) {
        if (auto g = sweep_contact(fps[k], fps[m], dir)) candidate = join[k] + *g;
      }
      join[m] = std::min(join[m], candidate);
    }
  }

  WorldState next = ws;
  next.motion_count += 1;
  for (std::size_t k = 0; k < n; ++k) {
    if (!done[k] || join[k] >= travel) continue;
    const double d = travel - join[k];
    next.objects[k].pose.x += d * dir.x;
    next.objects[k].pose.y += d * dir.y;
  }
  settle(next);
  ActionOutcome outcome;
  outcome.kind = ActionKind::push;
  outcome.displaced_ids = displaced_between(ws, next);
  outcome.world_changed = !outcome.displaced_ids.empty();
  return {std::move(next), std::move(outcome)};
}

std::pair<WorldState, ActionOutcome> execute_move(const WorldState& ws, Pixel pixel, int rot_idx,
                                                  const GridConfig& cfg) {
  require(pixel.row >= 0 && pixel.col >= 0 && pixel.row < cfg.resolution && pixel.col < cfg.resolution,
          "move pixel outside grid");
  const double z = action_height(depth_only(ws, cfg), pixel, ActionKind::move);
  WorldState next = ws;
  next.motion_count += 1;
  ActionOutcome outcome;
  outcome.kind = ActionKind::move;
  const auto idx = grasp_target(ws, pixel_to_world(pixel, cfg), rot_index_to_angle(rot_idx), z, cfg);
  if (!idx) return {std::move(next), std::move(outcome)};

  Vec2 target_centroid{0.5 * cfg.extent, 0.5 * cfg.extent};
  if (const SceneObject* t = ws.target_present() ? ws.find(ws.target_id) : nullptr)
    target_centroid = centroid(t->world_footprint());
  SceneObject held = ws.objects[*idx];
  next.objects.erase(next.objects.begin() + static_cast<std::ptrdiff_t>(*idx));
  settle(next);
  double drop_z = 0.0;
  const Vec2 cell = choose_placement(next, held, target_centroid, cfg, drop_z);
  place_at(held, cell, drop_z);
  const auto pos = std::find_if(next.objects.begin(), next.objects.end(),
                                [&](const SceneObject& o) { return o.id > held.id; });
  next.objects.insert(pos, held);

  outcome.grasped_id = held.id;
  outcome.displaced_ids = displaced_between(ws, next);
  outcome.world_changed = true;
  return {std::move(next), std::move(outcome)};
}

std::pair<WorldState, ActionOutcome> execute(const WorldState& ws, const Action& action, const GridConfig& cfg) {
  switch (action.kind) {
    case ActionKind::grasp: return execute_grasp(ws, action.pixel, action.rot_idx, cfg);
    case ActionKind::push: return execute_push(ws, action.pixel, action.rot_idx, cfg);
    case ActionKind::move: return execute_move(ws, action.pixel, action.rot_idx, cfg);
  }
  throw Error(ErrorKind::contract_violation, "unknown action kind");
}

bool change_detected(const Grid<double>& before, const Grid<double>& after) {
  require(before.rows == after.rows && before.cols == after.cols, "change_detected: dimension mismatch");
  int changed = 0;
  for (std::size_t i = 0; i < before.data.size(); ++i)
    if (std::abs(after.data[i] - before.data[i]) > kChangeThreshold) ++changed;
  return changed > kChangeMinCells;
}

void write_scene(std::ostream& out, const WorldState& ws, const GridConfig& cfg) {
  const auto old_precision = out.precision(17);
  out << "mpg-scene 1\n";
  out << "# grid <extent_m> <resolution>; target <id> <grasped>; object <id> <color_id> <height> "
         "<x> <y> <z> <yaw> <n> <vx vy>...\n";
  out << "grid " << cfg.extent << ' ' << cfg.resolution << '\n';
  out << "target " << ws.target_id << ' ' << (ws.target_grasped ? 1 : 0) << '\n';
  out << "motion_count " << ws.motion_count << '\n';
  out << "rng " << ws.rng << '\n';
  out << "objects " << ws.objects.size() << '\n';
  for (const SceneObject& o : ws.objects) {
    out << "object " << o.id << ' ' << o.color_id << ' ' << o.height << ' ' << o.pose.x << ' ' << o.pose.y << ' '
        << o.pose.z << ' ' << o.pose.yaw << ' ' << o.footprint.size();
    for (const Vec2& v : o.footprint) out << ' ' << v.x << ' ' << v.y;
    out << '\n';
  }
  out.precision(old_precision);
}

namespace {

std::string next_content_line(std::istream& in, int& line_no) {
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line[0] != '#') return line;
  }
  throw Error(ErrorKind::parse_error, "unexpected end of scene file after line " + std::to_string(line_no));
}

std::istringstream expect(std::istream& in, int& line_no, const std::string& keyword) {
  std::istringstream ss(next_content_line(in, line_no));
  std::string word;
  ss >> word;
  if (word != keyword)
    throw Error(ErrorKind::parse_error, "line " + std::to_string(line_no) + ": expected '" + keyword + "'");
  return ss;
}

void check_stream(const std::istringstream& ss, int line_no) {
  if (ss.fail()) throw Error(ErrorKind::parse_error, "line " + std::to_string(line_no) + ": malformed fields");
}

}  // namespace

std::pair<WorldState, GridConfig> read_scene(std::istream& in) {
  int line_no = 0;
  {
    auto ss = expect(in, line_no, "mpg-scene");
    int version = 0;
    ss >> version;
    if (version != 1) throw Error(ErrorKind::parse_error, "unsupported scene version");
  }
  GridConfig cfg;
  WorldState ws;
  {
    auto ss = expect(in, line_no, "grid");
    ss >> cfg.extent >> cfg.resolution;
    check_stream(ss, line_no);
  }
  {
    auto ss = expect(in, line_no, "target");
    int grasped = 0;
    ss >> ws.target_id >> grasped;
    check_stream(ss, line_no);
    ws.target_grasped = grasped != 0;
  }
  {
    auto ss = expect(in, line_no, "motion_count");
    ss >> ws.motion_count;
    check_stream(ss, line_no);
  }
  {
    auto ss = expect(in, line_no, "rng");
    ss >> ws.rng;
    check_stream(ss, line_no);
  }
  std::size_t count = 0;
  {
    auto ss = expect(in, line_no, "objects");
    ss >> count;
    check_stream(ss, line_no);
  }
  for (std::size_t i = 0; i < count; ++i) {
    auto ss = expect(in, line_no, "object");
    SceneObject o;
    std::size_t verts = 0;
    ss >> o.id >> o.color_id >> o.height >> o.pose.x >> o.pose.y >> o.pose.z >> o.pose.yaw >> verts;
    o.footprint.resize(verts);
    for (Vec2& v : o.footprint) ss >> v.x >> v.y;
    check_stream(ss, line_no);
    if (verts < 3 || !is_convex(o.footprint) || o.height <= 0.0)
      throw Error(ErrorKind::parse_error, "line " + std::to_string(line_no) + ": invalid object geometry");
    ws.objects.push_back(std::move(o));
  }
  cfg.validate();
  return {std::move(ws), cfg};
}

void write_depth_pgm(std::ostream& out, const Grid<double>& depth) {
  out << "P5\n" << depth.cols << ' ' << depth.rows << "\n65535\n";
  for (double d : depth.data) {
    const double counts = std::clamp(std::round(d * kDepthCountsPerMeter), 0.0, 65535.0);
    const auto v = static_cast<std::uint16_t>(counts);
    out.put(static_cast<char>(v >> 8));
    out.put(static_cast<char>(v & 0xFF));
  }
}

Grid<std::uint16_t> read_depth_pgm(std::istream& in) {
  std::string magic;
  int cols = 0;
  int rows = 0;
  int maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5" || maxval != 65535 || cols <= 0 || rows <= 0)
    throw Error(ErrorKind::parse_error, "not a 16-bit binary PGM");
  in.get();
  Grid<std::uint16_t> g(rows, cols, 0);
  for (auto& v : g.data) {
    const int hi = in.get();
    const int lo = in.get();
    if (!in) throw Error(ErrorKind::parse_error, "truncated PGM payload");
    v = static_cast<std::uint16_t>((hi << 8) | lo);
  }
  return g;
}

void write_color_ppm(std::ostream& out, const Grid<Rgb>& color) {
  out << "P6\n" << color.cols << ' ' << color.rows << "\n255\n";
  for (const Rgb& px : color.data) out.write(reinterpret_cast<const char*>(px.data()), 3);
}

void write_mask_pgm(std::ostream& out, const Grid<std::uint8_t>& mask) {
  out << "P5\n" << mask.cols << ' ' << mask.rows << "\n255\n";
  for (std::uint8_t m : mask.data) out.put(static_cast<char>(m ? 255 : 0));
}

}  // namespace mpg
