#include "doctest.h"

#include "mpg/world.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

using namespace mpg;

namespace {

// Crossing-number containment, kept separate from the library's routine.
bool covers(const Polygon& poly, Vec2 p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

bool brute_force_occluded(const WorldState& ws, const GridConfig& cfg) {
  const SceneObject* target = ws.find(ws.target_id);
  const Polygon tfp = target->world_footprint();
  for (int r = 0; r < cfg.resolution; ++r) {
    for (int c = 0; c < cfg.resolution; ++c) {
      const Vec2 p{(c + 0.5) * cfg.cell_size(), (r + 0.5) * cfg.cell_size()};
      if (!covers(tfp, p)) continue;
      for (const SceneObject& o : ws.objects)
        if (o.id != target->id && covers(o.world_footprint(), p) && o.top() > target->top() + kOcclusionTolerance)
          return true;
    }
  }
  return false;
}

SceneObject box_object(int id, double w, double l, double h, double x, double y, double z = 0.0, double yaw = 0.0) {
  SceneObject o;
  o.id = id;
  o.footprint = make_box(w, l);
  o.height = h;
  o.pose = {x, y, z, yaw};
  o.color_id = id % 10;
  return o;
}

WorldState world_of(std::vector<SceneObject> objects, int target = 0) {
  WorldState ws;
  ws.objects = std::move(objects);
  ws.target_id = target;
  return ws;
}

double polygon_min_distance(const Polygon& a, const Polygon& b) {
  double best = 1e9;
  for (const Vec2& v : a) best = std::min(best, distance_to_point(b, v));
  for (const Vec2& v : b) best = std::min(best, distance_to_point(a, v));
  return best;
}

// Residual push length by marching a sampled tip square until it first
// touches the box interior.
double residual_push_oracle(const SceneObject& box, Vec2 start, double angle, double cell) {
  const Vec2 u = unit(angle);
  const Vec2 v{-u.y, u.x};
  const Polygon fp = box.world_footprint();
  for (double s = 0.0; s <= kPushLength; s += 2e-5) {
    for (int i = 0; i <= 20; ++i)
      for (int j = 0; j <= 20; ++j) {
        const Vec2 p = start + u * (s + (i / 20.0 - 0.5) * cell) + v * ((j / 20.0 - 0.5) * cell);
        if (covers(fp, p)) return kPushLength - s;
      }
  }
  return 0.0;
}

}  // namespace

TEST_CASE("spawn_scene: single scattered object is never occluded") {
  const GridConfig cfg;
  const WorldState ws = spawn_scene(cfg, 1, SpawnMode::scattered, 7);
  REQUIRE(ws.objects.size() == 1);
  CHECK_FALSE(check_occlusion(ws, cfg));
  CHECK(inside_workspace(ws.objects[0], cfg));
}

TEST_CASE("spawn_scene: stacked pair puts object 1 on object 0") {
  const GridConfig cfg;
  const WorldState ws = spawn_scene(cfg, 2, SpawnMode::stacked, 3);
  REQUIRE(ws.objects.size() == 2);
  CHECK(ws.objects[1].pose.z == ws.objects[0].height);
  CHECK(ws.objects[0].pose.z == 0.0);
  CHECK(overlaps(ws.objects[0].world_footprint(), ws.objects[1].world_footprint()));
  CHECK(check_occlusion(ws, cfg));
  CHECK(brute_force_occluded(ws, cfg));
}

TEST_CASE("spawn_scene: scattered objects keep two cells of clearance") {
  const GridConfig cfg;
  const WorldState ws = spawn_scene(cfg, 5, SpawnMode::scattered, 11);
  REQUIRE(ws.objects.size() == 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j)
      CHECK(polygon_min_distance(ws.objects[i].world_footprint(), ws.objects[j].world_footprint()) >=
            2.0 * cfg.cell_size() - 1e-12);
}

TEST_CASE("spawn_scene: adjacent objects sit within one cell of a neighbour") {
  const GridConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const WorldState ws = spawn_scene(cfg, 6, SpawnMode::adjacent, seed);
    CHECK(collision_free(ws));
    for (std::size_t i = 1; i < ws.objects.size(); ++i) {
      double nearest = 1e9;
      for (std::size_t j = 0; j < ws.objects.size(); ++j)
        if (j != i)
          nearest = std::min(nearest, polygon_min_distance(ws.objects[i].world_footprint(),
                                                           ws.objects[j].world_footprint()));
      CHECK(nearest <= cfg.cell_size() + 1e-9);
    }
  }
}

TEST_CASE("spawn_scene: every mode is deterministic, collision-free and in bounds") {
  const GridConfig cfg = GridConfig::with_resolution(32);
  for (SpawnMode mode : {SpawnMode::scattered, SpawnMode::adjacent, SpawnMode::stacked, SpawnMode::mixed}) {
    for (std::uint64_t seed = 0; seed < 15; ++seed) {
      const WorldState a = spawn_scene(cfg, 4, mode, seed);
      const WorldState b = spawn_scene(cfg, 4, mode, seed);
      CHECK(a == b);
      CHECK(collision_free(a));
      for (const SceneObject& o : a.objects) {
        CHECK(inside_workspace(o, cfg));
        CHECK(is_convex(o.footprint));
        CHECK(o.height > 0.0);
      }
      if (mode == SpawnMode::stacked || mode == SpawnMode::mixed) CHECK(check_occlusion(a, cfg));
    }
  }
}

TEST_CASE("spawn_scene: preconditions and infeasible requests") {
  const GridConfig cfg = GridConfig::with_resolution(16);
  CHECK_THROWS_AS(spawn_scene(cfg, 0, SpawnMode::scattered, 1), Error);
  CHECK_THROWS_AS(spawn_scene(cfg, 1, SpawnMode::stacked, 1), Error);
  try {
    spawn_scene(cfg, 40, SpawnMode::scattered, 1);
    FAIL("expected scene-infeasible");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::scene_infeasible);
  }
}

TEST_CASE("render: empty world and a single box") {
  const GridConfig cfg;
  const Observation empty = render(WorldState{}, cfg);
  for (double d : empty.depth.data) CHECK(d == 0.0);
  for (auto m : empty.goal_mask.data) CHECK(m == 0);

  // Box covering cell centers of rows/cols 10..20 exactly.
  const double cs = cfg.cell_size();
  const WorldState ws = world_of({box_object(0, 11 * cs, 11 * cs, 0.04, 15.5 * cs, 15.5 * cs)});
  const Observation obs = render(ws, cfg);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      const bool in = r >= 10 && r <= 20 && c >= 10 && c <= 20;
      CHECK(obs.depth(r, c) == (in ? 0.04 : 0.0));
      CHECK(obs.goal_mask(r, c) == (in ? 1 : 0));
    }
}

TEST_CASE("render: stacked boxes read the summed height on overlap cells") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const WorldState ws = world_of({box_object(0, 8 * cs, 8 * cs, 0.04, 20 * cs, 20 * cs),
                                  box_object(1, 6 * cs, 6 * cs, 0.03, 23 * cs, 20 * cs, 0.04)});
  const Observation obs = render(ws, cfg);
  int overlap_cells = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      const Vec2 p{(c + 0.5) * cs, (r + 0.5) * cs};
      double expected = 0.0;
      for (const SceneObject& o : ws.objects)
        if (covers(o.world_footprint(), p)) expected = std::max(expected, o.top());
      CHECK(obs.depth(r, c) == doctest::Approx(expected));
      if (covers(ws.objects[0].world_footprint(), p) && covers(ws.objects[1].world_footprint(), p)) {
        ++overlap_cells;
        CHECK(obs.depth(r, c) == doctest::Approx(0.07));
        CHECK(obs.color(r, c) == kPalette[1]);
        CHECK(obs.goal_mask(r, c) == 1);  // full footprint, visible or not
      }
    }
  CHECK(overlap_cells > 0);
}

TEST_CASE("render agrees with the analytic max on random scenes") {
  const GridConfig cfg = GridConfig::with_resolution(32);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const WorldState ws = spawn_scene(cfg, 5, SpawnMode::mixed, seed);
    const Observation obs = render(ws, cfg, MaskMode::all_objects);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        const Vec2 p{(c + 0.5) * cfg.cell_size(), (r + 0.5) * cfg.cell_size()};
        double expected = 0.0;
        bool any = false;
        for (const SceneObject& o : ws.objects)
          if (covers(o.world_footprint(), p)) {
            expected = std::max(expected, o.top());
            any = true;
          }
        CHECK(obs.depth(r, c) == expected);
        CHECK(obs.goal_mask(r, c) == (any ? 1 : 0));
      }
  }
}

TEST_CASE("check_occlusion matches the brute-force oracle") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  CHECK_FALSE(check_occlusion(world_of({box_object(0, 5 * cs, 5 * cs, 0.04, 0.2, 0.2)}), cfg));
  const WorldState side_by_side = world_of({box_object(0, 5 * cs, 5 * cs, 0.03, 0.2, 0.2),
                                            box_object(1, 5 * cs, 5 * cs, 0.06, 0.2 + 5 * cs, 0.2)});
  CHECK_FALSE(check_occlusion(side_by_side, cfg));
  CHECK_FALSE(brute_force_occluded(side_by_side, cfg));
  const GridConfig small = GridConfig::with_resolution(32);
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    WorldState ws = spawn_scene(small, 6, SpawnMode::mixed, seed);
    ws.target_id = static_cast<int>(seed % 6);
    CHECK(check_occlusion(ws, small) == brute_force_occluded(ws, small));
  }
  WorldState gone = side_by_side;
  gone.target_grasped = true;
  try {
    check_occlusion(gone, cfg);
    FAIL("expected target-grasped");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::target_grasped);
  }
}

TEST_CASE("execute_grasp: isolated thin box is grasped across its long axis") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const Vec2 center = pixel_to_world({30, 30}, cfg);
  const WorldState ws = world_of({box_object(0, 7 * cs, 3 * cs, 0.05, center.x, center.y)});
  // Long axis along x; closing axis along y is rotation index 4 (90 degrees).
  const auto [next, outcome] = execute_grasp(ws, {30, 30}, 4, cfg);
  REQUIRE(outcome.grasped_id.has_value());
  CHECK(*outcome.grasped_id == 0);
  CHECK(next.objects.empty());
  CHECK(next.target_grasped);
  CHECK(next.motion_count == 1);
  CHECK(outcome.world_changed);
}

TEST_CASE("execute_grasp: empty cell leaves the world unchanged") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const WorldState ws = world_of({box_object(0, 4 * cs, 4 * cs, 0.05, 0.05, 0.05)});
  const auto [next, outcome] = execute_grasp(ws, {50, 50}, 0, cfg);
  CHECK_FALSE(outcome.grasped_id.has_value());
  CHECK_FALSE(outcome.world_changed);
  CHECK(next.objects == ws.objects);
}

TEST_CASE("execute_grasp: a tightly flanked object cannot be grasped at any angle") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const Vec2 c = pixel_to_world({32, 32}, cfg);
  std::vector<SceneObject> objs{box_object(0, 4 * cs, 4 * cs, 0.05, c.x, c.y)};
  int id = 1;
  const double pitch = 2 * cs + 0.5 * cs + 2.5 * cs;  // half + gap + half of the 5-cell neighbours
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc)
      if (dr != 0 || dc != 0) objs.push_back(box_object(id++, 5 * cs, 5 * cs, 0.05, c.x + dc * pitch, c.y + dr * pitch));
  const WorldState ws = world_of(objs);
  REQUIRE(collision_free(ws));
  for (int rot = 0; rot < kRotations; ++rot) {
    const auto [next, outcome] = execute_grasp(ws, {32, 32}, rot, cfg);
    CHECK_FALSE(outcome.grasped_id.has_value());
    CHECK(next.objects.size() == 9);
  }
}

TEST_CASE("execute_grasp: an object carrying a load is pinned, the load is not") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const Vec2 c = pixel_to_world({32, 32}, cfg);
  const WorldState ws = world_of({box_object(0, 6 * cs, 6 * cs, 0.03, c.x, c.y),
                                  box_object(1, 4 * cs, 4 * cs, 0.04, c.x + 2 * cs, c.y, 0.03)});
  // Grasping the loaded base at its exposed left edge fails.
  const auto [n0, o0] = execute_grasp(ws, {32, 30}, 4, cfg);
  CHECK_FALSE(o0.grasped_id.has_value());
  // The occluder on top is graspable; removing it changes nothing else.
  const auto [n1, o1] = execute_grasp(ws, {32, 34}, 0, cfg);
  REQUIRE(o1.grasped_id.has_value());
  CHECK(*o1.grasped_id == 1);
  CHECK_FALSE(n1.target_grasped);
}

TEST_CASE("execute_push: empty space changes nothing") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const WorldState ws = world_of({box_object(0, 4 * cs, 4 * cs, 0.05, 0.05, 0.05)});
  const auto [next, outcome] = execute_push(ws, {40, 20}, 0, cfg);
  CHECK_FALSE(outcome.world_changed);
  CHECK(next.objects == ws.objects);
  CHECK(next.motion_count == 1);
}

TEST_CASE("execute_push: a box in the tip path moves by the residual push length") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  for (int rot : {0, 2, 4, 7, 12}) {
    const double angle = rot_index_to_angle(rot);
    const Vec2 start = pixel_to_world({32, 32}, cfg);
    const Vec2 box_center = start + unit(angle) * (7.3 * cs);
    const WorldState ws = world_of({box_object(0, 5 * cs, 4 * cs, 0.05, box_center.x, box_center.y, 0.0, 0.3)});
    const auto [next, outcome] = execute_push(ws, {32, 32}, rot, cfg);
    const double expected = residual_push_oracle(ws.objects[0], start, angle, cs);
    REQUIRE(expected > 0.0);
    const Vec2 moved{next.objects[0].pose.x - box_center.x, next.objects[0].pose.y - box_center.y};
    CHECK(std::abs(norm(moved) - expected) < 3e-4);
    CHECK(std::abs(cross(moved, unit(angle))) < 1e-12);  // pure translation along the push
    CHECK(next.objects[0].pose.yaw == ws.objects[0].pose.yaw);
    CHECK(outcome.world_changed);
  }
}

TEST_CASE("execute_push: a tip above a short object passes over it") {
  const GridConfig cfg;
  const double cs = cfg.cell_size();
  const Vec2 start = pixel_to_world({32, 32}, cfg);
  // Tall box diagonally behind the start pixel raises the 3x3 height read;
  // the short box ahead sits below the tip.
  const WorldState ws = world_of({box_object(0, 3 * cs, 3 * cs, 0.06, start.x - 2.5 * cs, start.y - 2.5 * cs),
                                  box_object(1, 4 * cs, 4 * cs, 0.02, start.x + 6 * cs, start.y)});
  const auto [next, outcome] = execute_push(ws, {32, 32}, 0, cfg);
  CHECK_FALSE(outcome.world_changed);
  CHECK(next.objects == ws.objects);
}

TEST_CASE("execute_push: cascades front to back and stops at the workspace edge") {
  const GridConfig cfg = GridConfig::with_resolution(32);
  const double cs = cfg.cell_size();
  const Vec2 start = pixel_to_world({16, 4}, cfg);
  const WorldState ws = world_of({box_object(0, 4 * cs, 4 * cs, 0.05, start.x + 4 * cs, start.y),
                                  box_object(1, 4 * cs, 4 * cs, 0.05, start.x + 9 * cs, start.y)});
  const auto [next, outcome] = execute_push(ws, {16, 4}, 0, cfg);
  CHECK(outcome.displaced_ids.size() == 2);
  CHECK(collision_free(next));
  for (const SceneObject& o : next.objects) CHECK(inside_workspace(o, cfg));
  // Both boxes travelled the same way; the front one was reached one gap later.
  const double d0 = next.objects[0].pose.x - ws.objects[0].pose.x;
  const double d1 = next.objects[1].pose.x - ws.objects[1].pose.x;
  CHECK(d0 > 0.0);
  CHECK(d0 - d1 == doctest::Approx(cs).epsilon(1e-6));

  // Pushing toward the near wall clamps at the boundary.
  const WorldState wall = world_of({box_object(0, 4 * cs, 4 * cs, 0.05, 3 * cs, 16 * cs)});
  const auto [clamped, o2] = execute_push(wall, {16, 6}, 8, cfg);
  CHECK(o2.world_changed);
  CHECK(clamped.objects[0].pose.x == doctest::Approx(2 * cs));
}

TEST_CASE("execute_move: relocating the occluder clears occlusion") {
  const GridConfig cfg;
  const WorldState ws = spawn_scene(cfg, 2, SpawnMode::stacked, 3);
  REQUIRE(check_occlusion(ws, cfg));
  const SceneObject& occluder = ws.objects[1];
  const Pixel p = world_to_pixel({occluder.pose.x, occluder.pose.y}, cfg);
  const auto [next, outcome] = execute_move(ws, p, 0, cfg);
  REQUIRE(outcome.grasped_id.has_value());
  CHECK(*outcome.grasped_id == 1);
  CHECK(next.objects.size() == 2);
  CHECK_FALSE(check_occlusion(next, cfg));
  CHECK(collision_free(next));
  CHECK(next.find(1)->pose.z == 0.0);
  CHECK(brute_force_occluded(next, cfg) == false);
}

TEST_CASE("execute_move: empty cell and moving the target itself") {
  const GridConfig cfg;
  const WorldState ws = spawn_scene(cfg, 1, SpawnMode::scattered, 7);
  const SceneObject& t = ws.objects[0];
  const Pixel on_target = world_to_pixel({t.pose.x, t.pose.y}, cfg);
  const Pixel far{on_target.row < 32 ? 60 : 3, on_target.col < 32 ? 60 : 3};
  const auto [same, o_empty] = execute_move(ws, far, 0, cfg);
  CHECK_FALSE(o_empty.world_changed);
  CHECK(same.objects == ws.objects);

  bool moved_target = false;
  for (int rot = 0; rot < kRotations && !moved_target; ++rot) {
    const auto [next, outcome] = execute_move(ws, on_target, rot, cfg);
    if (!outcome.grasped_id) continue;
    moved_target = true;
    CHECK(*outcome.grasped_id == ws.target_id);
    CHECK(next.target_present());
    CHECK(area(next.objects[0].world_footprint()) == doctest::Approx(area(t.world_footprint())));
  }
  CHECK(moved_target);
}

TEST_CASE("change_detected thresholds") {
  Grid<double> a(32, 32, 0.0);
  CHECK_FALSE(change_detected(a, a));
  Grid<double> jitter = a;
  jitter(3, 3) = 0.0005;
  CHECK_FALSE(change_detected(a, jitter));
  jitter(3, 3) = 0.01;  // one cell over threshold is still below the cell count
  CHECK_FALSE(change_detected(a, jitter));

  const GridConfig cfg = GridConfig::with_resolution(32);
  const double cs = cfg.cell_size();
  const WorldState ws = world_of({box_object(0, 4 * cs, 4 * cs, 0.04, 10 * cs, 10 * cs)});
  WorldState shifted = ws;
  shifted.objects[0].pose.x += 3 * cs;
  CHECK(change_detected(render(ws, cfg).depth, render(shifted, cfg).depth));
  CHECK_THROWS_AS(change_detected(a, Grid<double>(16, 16, 0.0)), Error);
}

TEST_CASE("random action sequences preserve the world invariants") {
  const GridConfig cfg = GridConfig::with_resolution(32);
  Rng rng(99);
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const SpawnMode mode = seed % 2 ? SpawnMode::mixed : SpawnMode::adjacent;
    WorldState ws = spawn_scene(cfg, 5, mode, seed);
    std::vector<Action> actions;
    WorldState replay = ws;
    for (int step = 0; step < 12; ++step) {
      Action a{kind_from_branch(static_cast<int>(uniform_index(rng, 3))),
               {static_cast<int>(uniform_index(rng, 32)), static_cast<int>(uniform_index(rng, 32))},
               static_cast<int>(uniform_index(rng, 16))};
      actions.push_back(a);
      const auto [next, outcome] = execute(ws, a, cfg);
      const std::size_t before = ws.objects.size();
      if (a.kind == ActionKind::grasp) CHECK(next.objects.size() == before - (outcome.grasped_id ? 1 : 0));
      else CHECK(next.objects.size() == before);
      CHECK(collision_free(next));
      for (const SceneObject& o : next.objects) {
        CHECK(inside_workspace(o, cfg, 1e-9));
        const SceneObject* prev = ws.find(o.id);
        REQUIRE(prev != nullptr);
        CHECK(area(o.world_footprint()) == doctest::Approx(area(prev->world_footprint())).epsilon(1e-12));
        CHECK(o.pose.yaw == prev->pose.yaw);
      }
      ws = next;
    }
    for (const Action& a : actions) replay = execute(replay, a, cfg).first;
    CHECK(replay == ws);
  }
}

TEST_CASE("scene snapshot round-trips exactly") {
  const GridConfig cfg = GridConfig::with_resolution(32);
  WorldState ws = spawn_scene(cfg, 5, SpawnMode::mixed, 4);
  ws.motion_count = 3;
  ws.rng.discard(17);
  std::stringstream buf;
  write_scene(buf, ws, cfg);
  const auto [back, back_cfg] = read_scene(buf);
  CHECK(back == ws);
  CHECK(back_cfg.extent == cfg.extent);
  CHECK(back_cfg.resolution == cfg.resolution);

  std::istringstream bad("mpg-scene 1\ngrid 0.224 32\ntarget x 0\n");
  CHECK_THROWS_AS(read_scene(bad), Error);
}

TEST_CASE("depth heightmap dump is bit-exact at 10000 counts per meter") {
  Grid<double> depth(2, 3, 0.0);
  depth(0, 1) = 0.07;
  depth(1, 2) = 0.04567;
  std::ostringstream out;
  write_depth_pgm(out, depth);
  const std::string bytes = out.str();
  const std::string header = "P5\n3 2\n65535\n";
  REQUIRE(bytes.size() == header.size() + 12);
  CHECK(bytes.substr(0, header.size()) == header);
  // 0.07 m -> 700 counts -> 0x02BC, most significant byte first.
  CHECK(static_cast<unsigned char>(bytes[header.size() + 2]) == 0x02);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 3]) == 0xBC);
  std::istringstream in(bytes);
  const Grid<std::uint16_t> counts = read_depth_pgm(in);
  CHECK(counts(0, 1) == 700);
  CHECK(counts(1, 2) == 457);
  CHECK(counts(0, 0) == 0);
}
