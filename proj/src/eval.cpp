#include "mpg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace mpg {

const char* to_string(Policy policy) {
  switch (policy) {
    case Policy::mpg: return "mpg";
    case Policy::grasp_only: return "grasp-only";
    case Policy::random: return "random";
  }
  return "?";
}

Policy policy_from_string(const std::string& name) {
  for (Policy p : {Policy::mpg, Policy::grasp_only, Policy::random})
    if (name == to_string(p)) return p;
  throw Error(ErrorKind::parse_error, "unknown policy '" + name + "'");
}

void EvalScenario::validate() const {
  require(n_runs >= 1, "eval: need at least one run");
  require(n_objects >= 1 && n_objects <= 10, "eval: objects must be in 1..10");
  require(target_range >= 1 && target_range <= n_objects, "eval: target range must lie within the objects");
  require(!occluded_target || n_objects >= 2, "eval: an occluded target needs two objects");
  require(max_motions > 0 && max_moves > 0 && max_pushes > 0 && grasp_limit > 0, "eval: caps must be positive");
  GridConfig::with_resolution(grid_resolution).validate();
}

WorldState eval_scene(const EvalScenario& sc, int run) {
  const GridConfig grid = GridConfig::with_resolution(sc.grid_resolution);
  const std::uint64_t base = split_seed(sc.seed, static_cast<std::uint64_t>(run));
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const std::uint64_t sub = split_seed(base, attempt);
    WorldState ws;
    try {
      ws = spawn_scene(grid, sc.n_objects, sc.mode, sub);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::scene_infeasible) continue;
      throw;
    }
    std::vector<int> candidates;
    for (const SceneObject& o : ws.objects) {
      if (o.id >= sc.target_range) continue;
      WorldState probe = ws;
      probe.target_id = o.id;
      if (!sc.occluded_target || check_occlusion(probe, grid)) candidates.push_back(o.id);
    }
    if (candidates.empty()) continue;
    Rng pick(split_seed(sub, 0xe7a1));
    ws.target_id = candidates[uniform_index(pick, candidates.size())];
    return ws;
  }
  throw Error(ErrorKind::scene_infeasible, "no evaluation scene with a suitable target for run " + std::to_string(run));
}

Action baseline_grasp_only(const Observation& obs, const NetParams& params) {
  const QMaps q = forward(params, obs, {ActionKind::grasp});
  const MaskedMax best = masked_argmax(q[ActionKind::grasp], rough_mask(obs.goal_mask));
  return {ActionKind::grasp, best.pixel, best.rot_idx};
}

namespace {

char letter(ActionKind kind) {
  switch (kind) {
    case ActionKind::move: return 'm';
    case ActionKind::grasp: return 'g';
    case ActionKind::push: return 'p';
  }
  return '?';
}

EvalRun run_once(const NetParams* params, const EvalScenario& sc, Policy policy, int index) {
  const GridConfig grid = GridConfig::with_resolution(sc.grid_resolution);
  WorldState world = eval_scene(sc, index);
  Rng rng(split_seed(split_seed(sc.seed, 0x5eed), static_cast<std::uint64_t>(index)));
  StageConfig stage5;
  stage5.stage = 5;
  stage5.max_moves = sc.max_moves;
  stage5.max_pushes = sc.max_pushes;
  stage5.max_motions = sc.max_motions;
  stage5.grasp_limit = sc.grasp_limit;

  EvalRun r;
  r.run = index;
  r.target_id = world.target_id;
  EpisodeCounters ctr;
  while (ctr.motions < sc.max_motions && world.target_present()) {
    const Observation obs = render(world, grid);
    Action act;
    if (policy == Policy::random) {
      // Uniform over the primitives whose caps are not used up.
      std::vector<ActionKind> kinds{ActionKind::grasp};
      if (ctr.moves < sc.max_moves) kinds.push_back(ActionKind::move);
      if (ctr.pushes < sc.max_pushes) kinds.push_back(ActionKind::push);
      act.kind = kinds[uniform_index(rng, kinds.size())];
      const Grid<std::uint8_t> rough = rough_mask(obs.goal_mask);
      std::vector<Pixel> cells;
      for (int y = 0; y < rough.rows; ++y)
        for (int x = 0; x < rough.cols; ++x)
          if (rough(y, x)) cells.push_back({y, x});
      act.pixel = cells[uniform_index(rng, cells.size())];
      act.rot_idx = static_cast<int>(uniform_index(rng, kRotations));
    } else if (policy == Policy::grasp_only) {
      act = baseline_grasp_only(obs, *params);
    } else {
      const bool occluded = check_occlusion(world, grid);
      const QMaps q = forward(*params, obs);
      const Decision d = select_action(q, obs, occluded, 5, ctr, stage5, params->q_star, 0.0, rng);
      if (d.stop) break;  // coordinator gave up; the run counts as a failure
      act = d.action;
    }
    bool heuristic = false;
    if (policy == Policy::mpg && sc.heuristic && act.kind == ActionKind::grasp &&
        ctr.failed_grasps >= sc.grasp_limit) {
      act = heuristic_grasp(obs.goal_mask);
      heuristic = true;
    }

    auto [next, outcome] = execute(world, act, grid);
    const bool took_target =
        act.kind == ActionKind::grasp && outcome.grasped_id && *outcome.grasped_id == world.target_id;
    world = std::move(next);
    ++ctr.motions;
    r.actions += heuristic ? 'h' : letter(act.kind);
    if (act.kind == ActionKind::move) ++ctr.moves;
    if (act.kind == ActionKind::push) ++ctr.pushes;
    if (act.kind == ActionKind::grasp) {
      ++r.grasps;
      r.heuristic_grasps += heuristic;
      r.target_grasps += took_target;
    }
    if (act.kind == ActionKind::grasp && !heuristic && !took_target)
      ++ctr.failed_grasps;
    else
      ctr.failed_grasps = 0;
    if (took_target) r.success = true;
  }
  r.motions = ctr.motions;
  r.moves = ctr.moves;
  r.pushes = ctr.pushes;
  return r;
}

}  // namespace

void summarize(EvalReport& report) {
  int ok = 0, grasps = 0, hits = 0;
  double motions = 0.0;
  for (const EvalRun& r : report.runs) {
    ok += r.success;
    if (r.success) motions += r.motions;
    grasps += r.grasps;
    hits += r.target_grasps;
  }
  const double n = static_cast<double>(report.runs.size());
  report.task_success_rate = n > 0 ? ok / n : 0.0;
  report.avg_motion_number = ok > 0 ? std::optional<double>(motions / ok) : std::nullopt;
  report.grasp_success_rate = grasps > 0 ? std::optional<double>(static_cast<double>(hits) / grasps) : std::nullopt;
}

EvalReport evaluate(const NetParams* params, const EvalScenario& scenario, Policy policy) {
  scenario.validate();
  if (policy != Policy::random) {
    if (!params) throw Error(ErrorKind::contract_violation, std::string(to_string(policy)) + " policy needs a checkpoint");
    if (params->arch.resolution != scenario.grid_resolution)
      throw Error(ErrorKind::contract_violation, "checkpoint resolution " + std::to_string(params->arch.resolution) +
                                                     " does not match the scenario grid " +
                                                     std::to_string(scenario.grid_resolution));
  }
  EvalReport report;
  report.policy = policy;
  report.scenario = scenario;
  for (int i = 0; i < scenario.n_runs; ++i) report.runs.push_back(run_once(params, scenario, policy, i));
  summarize(report);
  return report;
}

void write_report(std::ostream& out, const EvalReport& rep) {
  const EvalScenario& sc = rep.scenario;
  out << "# policy=" << to_string(rep.policy) << '\n'
      << "# objects=" << sc.n_objects << " runs=" << sc.n_runs << " mode=" << to_string(sc.mode)
      << " occluded_target=" << (sc.occluded_target ? 1 : 0) << " grid=" << sc.grid_resolution
      << " seed=" << sc.seed << '\n'
      << "# task_success_rate=" << format_number(rep.task_success_rate) << '\n'
      << "# avg_motion_number="
      << (rep.avg_motion_number ? format_number(*rep.avg_motion_number) : std::string("none"))
      << " (successful runs only)\n"
      << "# grasp_success_rate="
      << (rep.grasp_success_rate ? format_number(*rep.grasp_success_rate) : std::string("none")) << '\n';
  out << kEvalHeader << '\n';
  for (const EvalRun& r : rep.runs)
    out << r.run << ',' << r.target_id << ',' << (r.success ? 1 : 0) << ',' << r.motions << ',' << r.grasps << ','
        << r.target_grasps << ',' << r.moves << ',' << r.pushes << ',' << r.heuristic_grasps << ',' << r.actions
        << '\n';
}

EvalReport read_report(std::istream& in) {
  EvalReport rep;
  std::string line;
  int n = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(n);
    if (line[0] == '#') {
      if (line.rfind("# policy=", 0) == 0) rep.policy = policy_from_string(line.substr(9));
      continue;
    }
    if (!header) {
      if (line != kEvalHeader) throw Error(ErrorKind::parse_error, where + ": unexpected header");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.push_back("");
    if (f.size() != 10) throw Error(ErrorKind::parse_error, where + ": expected 10 fields");
    EvalRun r;
    int* ints[9] = {&r.run, &r.target_id, nullptr, &r.motions, &r.grasps, &r.target_grasps, &r.moves, &r.pushes,
                    &r.heuristic_grasps};
    for (int i = 0; i < 9; ++i) {
      int v = 0;
      std::size_t used = 0;
      try {
        v = std::stoi(f[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != f[i].size()) throw Error(ErrorKind::parse_error, where + ": bad field '" + f[i] + "'");
      if (i == 2) {
        if (v != 0 && v != 1) throw Error(ErrorKind::parse_error, where + ": success must be 0 or 1");
        r.success = v == 1;
      } else {
        *ints[i] = v;
      }
    }
    r.actions = f[9];
    if (static_cast<int>(r.actions.size()) != r.motions)
      throw Error(ErrorKind::parse_error, where + ": action string length differs from motions");
    rep.runs.push_back(r);
  }
  if (!header) throw Error(ErrorKind::parse_error, "line " + std::to_string(n + 1) + ": missing report header");
  if (rep.runs.empty()) throw Error(ErrorKind::parse_error, "report has no runs");
  rep.scenario.n_runs = static_cast<int>(rep.runs.size());
  summarize(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Plots

namespace {

const char* kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else if (c == '"') out += "&quot;";
    else out += c;
  }
  return out;
}

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

}  // namespace

std::string plot_svg(const std::vector<std::pair<std::string, std::vector<MetricRow>>>& curves,
                     const std::vector<std::pair<std::string, EvalReport>>& reports, int window) {
  require(!curves.empty() || !reports.empty(), "plot: nothing to draw");
  const double W = 640, H = 360, L = 60, R = 20, T = 30, B = 50;
  std::ostringstream svg;
  const int panels = (curves.empty() ? 0 : 1) + (reports.empty() ? 0 : 1);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H * panels
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  double y0 = 0;
  auto frame = [&](const std::string& title, const std::string& ylabel) {
    svg << "<text x=\"" << W / 2 << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << y0 + H - B << "\" x2=\"" << W - R << "\" y2=\"" << y0 + H - B
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << y0 + T << "\" x2=\"" << L << "\" y2=\"" << y0 + H - B
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"14\" y=\"" << y0 + H / 2 << "\" transform=\"rotate(-90 14 " << y0 + H / 2
        << ")\" text-anchor=\"middle\">" << escape(ylabel) << "</text>\n";
  };

  if (!curves.empty()) {
    frame("grasp success, window " + std::to_string(window), "success rate");
    std::vector<std::vector<std::optional<double>>> series;
    std::size_t longest = 1;
    for (const auto& [label, rows] : curves) {
      series.push_back(grasp_success_window(rows, window));
      longest = std::max(longest, series.back().size());
    }
    const double pw = W - L - R, ph = H - T - B;
    for (int t = 0; t <= 4; ++t) {
      const double y = y0 + T + ph * (1.0 - t / 4.0);
      svg << "<text x=\"" << L - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << num(t / 4.0)
          << "</text>\n";
    }
    svg << "<text x=\"" << L + pw / 2 << "\" y=\"" << y0 + H - 12 << "\" text-anchor=\"middle\">actions (x"
        << window << ")</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
      const char* color = kSeriesColors[s % 6];
      std::string pts;
      auto flush = [&] {
        if (!pts.empty())
          svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts << "\"/>\n";
        pts.clear();
      };
      for (std::size_t i = 0; i < series[s].size(); ++i) {
        if (!series[s][i]) {
          flush();  // gaps break the line
          continue;
        }
        const double x = L + pw * (longest == 1 ? 0.5 : static_cast<double>(i) / (longest - 1));
        const double y = y0 + T + ph * (1.0 - *series[s][i]);
        pts += num(x) + "," + num(y) + " ";
        svg << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
      }
      flush();
      svg << "<text x=\"" << W - R - 4 << "\" y=\"" << y0 + T + 14 * (s + 1) << "\" text-anchor=\"end\" fill=\""
          << color << "\">" << escape(curves[s].first) << "</text>\n";
    }
    y0 += H;
  }

  if (!reports.empty()) {
    frame("evaluation", "task success / motions per 10");
    const double pw = W - L - R, ph = H - T - B;
    const double slot = pw / reports.size();
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const EvalReport& r = reports[i].second;
      const double bw = slot * 0.3;
      const double x = L + slot * i + slot * 0.15;
      const double hs = ph * r.task_success_rate;
      const double hm = ph * std::min(1.0, r.avg_motion_number.value_or(0.0) / 10.0);
      svg << "<rect x=\"" << num(x) << "\" y=\"" << num(y0 + T + ph - hs) << "\" width=\"" << num(bw)
          << "\" height=\"" << num(hs) << "\" fill=\"" << kSeriesColors[0] << "\"/>\n";
      svg << "<rect x=\"" << num(x + bw) << "\" y=\"" << num(y0 + T + ph - hm) << "\" width=\"" << num(bw)
          << "\" height=\"" << num(hm) << "\" fill=\"" << kSeriesColors[3] << "\"/>\n";
      svg << "<text x=\"" << num(x + bw) << "\" y=\"" << y0 + H - 30 << "\" text-anchor=\"middle\">"
          << escape(reports[i].first) << "</text>\n";
      svg << "<text x=\"" << num(x + bw / 2) << "\" y=\"" << num(y0 + T + ph - hs - 4) << "\" text-anchor=\"middle\">"
          << format_number(r.task_success_rate) << "</text>\n";
      svg << "<text x=\"" << num(x + 1.5 * bw) << "\" y=\"" << num(y0 + T + ph - hm - 4)
          << "\" text-anchor=\"middle\">"
          << (r.avg_motion_number ? format_number(*r.avg_motion_number) : std::string("-")) << "</text>\n";
    }
    svg << "<text x=\"" << W - R << "\" y=\"" << y0 + H - 12 << "\" text-anchor=\"end\"><tspan fill=\""
        << kSeriesColors[0] << "\">task success</tspan>  <tspan fill=\"" << kSeriesColors[3]
        << "\">avg motions</tspan></text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void plot_emit(const std::vector<std::string>& csv_paths, const std::string& out_path, int window) {
  require(!csv_paths.empty(), "plot: no input files");
  std::vector<std::pair<std::string, std::vector<MetricRow>>> curves;
  std::vector<std::pair<std::string, EvalReport>> reports;
  for (const std::string& path : csv_paths) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io_error, "cannot read " + path);
    std::string first;
    std::getline(in, first);
    in.clear();
    in.seekg(0);
    try {
      if (!first.empty() && first[0] == '#') {
        EvalReport rep = read_report(in);
        reports.emplace_back(std::string(to_string(rep.policy)), std::move(rep));
      } else {
        auto rows = read_metrics(in);
        if (rows.empty()) throw Error(ErrorKind::parse_error, "line 2: no rows");
        const auto slash = path.find_last_of('/');
        curves.emplace_back(slash == std::string::npos ? path : path.substr(slash + 1), std::move(rows));
      }
    } catch (const Error& e) {
      throw Error(e.kind(), path + ": " + e.what());
    }
  }
  std::ofstream out(out_path);
  if (!out) throw Error(ErrorKind::io_error, "cannot write " + out_path);
  out << plot_svg(curves, reports, window);
  if (!out) throw Error(ErrorKind::io_error, "write failed: " + out_path);
}

}  // namespace mpg
