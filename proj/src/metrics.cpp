#include "mpg/metrics.hpp"

#include "mpg/common.hpp"

#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace mpg {

std::string format_number(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

void write_metrics(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << kMetricsHeader << '\n';
  for (const MetricRow& r : rows)
    out << r.stage << ',' << r.episode << ',' << r.step << ',' << r.action_kind << ',' << r.reward << ',' << r.loss
        << ',' << r.q_max << ',' << r.epsilon << ',' << r.success << '\n';
}

namespace {

int parse_int(const std::string& s, int line, const char* field) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw Error(ErrorKind::parse_error, "line " + std::to_string(line) + ": bad " + field + " '" + s + "'");
  return v;
}

void check_number(const std::string& s, int line, const char* field) {
  if (s.empty()) return;
  if (s == kGapMarker) return;
  std::istringstream is(s);
  double d;
  if (!(is >> d) || !is.eof())
    throw Error(ErrorKind::parse_error, "line " + std::to_string(line) + ": bad " + field + " '" + s + "'");
}

}  // namespace

std::vector<MetricRow> read_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::parse_error, "line 1: empty metrics file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw Error(ErrorKind::parse_error, "line 1: unexpected header");
  std::vector<MetricRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 9)
      throw Error(ErrorKind::parse_error, "line " + std::to_string(n) + ": expected 9 fields, got " +
                                              std::to_string(f.size()));
    MetricRow r;
    r.stage = parse_int(f[0], n, "stage");
    r.episode = parse_int(f[1], n, "episode");
    r.step = parse_int(f[2], n, "step");
    r.action_kind = f[3];
    if (r.action_kind.empty()) throw Error(ErrorKind::parse_error, "line " + std::to_string(n) + ": empty action_kind");
    r.reward = f[4];
    r.loss = f[5];
    r.q_max = f[6];
    r.epsilon = f[7];
    r.success = f[8];
    check_number(r.reward, n, "reward");
    check_number(r.loss, n, "loss");
    check_number(r.q_max, n, "q_max");
    check_number(r.epsilon, n, "epsilon");
    check_number(r.success, n, "success");
    rows.push_back(std::move(r));
  }
  return rows;
}

bool is_summary(const MetricRow& row) { return row.action_kind.starts_with("window="); }

std::vector<std::optional<double>> grasp_success_window(const std::vector<MetricRow>& rows, int window) {
  require(window > 0, "grasp_success_window: window must be positive");
  std::vector<std::optional<double>> out;
  int count = 0, attempts = 0, hits = 0;
  for (const MetricRow& r : rows) {
    if (is_summary(r)) continue;
    if (r.action_kind == "grasp") {
      ++attempts;
      hits += r.success == "1";
    }
    if (++count == window) {
      out.push_back(attempts ? std::optional<double>(static_cast<double>(hits) / attempts) : std::nullopt);
      count = attempts = hits = 0;
    }
  }
  return out;
}

std::optional<double> recent_grasp_success(const std::vector<MetricRow>& rows, int n) {
  int attempts = 0, hits = 0;
  for (auto it = rows.rbegin(); it != rows.rend() && attempts < n; ++it) {
    if (it->action_kind != "grasp") continue;
    ++attempts;
    hits += it->success == "1";
  }
  if (attempts == 0) return std::nullopt;
  return static_cast<double>(hits) / attempts;
}

}  // namespace mpg
