#include "mpg/common.hpp"

namespace mpg {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::contract_violation: return "contract-violation";
    case ErrorKind::scene_infeasible: return "scene-infeasible";
    case ErrorKind::target_grasped: return "target-grasped";
    case ErrorKind::target_absent: return "target-absent";
    case ErrorKind::numerical_divergence: return "numerical-divergence";
    case ErrorKind::stage_order: return "stage-order";
    case ErrorKind::calibration_insufficient: return "calibration-insufficient";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

void require(bool condition, const std::string& what) {
  if (!condition) throw Error(ErrorKind::contract_violation, what);
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace mpg
