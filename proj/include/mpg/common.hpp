#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpg {

enum class ErrorKind {
  contract_violation,
  scene_infeasible,
  target_grasped,
  target_absent,
  numerical_divergence,
  stage_order,
  calibration_insufficient,
  parse_error,
  io_error,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Throws contract_violation when the condition does not hold.
void require(bool condition, const std::string& what);

using Rng = std::mt19937_64;

// Uniform double in [0, 1) from the top 53 bits; independent of the
// standard library's distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  require(n > 0, "uniform_index: empty range");
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

// splitmix64 finalizer, used to derive independent child seeds.
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream);

/// Dense row-major 2D grid.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  bool inside(int r, int c) const { return r >= 0 && c >= 0 && r < rows && c < cols; }
  bool operator==(const Grid&) const = default;
};

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
};

}  // namespace mpg
