#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace meanflow {

/// Thrown when a computation produces or receives non-finite numbers.
/// The CLI maps this to a distinct exit code from configuration errors.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Discrete condition: a class index in [0, K) or the learned null token.
struct Condition {
  int index = 0;
  bool is_null = false;

  static Condition cls(int k) { return Condition{k, false}; }
  static Condition null() { return Condition{0, true}; }

  friend bool operator==(const Condition& a, const Condition& b) {
    return a.is_null == b.is_null && (a.is_null || a.index == b.index);
  }
};

inline constexpr double kPi = 3.14159265358979323846;

/// Seeded RNG with explicit variate mappings. All draws go through
/// mt19937_64 plus our own uniform/normal transforms, so sequences do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform double in [0, 1).
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    spare_ = radius * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return radius * std::cos(2.0 * kPi * u2);
  }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % un;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Logistic map onto (0, 1).
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace meanflow
