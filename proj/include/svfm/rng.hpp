#pragma once

#include <cstdint>
#include <random>

namespace svfm {

/// Seeded generator whose entire state is the engine, so copying an Rng
/// snapshots it exactly. Draws never cache values between calls (unlike
/// std::normal_distribution), which keeps restored snapshots replayable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform on the open interval (0, 1).
  double uniform() {
    // 53 random bits, shifted off zero.
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  double gumbel();
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Independent stream seed for (master, stream) pairs, e.g. per instance or per epoch.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

}  // namespace svfm
