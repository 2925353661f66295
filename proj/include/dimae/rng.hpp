#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dimae {

/// Mixes a root seed with a named substream and optional indices. All randomness
/// in a run descends from one root seed through this function.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                          std::initializer_list<std::uint64_t> indices = {});

/// Seedable random source passed explicitly to every stochastic operation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  /// Normal(0, stddev) truncated to [-2 stddev, 2 stddev].
  double truncated_normal(double stddev);
  double gamma(double shape);
  double beta(double a, double b);
  std::vector<double> dirichlet(double alpha, int n);

  template <typename It>
  void shuffle(It first, It last) {
    // Fisher-Yates over our own uniform_int so results do not depend on std::shuffle.
    auto n = static_cast<int>(last - first);
    for (int i = n - 1; i > 0; --i) std::swap(first[i], first[uniform_int(0, i)]);
  }

  template <typename Container>
  void shuffle(Container& c) {
    shuffle(c.begin(), c.end());
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dimae
