#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace exact {

// Deterministic random stream. All randomness in the project flows from a
// single root seed through named sub-streams ("data", "init", "dropout", ...)
// so each component can be reproduced in isolation. The generator and the
// distributions are implemented here rather than taken from <random> because
// the standard leaves distribution algorithms unspecified; file-level
// reproducibility requires pinning them.
class Rng {
 public:
  Rng(std::uint64_t root_seed, const std::string& stream, std::uint64_t index = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  // Marsaglia polar method.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over a byte range; used for provenance hashes in sidecar files.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace exact
