#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace funcdiff {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr std::string_view kVersion = "funcdiff 0.1.0";

// Shapes or grids that do not line up.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An operator has no retained spectrum where an inverse is needed.
struct SingularOperatorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/inf in a drift, a loss, or a path; also underflowed responsibilities.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Monte-Carlo estimate built on too few effective samples.
struct UnreliableEstimateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Random stream keyed by (seed, tag, index...). Streams with different keys
/// are statistically independent, so per-trajectory streams make results
/// independent of how work is split across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  static Rng stream(std::uint64_t seed, std::string_view tag,
                    std::uint64_t i = 0, std::uint64_t j = 0) {
    std::uint64_t k = splitmix64(seed ^ fnv1a64(tag));
    k = splitmix64(k ^ splitmix64(i + 0x51ed2701ULL));
    k = splitmix64(k ^ splitmix64(j + 0x2545f491ULL));
    return Rng(k);
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t next() { return engine_(); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Worker count used by parallel loops; 0 means hardware concurrency.
inline unsigned& thread_cap() {
  static unsigned cap = 0;
  return cap;
}

/// Runs fn(begin, end) over contiguous chunks of [0, n). Chunk boundaries only
/// affect scheduling; callers key randomness per item, not per chunk.
inline void parallel_chunks(std::size_t n,
                            const std::function<void(std::size_t, std::size_t)>& fn) {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  unsigned workers = thread_cap() == 0 ? hw : std::min(hw, thread_cap());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(n / 64, 1)));
  if (workers <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, w, b, e] {
      try {
        fn(b, e);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace funcdiff
