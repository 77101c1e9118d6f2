#ifndef GPTEB_COMMON_HPP_
#define GPTEB_COMMON_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gpteb {

inline constexpr double kPi = 3.14159265358979323846;

// Error taxonomy. UsageError: caller broke a precondition. DomainError: a
// query left the region an object is defined on. NumericalError: a
// computation failed (non-PD matrix, diverging solve). InfeasibleError: a
// requested set/solution does not exist.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

class InfeasibleError : public Error {
 public:
  explicit InfeasibleError(const std::string& msg) : Error(msg) {}
};

// Normalize an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// mappings below avoid std::*_distribution, whose output is
// implementation-defined, so streams reproduce bit-exactly everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection-free modulo is fine here; n is tiny relative to 2^64.
    return engine_() % n;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * kPi * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  // Derive an independent stream, e.g. one per trial.
  Rng spawn(std::uint64_t stream) {
    std::uint64_t z = seed_mix_ + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return Rng((z ^ (z >> 31)) ^ engine_());
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_mix_ = 0x243F6A8885A308D3ull;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Chunked parallel loop over [0, n). fn(begin, end) must be safe to run
// concurrently on disjoint ranges. Chunk boundaries depend only on n and the
// worker count, and results are written to disjoint slots, so the output is
// identical regardless of scheduling.
template <typename Fn>
void parallel_for(std::size_t n, const Fn& fn, unsigned max_threads = 0) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (max_threads > 0 && max_threads < hw) hw = max_threads;
  if (hw <= 1 || n < 4096) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + hw - 1) / hw;
  std::vector<std::thread> workers;
  workers.reserve(hw);
  for (unsigned t = 0; t < hw; ++t) {
    const std::size_t b = std::min(n, t * chunk);
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    workers.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& w : workers) w.join();
}

// Formatting for CSV output. %.17g round-trips doubles exactly.
inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

// FNV-1a 64-bit, used for artifact content hashes in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace gpteb

#endif  // GPTEB_COMMON_HPP_
