#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dpt {

// Error hierarchy. CLI maps these to process exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Threading. Ops may split work across threads, but every output element is
// produced by exactly one thread with a fixed reduction order, so results are
// bitwise identical for any thread count.

inline int default_thread_count() {
  if (const char* env = std::getenv("DPT_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> n{default_thread_count()};
  return n;
}

inline int thread_count() { return thread_count_slot().load(); }

inline void set_thread_count(int n) { thread_count_slot().store(n < 1 ? 1 : n); }

// Runs fn(begin, end) over disjoint chunks of [0, total). `grain` is the
// minimum number of items per thread; small workloads stay single-threaded.
template <typename F>
void parallel_for(std::size_t total, std::size_t grain, F&& fn) {
  if (total == 0) return;
  std::size_t want = grain == 0 ? total : total / std::max<std::size_t>(grain, 1);
  std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(thread_count()),
                                               std::max<std::size_t>(want, 1));
  nthreads = std::min(nthreads, total);
  if (nthreads <= 1) {
    fn(std::size_t{0}, total);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nthreads - 1);
  std::size_t chunk = (total + nthreads - 1) / nthreads;
  for (std::size_t t = 1; t < nthreads; ++t) {
    std::size_t b = t * chunk;
    std::size_t e = std::min(total, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(total, chunk));
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Opt-in NaN/Inf scan after every op. Off by default (and in benchmarks).

inline std::atomic<bool>& finite_check_slot() {
  static std::atomic<bool> on{false};
  return on;
}

inline bool finite_checks_enabled() { return finite_check_slot().load(); }

inline void set_finite_checks(bool on) { finite_check_slot().store(on); }

template <typename T>
void scan_finite(const std::vector<T>& values, const char* op_name) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << op_name << ": non-finite value at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

// ---------------------------------------------------------------------------
// Reproducible init helpers.

// Normal(0, std) resampled until within [-2*std, 2*std].
template <typename T>
T truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  double v = dist(rng);
  while (std::abs(v) > 2.0 * stddev) v = dist(rng);
  return static_cast<T>(v);
}

}  // namespace dpt
