#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

namespace sivqr {

/// Random stream for task `index` under a given seed. Streams depend only on
/// (seed, index), so results do not depend on how tasks are scheduled.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x5eedu};
  return std::mt19937_64(seq);
}

/// Uniform draw on [0, 1) with 53 random bits.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double standard_exponential(std::mt19937_64& rng) {
  return -std::log1p(-uniform01(rng));
}

/// Standard normal draw by the polar method; deterministic on every platform
/// given the stream.
inline double standard_normal(std::mt19937_64& rng) {
  for (;;) {
    const double a = 2.0 * uniform01(rng) - 1.0;
    const double b = 2.0 * uniform01(rng) - 1.0;
    const double s = a * a + b * b;
    if (s > 0.0 && s < 1.0) return a * std::sqrt(-2.0 * std::log(s) / s);
  }
}

/// Worker count from SIVQR_THREADS, else the hardware concurrency.
inline unsigned default_workers() {
  if (const char* env = std::getenv("SIVQR_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, count) on up to `workers` threads. The first
/// exception thrown by any task is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t count, unsigned workers, Fn&& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(count)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work);
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace sivqr
