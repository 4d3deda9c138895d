#pragma once

// Deterministic parallel map: task i always writes slot i, so results do
// not depend on the number of workers or on scheduling.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace elfqr {

/// Worker cap from ELFQR_THREADS, else the hardware concurrency.
inline unsigned worker_count(std::size_t tasks) {
  unsigned w = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ELFQR_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) w = static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(w, tasks)));
}

/// Runs fn(i) for i in [0, n). Exceptions are captured per task and
/// returned; a null entry means the task succeeded.
template <class F>
std::vector<std::exception_ptr> parallel_for(std::size_t n, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const unsigned workers = worker_count(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
    return errors;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) run(i);
    });
  }
  for (auto& th : pool) th.join();
  return errors;
}

inline std::string exception_message(const std::exception_ptr& e) {
  if (!e) return {};
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

}  // namespace elfqr
