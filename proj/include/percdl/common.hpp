#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace percdl {

using Index = Eigen::Index;

// Dense arrays are stored row-major so that the P channel values of one time
// step are contiguous (atoms are short, per-sample channel products dominate).
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline constexpr const char* kVersion = "0.1.0";

// Thrown on malformed inputs (bad shapes, invalid configs, unreadable files).
class InvalidInput : public std::runtime_error {
 public:
  explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a numerical precondition is violated (a outside Theta, t
// outside [0,1], non-orthogonal rotation, ...).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64 step; used to derive independent per-stream seeds so results do
// not depend on worker count or evaluation order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline unsigned resolve_workers(unsigned requested, std::size_t n) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  unsigned w = requested == 0 ? hw : requested;
  if (static_cast<std::size_t>(w) > n) w = static_cast<unsigned>(n);
  return w == 0 ? 1 : w;
}

// Index-parallel loop. Each index must write only its own output slot;
// reductions stay with the caller, which keeps results independent of the
// worker count.
template <typename Body>
void parallel_for(std::size_t n, unsigned workers, Body&& body) {
  if (n == 0) return;
  unsigned w = resolve_workers(workers, n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        break;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (unsigned t = 0; t < w; ++t) pool.emplace_back(run);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace percdl
