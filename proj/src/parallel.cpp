#include "cdtta/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cdtta {

std::size_t thread_budget() {
  static const std::size_t budget = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CDTTA_THREADS")) {
      try {
        long v = std::stol(env);
        if (v > 0) return std::min<std::size_t>(static_cast<std::size_t>(v), hw);
      } catch (...) {
      }
    }
    return hw;
  }();
  return budget;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  std::size_t workers = std::min(thread_budget(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < count; i += workers) body(i);
  };
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& t : pool) t.join();
}

}  // namespace cdtta
