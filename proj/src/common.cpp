#include "gpdssm/common.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gpdssm {

namespace {
std::atomic<int> g_threads{0};

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace

void set_thread_count(int n) { g_threads = std::max(0, n); }

int thread_count() {
    int n = g_threads.load();
    if (n > 0) return n;
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(long n, const std::function<void(long)>& body) {
    const int workers = static_cast<int>(std::min<long>(thread_count(), n));
    if (workers <= 1) {
        for (long i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<long> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        for (long i = next++; i < n; i = next++) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(splitmix(seed)), static_cast<std::uint32_t>(splitmix(seed) >> 32),
                      static_cast<std::uint32_t>(splitmix(stream ^ 0x5bd1e995ULL)),
                      static_cast<std::uint32_t>(splitmix(stream) >> 32)};
    return std::mt19937_64(seq);
}

double bbox_diagonal(const Points& p) {
    if (p.rows() == 0) return 0.0;
    return (p.colwise().maxCoeff() - p.colwise().minCoeff()).norm();
}

}  // namespace gpdssm
