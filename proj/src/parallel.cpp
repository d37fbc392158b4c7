#include "p2i/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace p2i {
namespace {

thread_local bool t_inside_parallel = false;

std::size_t default_threads() {
  if (const char* env = std::getenv("P2I_THREADS")) {
    try {
      long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

class Pool {
 public:
  explicit Pool(std::size_t workers) {
    for (std::size_t i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::size_t size() const { return threads_.size(); }

  void run(std::size_t n, const std::function<void(std::size_t)>& body) {
    std::unique_lock lock(mu_);
    body_ = &body;
    total_ = n;
    next_.store(0);
    pending_ = threads_.size();
    error_ = nullptr;
    ++generation_;
    cv_.notify_all();
    lock.unlock();

    drain();

    lock.lock();
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void drain() {
    t_inside_parallel = true;
    for (;;) {
      std::size_t i = next_.fetch_add(1);
      if (i >= total_) break;
      try {
        (*body_)(i);
      } catch (...) {
        std::lock_guard lock(mu_);
        if (!error_) error_ = std::current_exception();
      }
    }
    t_inside_parallel = false;
  }

  void worker() {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lock.unlock();
      drain();
      lock.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t)>* body_ = nullptr;
  std::size_t total_ = 0;
  std::atomic<std::size_t> next_{0};
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  std::exception_ptr error_;
  bool stop_ = false;
};

std::mutex g_pool_mu;
std::size_t g_threads = 0;
std::unique_ptr<Pool> g_pool;

}  // namespace

std::size_t thread_count() {
  std::lock_guard lock(g_pool_mu);
  if (g_threads == 0) g_threads = default_threads();
  return g_threads;
}

void set_thread_count(std::size_t n) {
  std::lock_guard lock(g_pool_mu);
  g_threads = std::max<std::size_t>(1, n);
  g_pool.reset();
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  std::size_t threads = thread_count();
  if (n <= 1 || threads <= 1 || t_inside_parallel) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  Pool* pool = nullptr;
  {
    std::lock_guard lock(g_pool_mu);
    if (!g_pool) g_pool = std::make_unique<Pool>(g_threads - 1);
    pool = g_pool.get();
  }
  // One caller at a time owns the pool; concurrent top-level callers run inline.
  static std::mutex run_mu;
  std::unique_lock run_lock(run_mu, std::try_to_lock);
  if (!run_lock.owns_lock()) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  pool->run(n, body);
}

}  // namespace p2i
