#include "mergeforge/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mergeforge {

int worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("MERGEFORGE_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
}

namespace {

// Minimal persistent pool. parallel_for publishes a job (n, fn), workers pull
// indices from a shared counter and the caller participates too, so nested
// calls from a worker thread fall back to inline execution.
class Pool {
public:
    Pool() {
        int workers = worker_count() - 1;
        threads_.reserve(static_cast<size_t>(workers < 0 ? 0 : workers));
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(size_t n, const std::function<void(size_t)>& fn) {
        if (n == 0) return;
        if (threads_.empty() || n == 1 || busy_.exchange(true)) {
            for (size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_fn_ = &fn;
            job_n_ = n;
            next_ = 0;
            pending_ = n;
            ++generation_;
        }
        cv_.notify_all();
        drain();
        {
            std::unique_lock<std::mutex> lk(mu_);
            done_cv_.wait(lk, [this] { return pending_ == 0; });
            job_fn_ = nullptr;
        }
        busy_.store(false);
        if (first_error_) {
            auto e = first_error_;
            first_error_ = nullptr;
            std::rethrow_exception(e);
        }
    }

private:
    void drain() {
        for (;;) {
            size_t i = next_.fetch_add(1);
            if (i >= job_n_) break;
            run_one(i);
        }
    }

    void run_one(size_t i) {
        try {
            (*job_fn_)(i);
        } catch (...) {
            std::lock_guard<std::mutex> lk(mu_);
            if (!first_error_) first_error_ = std::current_exception();
        }
        if (pending_.fetch_sub(1) == 1) {
            std::lock_guard<std::mutex> lk(mu_);
            done_cv_.notify_all();
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            for (;;) {
                size_t i = next_.fetch_add(1);
                if (i >= job_n_) break;
                run_one(i);
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(size_t)>* job_fn_ = nullptr;
    size_t job_n_ = 0;
    std::atomic<size_t> next_{0};
    std::atomic<size_t> pending_{0};
    std::atomic<bool> busy_{false};
    uint64_t generation_ = 0;
    bool stop_ = false;
    std::exception_ptr first_error_;
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    pool().run(n, fn);
}

}  // namespace mergeforge
