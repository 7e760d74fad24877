#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace msm {

// Tiny persistent worker pool. Work is split into fixed contiguous chunks, so
// results are bitwise identical for any thread count as long as chunks write
// disjoint outputs. Each job lives in a shared_ptr; a worker that wakes up
// late only ever sees an exhausted chunk counter, never a stale function.
class ThreadPool {
    struct Job {
        std::function<void(std::int64_t, std::int64_t)> fn;
        std::int64_t n = 0;
        std::int64_t grain = 1;
        std::int64_t chunks = 0;
        std::atomic<std::int64_t> next{0};
        std::atomic<std::int64_t> pending{0};
    };

  public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void set_threads(int n) {
        std::lock_guard<std::mutex> lk(api_mutex_);
        stop_workers();
        threads_ = n < 1 ? 1 : n;
        start_workers();
    }

    int threads() const { return threads_; }

    // fn(chunk_begin, chunk_end); chunks are contiguous ranges of [0, n)
    void for_range(std::int64_t n, std::int64_t grain, std::function<void(std::int64_t, std::int64_t)> fn) {
        if (n <= 0) return;
        if (grain < 1) grain = 1;
        if (threads_ == 1 || n <= grain || in_region()) {
            fn(0, n);
            return;
        }
        std::lock_guard<std::mutex> lk(api_mutex_);
        auto job = std::make_shared<Job>();
        job->fn = std::move(fn);
        job->n = n;
        job->grain = grain;
        job->chunks = (n + grain - 1) / grain;
        job->pending.store(job->chunks);
        {
            std::lock_guard<std::mutex> g(mutex_);
            current_ = job;
        }
        cv_.notify_all();
        run_job(*job);
        {
            std::unique_lock<std::mutex> g(mutex_);
            done_cv_.wait(g, [&] { return job->pending.load() == 0; });
            current_.reset();
        }
        cv_.notify_all();
    }

    ~ThreadPool() { stop_workers(); }

  private:
    ThreadPool() : threads_(static_cast<int>(std::thread::hardware_concurrency())) {
        if (threads_ < 1) threads_ = 1;
        start_workers();
    }

    void start_workers() {
        stopping_ = false;
        for (int i = 1; i < threads_; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> g(mutex_);
            stopping_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
        workers_.clear();
        stopping_ = false;
    }

    void worker_loop() {
        for (;;) {
            std::shared_ptr<Job> job;
            {
                std::unique_lock<std::mutex> g(mutex_);
                cv_.wait(g, [&] { return stopping_ || current_ != nullptr; });
                if (stopping_) return;
                job = current_;
            }
            run_job(*job);
            // spin-free idle: wait until this job is retired before sleeping again
            std::unique_lock<std::mutex> g(mutex_);
            cv_.wait(g, [&] { return stopping_ || current_ != job; });
            if (stopping_) return;
        }
    }

    // nested parallel_for (from inside a chunk) runs inline
    static bool& in_region() {
        thread_local bool flag = false;
        return flag;
    }

    void run_job(Job& job) {
        in_region() = true;
        for (;;) {
            std::int64_t c = job.next.fetch_add(1);
            if (c >= job.chunks) break;
            std::int64_t lo = c * job.grain;
            std::int64_t hi = lo + job.grain < job.n ? lo + job.grain : job.n;
            job.fn(lo, hi);
            if (job.pending.fetch_sub(1) == 1) {
                std::lock_guard<std::mutex> g(mutex_);
                done_cv_.notify_all();
            }
        }
        in_region() = false;
    }

    int threads_;
    std::vector<std::thread> workers_;
    std::mutex api_mutex_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    bool stopping_ = false;
    std::shared_ptr<Job> current_;
};

inline void parallel_for(std::int64_t n, std::int64_t grain, std::function<void(std::int64_t, std::int64_t)> fn) {
    ThreadPool::instance().for_range(n, grain, std::move(fn));
}

inline void set_worker_threads(int n) { ThreadPool::instance().set_threads(n); }

}  // namespace msm
