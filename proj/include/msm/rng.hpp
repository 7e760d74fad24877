#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace msm {

// Deterministic RNG with hand-rolled distributions. std::*_distribution output
// is implementation-defined, which would break golden files across toolchains,
// so we only rely on the raw generator.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // splitmix warmup so nearby seeds decorrelate
        for (int i = 0; i < 4; ++i) next_u64();
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, no spare caching so call order stays obvious
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Fisher-Yates; used for sampling without replacement
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t state_;
};

// Derives an independent stream seed from a root seed and stream ids, so
// per-scene / per-epoch randomness is stable under any execution order.
inline std::uint64_t split_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    Rng r(root ^ (a * 0xd1342543de82ef95ull) ^ (b * 0xaf251af3b0f025b5ull) ^ (c * 0x9e3779b97f4a7c15ull));
    return r.next_u64();
}

}  // namespace msm
