#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace xshift {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t s = base ^ (0x9e3779b97f4a7c15ull + stream * 0xbf58476d1ce4e5b9ull);
    splitmix64(s);
    return splitmix64(s);
}

// FNV-1a, used for id-based dataset splits.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact by the
// standard); all value transforms are done by hand so that streams do not
// depend on library-specific distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform index in [0, n). Modulo bias is irrelevant at the sizes used here.
    std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller, cached pair.
    double normal(double mean = 0.0, double sigma = 1.0) {
        if (has_cached_) {
            has_cached_ = false;
            return mean + sigma * cached_;
        }
        double u1 = 1.0 - uniform01();  // (0, 1]
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return mean + sigma * r * std::cos(theta);
    }

  private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace xshift
