#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace gradflow {

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Deterministic counter-free generator: xoshiro256++ seeded through
// splitmix64 from (seed, stream). Identical (seed, stream) pairs produce
// identical sequences on every platform and under any thread count, since
// each worker owns its own instance.
class SeededRng {
  public:
    struct State {
        uint64_t seed = 0;
        uint64_t stream = 0;
        uint64_t s[4] = {0, 0, 0, 0};
        bool has_spare = false;
        double spare = 0.0;
    };

    SeededRng() : SeededRng(0, 0) {}

    SeededRng(uint64_t seed, uint64_t stream) {
        st_.seed = seed;
        st_.stream = stream;
        uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
        for (auto& s : st_.s) s = splitmix64(x);
        // all-zero state is invalid for xoshiro
        if ((st_.s[0] | st_.s[1] | st_.s[2] | st_.s[3]) == 0) st_.s[0] = 1;
    }

    // Derives an independent stream from a purpose tag and an index.
    SeededRng derive(std::string_view tag, uint64_t index = 0) const {
        uint64_t h = fnv1a64(tag);
        h = fnv1a64(&index, sizeof index, h);
        h = fnv1a64(&st_.stream, sizeof st_.stream, h);
        return SeededRng(st_.seed, h);
    }

    uint64_t next_u64() {
        uint64_t* s = st_.s;
        const uint64_t result = rotl(s[0] + s[3], 23) + s[0];
        const uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); n >= 1. Rejection keeps it unbiased.
    uint64_t uniform_below(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Standard normal draw (Box-Muller; the spare keeps pairs cheap).
    double normal() {
        if (st_.has_spare) {
            st_.has_spare = false;
            return st_.spare;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        st_.spare = r * std::sin(a);
        st_.has_spare = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = size_t(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    const State& state() const { return st_; }
    void set_state(const State& s) { st_ = s; }
    uint64_t seed() const { return st_.seed; }
    uint64_t stream() const { return st_.stream; }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    State st_;
};

} // namespace gradflow
