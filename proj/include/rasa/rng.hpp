#pragma once
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "rasa/errors.hpp"

namespace rasa {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic generator with explicit stream derivation. All randomness in
// the pipeline flows through this type so that identical seeds give identical
// byte streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // warm up so that nearby seeds decorrelate
        splitmix64(state_);
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        if (n <= 0) throw NumericError("Rng::uniform_int: n must be positive");
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    double normal() {
        // Box-Muller; u1 in (0,1] keeps the log finite
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double exponential(double rate) {
        if (!(rate > 0.0)) throw NumericError("Rng::exponential: rate must be positive");
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        return -std::log(u1) / rate;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent substream named by a label; drawing from a fork never
    // disturbs the parent stream.
    Rng fork(std::string_view label) const {
        std::uint64_t s = state_ ^ fnv1a64(label);
        return Rng(s);
    }

    Rng fork(std::uint64_t tag) const {
        std::uint64_t s = state_;
        std::uint64_t mixed = splitmix64(s) ^ (tag * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
        return Rng(mixed);
    }

private:
    std::uint64_t state_;
};

}  // namespace rasa
