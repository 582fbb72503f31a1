#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace maskdoor {

// Configuration / contract violation detectable before any work is done.
// The CLI maps this to its "validation" exit code.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss during training; carries the diagnostic checkpoint path.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& msg, std::string checkpoint)
        : std::runtime_error(msg), checkpoint_path(std::move(checkpoint)) {}
    std::string checkpoint_path;
};

// Deterministic counter-based RNG (splitmix64 core). std::mt19937 engines are
// portable but the standard distributions are not; every draw here is fully
// specified so runs are byte-reproducible across compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        // Rejection sampling keeps the draw exactly uniform.
        uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; consumes two draws per pair, caches the second.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Named substream derivation: hash the parent seed with a label and
    // indices so components (poison/train/strip/...) draw independently.
    Rng substream(const std::string& name, uint64_t a = 0, uint64_t b = 0) const {
        uint64_t h = 0xcbf29ce484222325ULL ^ state_;
        for (char c : name) {
            h ^= uint64_t(uint8_t(c));
            h *= 0x100000001b3ULL;
        }
        h ^= a + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xff51afd7ed558ccdULL;
        h ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xc4ceb9fe1a85ec53ULL;
        return Rng(h);
    }

    uint64_t state() const { return state_; }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace maskdoor
