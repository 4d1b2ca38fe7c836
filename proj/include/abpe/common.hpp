#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace abpe {

/// Invalid values or violated preconditions (bad alphabet, mismatched dims, ...).
class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed file contents.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Filesystem failures (missing file, short write, ...).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Global switch for OpenMP kernels. Serial and parallel paths compute each
// output element identically, so results are bit-equal either way; the switch
// exists for the kernel benchmark and for single-threaded debugging.
inline std::atomic<bool>& parallel_flag() {
    static std::atomic<bool> flag{true};
    return flag;
}
inline bool parallel_enabled() { return parallel_flag().load(std::memory_order_relaxed); }
inline void set_parallel_enabled(bool on) { parallel_flag().store(on, std::memory_order_relaxed); }

/// Deterministic sampling helpers over std::mt19937_64.
///
/// The std <random> distributions are implementation-defined, so every draw
/// here is spelled out explicitly; identical seeds give identical streams on
/// any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n), n >= 1.
    std::uint64_t uniform_below(std::uint64_t n) {
        // Rejection sampling on the top bits keeps the distribution exact.
        const std::uint64_t limit = n * (UINT64_MAX / n);
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return x % n;
    }

    /// Geometric on {1, 2, ...} with the given mean (mean >= 1).
    std::uint32_t geometric(double mean) {
        if (mean <= 1.0) return 1;
        const double p = 1.0 / mean;
        const double u = uniform01();
        const double r = std::floor(std::log1p(-u) / std::log1p(-p));
        if (!(r >= 0.0)) return 1;
        if (r > 1e6) return 1000001;  // tail clamp, ~never hit at sane means
        return static_cast<std::uint32_t>(r) + 1;
    }

    /// Standard normal via Box-Muller (one value per call, no cached state).
    double normal() {
        double u1 = uniform01();
        const double u2 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::mt19937_64 eng_;
};

/// 64-bit mix used wherever a stable hash of small integers is needed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace abpe
