#pragma once

#include <cmath>
#include <cstdint>

namespace polyboltz {

/// Counter-keyed random stream: the state is a pure function of
/// (seed, key_a, key_b), so any (node, sample) pair regenerates the exact
/// same draw sequence no matter which thread runs it or in which order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t key_a, std::uint64_t key_b) {
        state_ = mix(seed ^ 0x8a5cd789635d2dffULL);
        state_ = mix(state_ + 0x9e3779b97f4a7c15ULL * (key_a + 1));
        state_ = mix(state_ + 0xbf58476d1ce4e5b9ULL * (key_b + 1));
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    /// Advance the stream as if k draws had been taken (O(1)).
    void skip(std::uint64_t k) { state_ += 0x9e3779b97f4a7c15ULL * k; }

    /// Uniform on [0, 1).
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller (pairs cached).
    double next_normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = next_unit();
        double u2 = next_unit();
        while (u1 <= 0.0) u1 = next_unit();
        double rad = std::sqrt(-2.0 * std::log(u1));
        double ang = 6.283185307179586476925286766559 * u2;
        cached_ = rad * std::sin(ang);
        have_cached_ = true;
        return rad * std::cos(ang);
    }

    /// Gamma(shape) with unit scale, Marsaglia-Tsang; shape > 0.
    double next_gamma(double shape) {
        if (shape < 1.0) {
            double u = next_unit();
            while (u <= 0.0) u = next_unit();
            return next_gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = next_normal();
            double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            double vv = t * t * t;
            double u = next_unit();
            double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2) return d * vv;
            if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - vv + std::log(vv))) return d * vv;
        }
    }

    double next_beta(double a, double b) {
        double x = next_gamma(a);
        double y = next_gamma(b);
        double s = x + y;
        return s > 0.0 ? x / s : 0.5;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace polyboltz
