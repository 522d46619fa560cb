// Shared helpers for unit and acceptance tests: finite-difference oracles and
// reference field constructors used to cross-check library results.
#pragma once

#include <array>
#include <cmath>
#include <functional>

#include "polyboltz/kinematics.hpp"
#include "polyboltz/phase_space.hpp"
#include "polyboltz/rng.hpp"

namespace testsupport {

inline polyboltz::Vec3 random_unit(polyboltz::CounterRng& rng) {
    double z = 2.0 * rng.next_unit() - 1.0;
    double phi = 2.0 * 3.14159265358979323846 * rng.next_unit();
    double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    return {s * std::cos(phi), s * std::sin(phi), z};
}

/// 4x4 determinant by cofactor expansion (fine at this size).
inline double det4(const std::array<std::array<double, 4>, 4>& m) {
    auto det3 = [](double a, double b, double c, double d, double e, double f, double g,
                   double h, double i) {
        return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    };
    double out = 0.0;
    for (int col = 0; col < 4; ++col) {
        std::array<double, 9> sub;
        int q = 0;
        for (int rr = 1; rr < 4; ++rr)
            for (int cc = 0; cc < 4; ++cc) {
                if (cc == col) continue;
                sub[q++] = m[rr][cc];
            }
        double minor = det3(sub[0], sub[1], sub[2], sub[3], sub[4], sub[5], sub[6], sub[7], sub[8]);
        out += ((col % 2 == 0) ? 1.0 : -1.0) * m[0][col] * minor;
    }
    return out;
}

/// Equilibrium-shaped node data: C * I^alpha * exp(-m|v-u|^2/(2T) - I/Ti).
inline polyboltz::DistributionField maxwellian_field(const polyboltz::PhaseGrid& grid,
                                                     double alpha, double m, double T, double Ti,
                                                     const polyboltz::Vec3& u = {0, 0, 0},
                                                     double scale = 1.0) {
    polyboltz::DistributionField f(grid);
    for (int i = 0; i < grid.Nv; ++i)
        for (int j = 0; j < grid.Nv; ++j)
            for (int k = 0; k < grid.Nv; ++k) {
                const double dx = grid.v_node(i) - u[0];
                const double dy = grid.v_node(j) - u[1];
                const double dz = grid.v_node(k) - u[2];
                const double ev = std::exp(-m * (dx * dx + dy * dy + dz * dz) / (2.0 * T));
                for (int l = 0; l < grid.NI; ++l) {
                    const double I = grid.I_node(l);
                    f.a[grid.index(i, j, k, l)] =
                        scale * ev * std::pow(I, alpha) * std::exp(-I / Ti);
                }
            }
    return f;
}

/// Two drifting bumps with distinct internal temperatures (generic
/// out-of-equilibrium data).
inline polyboltz::DistributionField two_bump_field(const polyboltz::PhaseGrid& grid, double alpha,
                                                   double m) {
    polyboltz::DistributionField f(grid);
    const polyboltz::Vec3 c1{1.2, 0.4, -0.3}, c2{-1.1, -0.6, 0.5};
    for (int i = 0; i < grid.Nv; ++i)
        for (int j = 0; j < grid.Nv; ++j)
            for (int k = 0; k < grid.Nv; ++k) {
                const double x = grid.v_node(i), y = grid.v_node(j), z = grid.v_node(k);
                const double d1 = (x - c1[0]) * (x - c1[0]) + (y - c1[1]) * (y - c1[1]) +
                                  (z - c1[2]) * (z - c1[2]);
                const double d2 = (x - c2[0]) * (x - c2[0]) + (y - c2[1]) * (y - c2[1]) +
                                  (z - c2[2]) * (z - c2[2]);
                const double ev = std::exp(-m * d1 / 1.6) + 0.7 * std::exp(-m * d2 / 2.4);
                for (int l = 0; l < grid.NI; ++l) {
                    const double I = grid.I_node(l);
                    f.a[grid.index(i, j, k, l)] =
                        ev * std::pow(I, alpha) * (std::exp(-I / 0.8) + 0.4 * std::exp(-I / 1.7));
                }
            }
    return f;
}

/// Finite-difference determinant of d(v'_star, I'_star)/d(v_star, I_star) at
/// fixed (sigma, r, R): the volume factor of the collision transform.
inline double fd_transform_jacobian(const polyboltz::CollisionState& s,
                                    const polyboltz::BLParams& p, double m) {
    using polyboltz::CollisionState;
    auto outputs = [&](const CollisionState& in) {
        CollisionState out = polyboltz::transform(in, p, m);
        return std::array<double, 4>{out.v_star[0], out.v_star[1], out.v_star[2], out.I_star};
    };
    std::array<std::array<double, 4>, 4> jac{};
    for (int col = 0; col < 4; ++col) {
        CollisionState plus = s, minus = s;
        double h = 1e-5;
        if (col < 3) {
            plus.v_star[col] += h;
            minus.v_star[col] -= h;
        } else {
            h = 1e-5 * (1.0 + s.I_star);
            plus.I_star += h;
            minus.I_star = std::max(0.0, minus.I_star - h);
            h = (plus.I_star - minus.I_star) / 2.0;
        }
        std::array<double, 4> fp = outputs(plus), fm = outputs(minus);
        for (int row = 0; row < 4; ++row) jac[row][col] = (fp[row] - fm[row]) / (2.0 * h);
    }
    return std::abs(det4(jac));
}

} // namespace testsupport
