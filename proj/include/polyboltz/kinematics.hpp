#pragma once

#include "polyboltz/phase_space.hpp"

namespace polyboltz {

/// A colliding pair: velocities and internal energies of both molecules.
struct CollisionState {
    Vec3 v{};
    double I = 0.0;
    Vec3 v_star{};
    double I_star = 0.0;
};

/// Collision parameters: scattering direction sigma on the unit sphere and
/// the energy-exchange fractions r, R in [0, 1].
struct BLParams {
    Vec3 sigma{1.0, 0.0, 0.0};
    double r = 0.5;
    double R = 0.5;

    void validate() const;
};

/// Total pair energy E = (m/4)|v - v_star|^2 + I + I_star.
double total_energy(const CollisionState& s, double m);

/// Post-collision state:
///   v'      = (v + v_star)/2 + sqrt(R E / m) sigma
///   v'_star = (v + v_star)/2 - sqrt(R E / m) sigma
///   I'      = r (1 - R) E,   I'_star = (1 - r)(1 - R) E.
/// Conserves momentum and total energy identically.
CollisionState transform(const CollisionState& s, const BLParams& p, double m);

/// Parameters (sigma', r', R') that carry `primed` back to `s`:
/// sigma' = (v - v_star)/|v - v_star|, r' = I/(I + I_star) (1/2 when the
/// internal energies vanish), R' = m|v - v_star|^2 / (4E), all read off the
/// unprimed state. Throws when the relative velocity vanishes, since the
/// direction is then undefined.
BLParams inverse_params(const CollisionState& s, const CollisionState& primed, double m);

/// Jacobian of (v_star, I_star) -> (v'_star, I'_star) at fixed (v, I, sigma, r, R).
double jacobian_bl(double r, double R);

} // namespace polyboltz
