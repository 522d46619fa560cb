#include "polyboltz/kinematics.hpp"

#include <cmath>
#include <stdexcept>

namespace polyboltz {

void BLParams::validate() const {
    double n2 = sigma[0] * sigma[0] + sigma[1] * sigma[1] + sigma[2] * sigma[2];
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-12)
        throw std::invalid_argument("BLParams: sigma must be a unit vector");
    if (!(r >= 0.0 && r <= 1.0) || !(R >= 0.0 && R <= 1.0))
        throw std::invalid_argument("BLParams: r and R must lie in [0, 1]");
}

double total_energy(const CollisionState& s, double m) {
    if (!(m > 0.0)) throw std::invalid_argument("total_energy: m must be positive");
    double u0 = s.v[0] - s.v_star[0];
    double u1 = s.v[1] - s.v_star[1];
    double u2 = s.v[2] - s.v_star[2];
    return 0.25 * m * (u0 * u0 + u1 * u1 + u2 * u2) + s.I + s.I_star;
}

CollisionState transform(const CollisionState& s, const BLParams& p, double m) {
    p.validate();
    double E = total_energy(s, m);
    double disp = std::sqrt(p.R * E / m);
    CollisionState out;
    for (int d = 0; d < 3; ++d) {
        double c = 0.5 * (s.v[d] + s.v_star[d]);
        out.v[d] = c + disp * p.sigma[d];
        out.v_star[d] = c - disp * p.sigma[d];
    }
    double rest = (1.0 - p.R) * E;
    out.I = p.r * rest;
    out.I_star = (1.0 - p.r) * rest;
    return out;
}

BLParams inverse_params(const CollisionState& s, const CollisionState& primed, double m) {
    (void)primed; // the return transports `primed` back to `s`; all
                  // parameters are read off the unprimed state
    double E = total_energy(s, m);
    Vec3 u{s.v[0] - s.v_star[0], s.v[1] - s.v_star[1], s.v[2] - s.v_star[2]};
    double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    if (un == 0.0)
        throw std::domain_error(
            "inverse_params: zero relative velocity, scattering direction undefined");
    BLParams p;
    p.sigma = {u[0] / un, u[1] / un, u[2] / un};
    double Isum = s.I + s.I_star;
    p.r = Isum > 0.0 ? s.I / Isum : 0.5;
    p.R = E > 0.0 ? 0.25 * m * un * un / E : 1.0;
    return p;
}

double jacobian_bl(double r, double R) {
    if (!(r >= 0.0 && r <= 1.0) || !(R >= 0.0 && R <= 1.0))
        throw std::invalid_argument("jacobian_bl: r and R must lie in [0, 1]");
    return (1.0 - r) * (1.0 - R) / 8.0;
}

} // namespace polyboltz
