#pragma once

#include <utility>
#include <vector>

#include "polyboltz/kinematics.hpp"
#include "polyboltz/phase_space.hpp"

namespace polyboltz {

/// Angular kernel b on the half sphere (support u_hat . sigma >= 0),
/// parametrized by x = u_hat . sigma in [0, 1].
struct AngularKernel {
    enum class Family { constant, power, table };

    Family family = Family::constant;
    double c = 1.0;    // level for constant, prefactor for power
    double eta = 0.0;  // power exponent, > -1
    std::vector<std::pair<double, double>> samples; // table: increasing x in [0,1]

    static AngularKernel constant(double level);
    static AngularKernel power(double prefactor, double exponent);
    static AngularKernel table(std::vector<std::pair<double, double>> xs);

    /// Pointwise b(x) for x in [0, 1].
    double operator()(double x) const;
    void validate() const;
};

/// Weight families entering the averaging operator S^psi.
struct PsiWeight {
    enum class Tag { one, rho1, rho2 };
    Tag tag = Tag::one;
};

/// Euler beta function via lgamma.
double beta_fn(double a, double b);

/// L1 norm 2*pi*int_0^1 b and L2 norm sqrt(2*pi*int_0^1 b^2) over the half
/// sphere. Throws when the chosen family makes the integral infinite.
double b_l1(const AngularKernel& b);
double b_l2(const AngularKernel& b);

/// d_alpha(r, R) = r^a (1-r)^a (1-R)^(2a+1) sqrt(R). For alpha < 0 the r
/// endpoints return +infinity (integrable singularity).
double d_alpha(double r, double R, double alpha);

/// ||d_alpha||_1 over the unit square, in closed Beta form.
double d_alpha_l1(double alpha);

/// kappa = ||b||_L1 * ||d_alpha||_1.
double kappa(const AngularKernel& b, double alpha);

/// Factorized collision kernel b(u_hat . sigma) * (E/m)^(gamma/2); zero on
/// u_hat . sigma < 0. For u = 0 the direction is fixed to e1 (a measure-zero
/// convention documented with the sampler).
double kernel_B(const CollisionState& s, const BLParams& p, const ModelParams& params,
                const AngularKernel& b);

/// Averaging constant rho^psi = 2^(7/4) * int int (r(1-R))^(-1/2) psi d_alpha,
/// by nested double-exponential quadrature. Throws a divergence error naming
/// the violated finiteness condition.
double rho_psi(const PsiWeight& psi, double alpha, double delta);

/// Beta-product decomposition of psi(r,R) * d_alpha(r,R): the density equals
/// sum_j coef_j * Beta(r; r_a, r_b) * Beta(R; R_a, R_b). Used for exact
/// importance sampling of the averaging operator.
struct PsiBetaTerm {
    double coef;
    double r_a, r_b;
    double R_a, R_b;
};
std::vector<PsiBetaTerm> psi_beta_terms(const PsiWeight& psi, double alpha, double delta);

/// sup over grid nodes (v, I) of <v,I>^(-s) * ||(E/m)^a <.,.>^(-s)||_{L2(dv* dI*)}
/// over the truncated domain. Requires a > -5/4 and s > 2a + 5/2.
double constant_Ca(double a, double s, const ModelParams& params, const PhaseGrid& grid);

/// (lhs, rhs) of the oscillatory bound: lhs = |int_0^1 e^{-ixr} r^a(1-r)^a dr|,
/// rhs = 2*min{1, 1/|x|}.
std::pair<double, double> oscillatory_bound_check(double x, double alpha);

} // namespace polyboltz
