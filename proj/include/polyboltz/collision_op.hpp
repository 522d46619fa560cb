#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "polyboltz/kernel.hpp"
#include "polyboltz/kinematics.hpp"
#include "polyboltz/phase_space.hpp"

namespace polyboltz {

/// Quadrature strategy for the collision integrals.
struct QuadratureSpec {
    enum class Mode { monte_carlo, tensor_deterministic };

    Mode mode = Mode::monte_carlo;
    /// Monte-Carlo samples per output node (weak_form_moment multiplies by
    /// the node count since it has no output node).
    int mc_samples = 2000;
    /// Deterministic mode: Gauss points per (v*, I*) cell and axis.
    int det_v_nodes = 2;
    int det_I_nodes = 2;
    /// Deterministic mode: hemisphere rule z-levels (azimuth uses twice as
    /// many) and (r, R) midpoint-quantile node counts.
    int det_sigma_nodes = 4;
    int det_r_nodes = 4;
    int det_R_nodes = 4;
    std::uint64_t seed = 0;
    /// Deterministic mode refuses to run when the inner evaluations per
    /// output node would exceed this budget.
    long long det_budget = 1LL << 24;

    void validate() const;
};

/// Collision frequency nu[g](v, I) sampled on the grid, with per-node
/// standard errors (zero where the evaluation is closed-form).
struct CollisionFrequencyField {
    PhaseGrid grid;
    std::vector<double> nu;
    std::vector<double> se;

    explicit CollisionFrequencyField(const PhaseGrid& g)
        : grid(g), nu(g.size(), 0.0), se(g.size(), 0.0) {}
    double min_value() const;
    double max_value() const;
};

/// A grid-shaped operator estimate with per-node standard errors and
/// sampling bookkeeping. Values may be negative (signed integrands or
/// quadrature noise); nothing is clamped here.
struct OperatorField {
    PhaseGrid grid;
    std::vector<double> value;
    std::vector<double> se;
    long long samples = 0;
    long long rejected = 0;

    explicit OperatorField(const PhaseGrid& g)
        : grid(g), value(g.size(), 0.0), se(g.size(), 0.0) {}
    /// weighted L1 norm of the value array (signed entries by magnitude)
    double l1() const;
    /// aggregate standard error of the weighted L1/ mass functionals
    double l1_se() const;
};

/// Continuum moments of an interpolated field.
struct FieldMoments {
    double mass = 0.0;      ///< integral of the interpolant
    Vec3 momentum{0, 0, 0}; ///< integral of v * interpolant
    double second = 0.0;    ///< integral of |v|^2 * interpolant
    double internal = 0.0;  ///< integral of I * interpolant
};

/// Off-grid evaluation of a nonnegative field as h(v,I) * M(v,I): M is a
/// closed-form equilibrium shape n (m/2 pi Theta)^{3/2} I^alpha
/// exp(-m|v-u|^2/(2 Theta) - I/T) / (Gamma(alpha+1) T^{alpha+1}) fitted to the
/// field's discrete moments, and h is the nodal ratio interpolated
/// multilinearly (tent basis, constant-extended to the domain edge, zero
/// outside the box). The carrier absorbs the I^alpha weight and the
/// exponential decay between nodes, so h stays flat (identically 1 for
/// equilibrium data) and the collision-weight ratio (I I*/I' I'*)^alpha
/// cancels against the carriers analytically in the gain sampler.
/// The interpolant reproduces the node data exactly; l1() is its continuum
/// mass, which is the L1 norm every operator quotes.
class InterpTable {
  public:
    InterpTable(const DistributionField& f, const ModelParams& params);

    const PhaseGrid& grid() const { return grid_; }
    double alpha() const { return alpha_; }
    bool zero() const { return zero_; }

    /// interpolated field value; zero outside the domain box
    double value(const Vec3& v, double I) const;
    /// the multilinear h factor alone (constant-extended inside the box)
    double h_factor(const Vec3& v, double I) const;
    /// hint the cache hierarchy about an upcoming h_factor call at (v, I)
    void prefetch(const Vec3& v, double I) const;
    /// exponent s such that M(v,I) = coeff() * I^alpha * exp(-s)
    double exponent(const Vec3& v, double I) const;
    double coeff() const { return coeff_; }

    /// exact continuum moments of the interpolant (erf/Gauss closed forms)
    const FieldMoments& moments() const { return moments_; }
    /// continuum mass of the interpolant (the L1 norm every operator uses)
    double l1() const { return moments_.mass; }

    // carrier parameters (exposed for the fused sampler loops)
    const Vec3& carrier_u() const { return u_; }
    double carrier_inv2theta_m() const { return inv2theta_m_; }
    double carrier_invT() const { return invT_; }
    const std::vector<float>& h_nodes() const { return h_; }

  private:
    void fit_carrier(const DistributionField& f, const ModelParams& params);
    void build_h(const DistributionField& f);
    void compute_moments();

    PhaseGrid grid_;
    double alpha_ = 0.0;
    double m_ = 1.0;
    double inv_hv_ = 1.0; // 1 / grid_.hv(), hoisted out of the lookup path
    double inv_hI_ = 1.0;
    bool zero_ = false;
    Vec3 u_{0, 0, 0};
    double theta_ = 1.0;       // velocity temperature of the carrier
    double Ti_ = 1.0;          // internal-energy temperature
    double inv2theta_m_ = 0.5; // m / (2 Theta)
    double invT_ = 1.0;        // 1 / Ti
    double coeff_ = 1.0;
    std::vector<float> h_;
    FieldMoments moments_;
};

/// nu[g](v,I) = kappa * integral of g * (E/m)^{gamma/2} d v* d I*.
/// gamma = 0 uses the identity nu = kappa ||g||_1; gamma = 2 uses the exact
/// quadratic-moment expansion of the interpolant; other gamma values are
/// quadratured per the spec's mode.
CollisionFrequencyField collision_frequency(const DistributionField& g, const ModelParams& params,
                                            const AngularKernel& b, const QuadratureSpec& quad);
CollisionFrequencyField collision_frequency(const InterpTable& g, const ModelParams& params,
                                            const AngularKernel& b, const QuadratureSpec& quad);

/// Pointwise nu[g](v, I) (same estimator as collision_frequency, off-grid
/// capable). stream_key selects the RNG stream: finite-difference probes
/// must reuse one key so both evaluations share common random numbers.
double collision_frequency_at(const InterpTable& g, const Vec3& v, double I,
                              const ModelParams& params, const AngularKernel& b,
                              const QuadratureSpec& quad, std::uint64_t stream_key);

/// Gain operator Q+(f,g) on the grid with per-node standard errors.
OperatorField gain(const DistributionField& f, const DistributionField& g,
                   const ModelParams& params, const AngularKernel& b, const QuadratureSpec& quad);
OperatorField gain(const InterpTable& f, const InterpTable& g, const ModelParams& params,
                   const AngularKernel& b, const QuadratureSpec& quad);

/// Pointwise loss f * nu.
DistributionField loss(const DistributionField& f, const CollisionFrequencyField& nu);

/// Q(f,f) = gain - loss with propagated standard errors.
OperatorField q_total(const DistributionField& f, const ModelParams& params,
                      const AngularKernel& b, const QuadratureSpec& quad);

using TestFunction = std::function<double(const Vec3&, double)>;

struct WeakFormResult {
    double value = 0.0;
    double se = 0.0;
    long long samples = 0;
};

/// Integral of {chi(v',I') - chi(v,I)} f g B d_alpha over the full domain.
WeakFormResult weak_form_moment(const DistributionField& f, const DistributionField& g,
                                const TestFunction& chi, const ModelParams& params,
                                const AngularKernel& b, const QuadratureSpec& quad);

/// Derivative formulas for the collision frequency:
/// d nu / d v_i = (gamma kappa / 4) integral g (E/m)^{gamma/2-1} (v_i - v*_i),
/// d nu / d I   = (gamma kappa / (2m)) integral g (E/m)^{gamma/2-1}.
std::array<OperatorField, 3> nu_gradient_v(const InterpTable& g, const ModelParams& params,
                                           const AngularKernel& b, const QuadratureSpec& quad);
OperatorField nu_dI(const InterpTable& g, const ModelParams& params, const AngularKernel& b,
                    const QuadratureSpec& quad);

/// Averaging operator S^psi(chi)(v, I; v*, I*) = integral of
/// b(uhat.sigma) psi(r,R) chi(v',I') d_alpha d sigma dR dr at the fixed
/// (v*, I*) taken from star, sampled over the grid's (v, I) nodes.
OperatorField averaging_S(const TestFunction& chi, const PsiWeight& psi,
                          const CollisionState& star, const PhaseGrid& grid,
                          const ModelParams& params, const AngularKernel& b,
                          const QuadratureSpec& quad);

/// Velocity-commutator remainder R_i: the gain integrand multiplied by
/// beta_i = (2 w_i/|w|^2) (alpha (R E - m|u|^2/4)/I* + 3/2 - (2 alpha + 5/2
/// - gamma/2) R) with w = v - v'_*. Samples with |w| < 1e-12 Lv or
/// I* < 1e-12 Imax are rejected and counted.
OperatorField gain_remainder(const DistributionField& f, const DistributionField& g, int axis,
                             const ModelParams& params, const AngularKernel& b,
                             const QuadratureSpec& quad);

} // namespace polyboltz
