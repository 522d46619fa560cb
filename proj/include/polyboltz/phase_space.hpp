#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace polyboltz {

using Vec3 = std::array<double, 3>;

/// Uniform cell-centered tensor grid on [-Lv, Lv]^3 x [0, Imax].
/// Midpoint-rule weights equal the cell volume, so the weights sum to the
/// domain volume (2Lv)^3 * Imax exactly.
struct PhaseGrid {
    double Lv = 0.0;
    int Nv = 0;
    double Imax = 0.0;
    int NI = 0;

    PhaseGrid() = default;
    PhaseGrid(double Lv_, int Nv_, double Imax_, int NI_);

    double hv() const { return 2.0 * Lv / Nv; }
    double hI() const { return Imax / NI; }
    double v_node(int i) const { return -Lv + (i + 0.5) * hv(); }
    double I_node(int l) const { return (l + 0.5) * hI(); }
    double cell_weight() const { return hv() * hv() * hv() * hI(); }
    std::size_t size() const {
        return static_cast<std::size_t>(Nv) * Nv * Nv * NI;
    }
    std::size_t index(int i, int j, int k, int l) const {
        return ((static_cast<std::size_t>(i) * Nv + j) * Nv + k) * NI + l;
    }
    bool operator==(const PhaseGrid& o) const = default;
};

/// Kinetic model parameters: molecular mass, internal-energy exponent
/// alpha > -1, kernel exponent gamma in [0, 2], and the epsilon used to
/// realize strict-inequality weights k+ as k + eps_plus.
struct ModelParams {
    double m = 1.0;
    double alpha = 0.0;
    double gamma = 0.0;
    double eps_plus = 0.01;

    void validate() const;
    /// Weight shift used where the theory needs delta = max{(1/2 - alpha)+, 0}.
    double delta() const { return alpha < 0.5 ? 0.5 - alpha : 0.0; }
};

/// Nonnegative finite grid function; values live at cell centers.
struct DistributionField {
    PhaseGrid grid;
    std::vector<double> a;

    DistributionField() = default;
    explicit DistributionField(const PhaseGrid& g);
    DistributionField(const PhaseGrid& g, std::vector<double> values);

    double& at(int i, int j, int k, int l) { return a[grid.index(i, j, k, l)]; }
    double at(int i, int j, int k, int l) const { return a[grid.index(i, j, k, l)]; }

    /// Re-check the nonnegativity/finiteness invariant after external writes.
    void validate() const;
};

/// Lebesgue bracket <v, I> = sqrt(1 + |v|^2/2 + I/m).
double bracket(const Vec3& v, double I, const ModelParams& p);

/// Weighted Lebesgue norm ||f <.,.>^k||_{L^p}; p must be 1, 2 or infinity.
double lp_norm(const DistributionField& f, double p, double k, const ModelParams& mp);

/// First derivative along a velocity axis (0..2): 4th-order central
/// stencils inside, one-sided 5-point stencils at the box faces. Needs Nv >= 5.
std::vector<double> deriv_v(const DistributionField& f, int axis);

/// First derivative in I: 2nd-order central, one-sided at the I-boundaries.
/// Needs NI >= 5 for the norm contracts (3-point stencils need NI >= 3).
std::vector<double> deriv_I(const DistributionField& f);

/// Homogeneous velocity Sobolev seminorm sqrt(sum_i ||d_{v_i} f||_{L^2}^2).
double h1v_norm(const DistributionField& f);

/// ||I^delta d_I f||_{L^2} with one-sided stencils at the I-boundaries.
double weighted_dI_norm(const DistributionField& f, double delta);

/// Plain multilinear interpolation of the node values; zero outside the
/// truncated domain. Nodes are cell centers, so the outermost half cells
/// taper linearly toward the box boundary.
double interpolate(const DistributionField& f, const Vec3& v, double I);

/// Spectral (DFT) derivative along a velocity axis, for cross-checking the
/// stencil version on smooth decaying fields.
std::vector<double> deriv_v_spectral(const DistributionField& f, int axis);

} // namespace polyboltz
