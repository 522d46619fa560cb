#include "polyboltz/phase_space.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "polyboltz/summation.hpp"

namespace polyboltz {

PhaseGrid::PhaseGrid(double Lv_, int Nv_, double Imax_, int NI_)
    : Lv(Lv_), Nv(Nv_), Imax(Imax_), NI(NI_) {
    if (!(Lv > 0.0) || !(Imax > 0.0))
        throw std::invalid_argument("PhaseGrid: Lv and Imax must be positive");
    if (Nv < 4 || NI < 4)
        throw std::invalid_argument("PhaseGrid: Nv and NI must be at least 4");
}

void ModelParams::validate() const {
    if (!(m > 0.0)) throw std::invalid_argument("ModelParams: m must be positive");
    if (!(alpha > -1.0)) throw std::invalid_argument("ModelParams: alpha must exceed -1");
    if (!(gamma >= 0.0 && gamma <= 2.0))
        throw std::invalid_argument("ModelParams: gamma must lie in [0, 2]");
    if (!(eps_plus > 0.0)) throw std::invalid_argument("ModelParams: eps_plus must be positive");
}

DistributionField::DistributionField(const PhaseGrid& g) : grid(g), a(g.size(), 0.0) {}

DistributionField::DistributionField(const PhaseGrid& g, std::vector<double> values)
    : grid(g), a(std::move(values)) {
    if (a.size() != grid.size())
        throw std::invalid_argument("DistributionField: value count does not match grid");
    validate();
}

void DistributionField::validate() const {
    for (double x : a) {
        if (!std::isfinite(x) || x < 0.0)
            throw std::invalid_argument("DistributionField: values must be finite and nonnegative");
    }
}

double bracket(const Vec3& v, double I, const ModelParams& p) {
    double v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    return std::sqrt(1.0 + 0.5 * v2 + I / p.m);
}

double lp_norm(const DistributionField& f, double p, double k, const ModelParams& mp) {
    const PhaseGrid& g = f.grid;
    if (!(p == 1.0 || p == 2.0 || std::isinf(p)))
        throw std::invalid_argument("lp_norm: p must be 1, 2 or infinity");
    const double w = g.cell_weight();
    if (std::isinf(p)) {
        double best = 0.0;
        for (int i = 0; i < g.Nv; ++i)
            for (int j = 0; j < g.Nv; ++j)
                for (int k3 = 0; k3 < g.Nv; ++k3)
                    for (int l = 0; l < g.NI; ++l) {
                        Vec3 v{g.v_node(i), g.v_node(j), g.v_node(k3)};
                        double x = f.at(i, j, k3, l) * std::pow(bracket(v, g.I_node(l), mp), k);
                        if (x > best) best = x;
                    }
        return best;
    }
    NeumaierSum s;
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k3 = 0; k3 < g.Nv; ++k3)
                for (int l = 0; l < g.NI; ++l) {
                    Vec3 v{g.v_node(i), g.v_node(j), g.v_node(k3)};
                    double x = f.at(i, j, k3, l) * std::pow(bracket(v, g.I_node(l), mp), k);
                    s.add(p == 1.0 ? x : x * x);
                }
    double total = w * s.value();
    return p == 1.0 ? total : std::sqrt(total);
}

namespace {

// First-derivative stencils, 4th order: interior central plus one-sided
// rows for the two nodes at each face.
double stencil4(const double* fv, std::ptrdiff_t stride, int pos, int n, double h) {
    auto v = [&](int idx) { return fv[stride * idx]; };
    if (pos >= 2 && pos <= n - 3) {
        return (v(pos - 2) - 8.0 * v(pos - 1) + 8.0 * v(pos + 1) - v(pos + 2)) / (12.0 * h);
    }
    if (pos == 0)
        return (-25.0 * v(0) + 48.0 * v(1) - 36.0 * v(2) + 16.0 * v(3) - 3.0 * v(4)) / (12.0 * h);
    if (pos == 1)
        return (-3.0 * v(0) - 10.0 * v(1) + 18.0 * v(2) - 6.0 * v(3) + v(4)) / (12.0 * h);
    if (pos == n - 2)
        return (3.0 * v(n - 1) + 10.0 * v(n - 2) - 18.0 * v(n - 3) + 6.0 * v(n - 4) - v(n - 5)) /
               (12.0 * h);
    // pos == n - 1
    return (25.0 * v(n - 1) - 48.0 * v(n - 2) + 36.0 * v(n - 3) - 16.0 * v(n - 4) +
            3.0 * v(n - 5)) /
           (12.0 * h);
}

double stencil2(const double* fv, std::ptrdiff_t stride, int pos, int n, double h) {
    auto v = [&](int idx) { return fv[stride * idx]; };
    if (pos >= 1 && pos <= n - 2) return (v(pos + 1) - v(pos - 1)) / (2.0 * h);
    if (pos == 0) return (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h);
    return (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h);
}

} // namespace

std::vector<double> deriv_v(const DistributionField& f, int axis) {
    const PhaseGrid& g = f.grid;
    if (axis < 0 || axis > 2) throw std::invalid_argument("deriv_v: axis must be 0, 1 or 2");
    if (g.Nv < 5) throw std::invalid_argument("deriv_v: needs Nv >= 5 for 4th-order stencils");
    std::vector<double> out(g.size());
    const std::ptrdiff_t strides[3] = {
        static_cast<std::ptrdiff_t>(g.Nv) * g.Nv * g.NI,
        static_cast<std::ptrdiff_t>(g.Nv) * g.NI,
        static_cast<std::ptrdiff_t>(g.NI),
    };
    const std::ptrdiff_t st = strides[axis];
    const double h = g.hv();
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k = 0; k < g.Nv; ++k)
                for (int l = 0; l < g.NI; ++l) {
                    int idx3[3] = {i, j, k};
                    int pos = idx3[axis];
                    std::size_t base = g.index(i, j, k, l) - st * pos;
                    out[g.index(i, j, k, l)] = stencil4(f.a.data() + base, st, pos, g.Nv, h);
                }
    return out;
}

std::vector<double> deriv_I(const DistributionField& f) {
    const PhaseGrid& g = f.grid;
    std::vector<double> out(g.size());
    const double h = g.hI();
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k = 0; k < g.Nv; ++k) {
                std::size_t base = g.index(i, j, k, 0);
                for (int l = 0; l < g.NI; ++l)
                    out[base + l] = stencil2(f.a.data() + base, 1, l, g.NI, h);
            }
    return out;
}

double h1v_norm(const DistributionField& f) {
    const PhaseGrid& g = f.grid;
    if (g.Nv < 5) throw std::invalid_argument("h1v_norm: needs Nv >= 5");
    const double w = g.cell_weight();
    NeumaierSum s;
    for (int axis = 0; axis < 3; ++axis) {
        std::vector<double> d = deriv_v(f, axis);
        for (double x : d) s.add(x * x);
    }
    return std::sqrt(w * s.value());
}

double weighted_dI_norm(const DistributionField& f, double delta) {
    const PhaseGrid& g = f.grid;
    if (g.NI < 5) throw std::invalid_argument("weighted_dI_norm: needs NI >= 5");
    if (delta < 0.0) throw std::invalid_argument("weighted_dI_norm: delta must be >= 0");
    std::vector<double> d = deriv_I(f);
    const double w = g.cell_weight();
    NeumaierSum s;
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k = 0; k < g.Nv; ++k)
                for (int l = 0; l < g.NI; ++l) {
                    double x = std::pow(g.I_node(l), delta) * d[g.index(i, j, k, l)];
                    s.add(x * x);
                }
    return std::sqrt(w * s.value());
}

double interpolate(const DistributionField& f, const Vec3& v, double I) {
    const PhaseGrid& g = f.grid;
    if (I < 0.0 || I > g.Imax) return 0.0;
    for (int d = 0; d < 3; ++d)
        if (v[d] < -g.Lv || v[d] > g.Lv) return 0.0;

    // Fractional node coordinates; node i sits at -Lv + (i + 1/2) hv.
    double tv[3];
    int iv[3];
    for (int d = 0; d < 3; ++d) {
        double x = (v[d] + g.Lv) / g.hv() - 0.5;
        double fl = std::floor(x);
        iv[d] = static_cast<int>(fl);
        tv[d] = x - fl;
    }
    double xI = I / g.hI() - 0.5;
    double flI = std::floor(xI);
    int lI = static_cast<int>(flI);
    double tI = xI - flI;

    auto value = [&](int i, int j, int k, int l) -> double {
        if (i < 0 || i >= g.Nv || j < 0 || j >= g.Nv || k < 0 || k >= g.Nv || l < 0 || l >= g.NI)
            return 0.0; // zero beyond the outermost nodes (taper to the box edge)
        return f.at(i, j, k, l);
    };

    double acc = 0.0;
    for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj)
            for (int dk = 0; dk < 2; ++dk)
                for (int dl = 0; dl < 2; ++dl) {
                    double wgt = (di ? tv[0] : 1.0 - tv[0]) * (dj ? tv[1] : 1.0 - tv[1]) *
                                 (dk ? tv[2] : 1.0 - tv[2]) * (dl ? tI : 1.0 - tI);
                    if (wgt != 0.0)
                        acc += wgt * value(iv[0] + di, iv[1] + dj, iv[2] + dk, lI + dl);
                }
    return acc;
}

std::vector<double> deriv_v_spectral(const DistributionField& f, int axis) {
    const PhaseGrid& g = f.grid;
    if (axis < 0 || axis > 2) throw std::invalid_argument("deriv_v_spectral: bad axis");
    const int n = g.Nv;
    // Periodic DFT differentiation matrix for an even number of uniform
    // nodes; fields that decay at the box faces make the periodization
    // error O(h^2)-small against the stencil version.
    std::vector<double> D(static_cast<std::size_t>(n) * n, 0.0);
    const double pi = 3.14159265358979323846;
    for (int p = 0; p < n; ++p)
        for (int q = 0; q < n; ++q) {
            if (p == q) continue;
            int d = p - q;
            double s = (d % 2 == 0) ? 1.0 : -1.0;
            D[static_cast<std::size_t>(p) * n + q] =
                (pi / g.Lv) * 0.5 * s / std::tan(pi * d / n);
        }
    std::vector<double> out(g.size(), 0.0);
    const std::ptrdiff_t strides[3] = {
        static_cast<std::ptrdiff_t>(g.Nv) * g.Nv * g.NI,
        static_cast<std::ptrdiff_t>(g.Nv) * g.NI,
        static_cast<std::ptrdiff_t>(g.NI),
    };
    const std::ptrdiff_t st = strides[axis];
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k = 0; k < g.Nv; ++k)
                for (int l = 0; l < g.NI; ++l) {
                    int idx3[3] = {i, j, k};
                    int pos = idx3[axis];
                    std::size_t base = g.index(i, j, k, l) - st * pos;
                    double acc = 0.0;
                    for (int q = 0; q < n; ++q)
                        acc += D[static_cast<std::size_t>(pos) * n + q] * f.a[base + st * q];
                    out[g.index(i, j, k, l)] = acc;
                }
    return out;
}

} // namespace polyboltz
