#include "polyboltz/kernel.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <string>

#include "polyboltz/parallel.hpp"
#include "polyboltz/quadrature.hpp"
#include "polyboltz/summation.hpp"

namespace polyboltz {

namespace {
const double kTwoPi = 6.283185307179586476925286766559;
const double kTwoPow74 = 3.3635856610148585; // 2^(7/4)
} // namespace

AngularKernel AngularKernel::constant(double level) {
    AngularKernel k;
    k.family = Family::constant;
    k.c = level;
    k.validate();
    return k;
}

AngularKernel AngularKernel::power(double prefactor, double exponent) {
    AngularKernel k;
    k.family = Family::power;
    k.c = prefactor;
    k.eta = exponent;
    k.validate();
    return k;
}

AngularKernel AngularKernel::table(std::vector<std::pair<double, double>> xs) {
    AngularKernel k;
    k.family = Family::table;
    k.samples = std::move(xs);
    k.validate();
    return k;
}

void AngularKernel::validate() const {
    switch (family) {
        case Family::constant:
            if (c < 0.0) throw std::invalid_argument("AngularKernel: level must be >= 0");
            break;
        case Family::power:
            if (c < 0.0) throw std::invalid_argument("AngularKernel: prefactor must be >= 0");
            if (!(eta > -1.0))
                throw std::invalid_argument("AngularKernel: power exponent must exceed -1");
            break;
        case Family::table: {
            if (samples.size() < 2)
                throw std::invalid_argument("AngularKernel: table needs at least two samples");
            double prev = -1.0;
            for (auto& [x, bx] : samples) {
                if (x < 0.0 || x > 1.0 || x <= prev)
                    throw std::invalid_argument(
                        "AngularKernel: table abscissae must increase within [0, 1]");
                if (bx < 0.0 || !std::isfinite(bx))
                    throw std::invalid_argument("AngularKernel: table values must be >= 0");
                prev = x;
            }
            break;
        }
    }
}

double AngularKernel::operator()(double x) const {
    if (x < 0.0 || x > 1.0) return 0.0;
    switch (family) {
        case Family::constant:
            return c;
        case Family::power:
            return c * std::pow(x, eta);
        case Family::table: {
            if (x <= samples.front().first) return samples.front().second;
            if (x >= samples.back().first) return samples.back().second;
            std::size_t lo = 0, hi = samples.size() - 1;
            while (hi - lo > 1) {
                std::size_t mid = (lo + hi) / 2;
                (samples[mid].first <= x ? lo : hi) = mid;
            }
            double x0 = samples[lo].first, x1 = samples[hi].first;
            double t = (x - x0) / (x1 - x0);
            return (1.0 - t) * samples[lo].second + t * samples[hi].second;
        }
    }
    return 0.0;
}

double beta_fn(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0))
        throw std::domain_error("beta_fn: arguments must be positive");
    return std::exp(std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
}

namespace {

double table_integral(const AngularKernel& b, bool squared) {
    // The table is interpolated linearly, so integrate each segment exactly:
    // trapezoid for b itself, h (y0^2 + y0 y1 + y1^2) / 3 for b^2. Constant
    // extension to the interval ends.
    NeumaierSum s;
    auto val = [&](double y) { return squared ? y * y : y; };
    const auto& t = b.samples;
    s.add(val(t.front().second) * (t.front().first - 0.0));
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        double dx = t[i + 1].first - t[i].first;
        double y0 = t[i].second, y1 = t[i + 1].second;
        if (squared)
            s.add(dx * (y0 * y0 + y0 * y1 + y1 * y1) / 3.0);
        else
            s.add(0.5 * (y0 + y1) * dx);
    }
    s.add(val(t.back().second) * (1.0 - t.back().first));
    return s.value();
}

} // namespace

double b_l1(const AngularKernel& b) {
    b.validate();
    switch (b.family) {
        case AngularKernel::Family::constant:
            return kTwoPi * b.c;
        case AngularKernel::Family::power:
            return kTwoPi * b.c *
                   tanh_sinh01([&](double x, double) { return std::pow(x, b.eta); }, 1e-12, 13);
        case AngularKernel::Family::table:
            return kTwoPi * table_integral(b, false);
    }
    return 0.0;
}

double b_l2(const AngularKernel& b) {
    b.validate();
    switch (b.family) {
        case AngularKernel::Family::constant:
            return b.c * std::sqrt(kTwoPi);
        case AngularKernel::Family::power:
            if (b.eta <= -0.5)
                throw std::domain_error(
                    "b_l2: power kernel with exponent <= -1/2 has infinite L2 norm");
            return b.c * std::sqrt(kTwoPi * tanh_sinh01([&](double x, double) {
                                       return std::pow(x, 2.0 * b.eta);
                                   },
                                                        1e-12, 13));
        case AngularKernel::Family::table:
            return std::sqrt(kTwoPi * table_integral(b, true));
    }
    return 0.0;
}

double d_alpha(double r, double R, double alpha) {
    if (r < 0.0 || r > 1.0 || R < 0.0 || R > 1.0)
        throw std::invalid_argument("d_alpha: r and R must lie in [0, 1]");
    return std::pow(r, alpha) * std::pow(1.0 - r, alpha) * std::pow(1.0 - R, 2.0 * alpha + 1.0) *
           std::sqrt(R);
}

double d_alpha_l1(double alpha) {
    if (!(alpha > -1.0))
        throw std::domain_error("d_alpha_l1: diverges for alpha <= -1");
    return beta_fn(alpha + 1.0, alpha + 1.0) * beta_fn(1.5, 2.0 * alpha + 2.0);
}

double kappa(const AngularKernel& b, double alpha) {
    return b_l1(b) * d_alpha_l1(alpha);
}

double kernel_B(const CollisionState& s, const BLParams& p, const ModelParams& params,
                const AngularKernel& b) {
    params.validate();
    Vec3 u{s.v[0] - s.v_star[0], s.v[1] - s.v_star[1], s.v[2] - s.v_star[2]};
    double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    double dot;
    if (un > 0.0) {
        dot = (u[0] * p.sigma[0] + u[1] * p.sigma[1] + u[2] * p.sigma[2]) / un;
    } else {
        dot = p.sigma[0]; // u_hat := e1 convention on the null set u = 0
    }
    if (dot < 0.0) return 0.0;
    double E = total_energy(s, params.m);
    double efac;
    if (params.gamma == 0.0)
        efac = 1.0;
    else if (params.gamma == 2.0)
        efac = E / params.m;
    else if (params.gamma == 1.0)
        efac = std::sqrt(E / params.m);
    else
        efac = std::pow(E / params.m, 0.5 * params.gamma);
    return b(dot) * efac;
}

double rho_psi(const PsiWeight& psi, double alpha, double delta) {
    auto fail = [](const std::string& cond) {
        throw std::domain_error("rho_psi: integral diverges (condition " + cond + " violated)");
    };
    switch (psi.tag) {
        case PsiWeight::Tag::one:
            if (!(alpha > -0.5)) fail("alpha > -1/2");
            break;
        case PsiWeight::Tag::rho1:
            if (!(alpha > 0.0)) fail("alpha > 0");
            break;
        case PsiWeight::Tag::rho2:
            if (!(alpha + delta > 0.5)) fail("alpha + delta > 1/2");
            if (!(alpha > 0.0)) fail("alpha > 0");
            break;
    }
    // The integrand (r(1-R))^{-1/2} psi d_alpha is a short sum of terms
    // c * r^er (1-r)^eomr R^eR (1-R)^eomR. Combining the exponents before
    // calling pow keeps every factor finite at the doubly-exponentially small
    // abscissae near the endpoints.
    struct Term {
        double coef, er, eomr, eR, eomR;
    };
    std::vector<Term> terms;
    switch (psi.tag) {
        case PsiWeight::Tag::one:
            terms.push_back({1.0, alpha - 0.5, alpha, 0.5, 2.0 * alpha + 0.5});
            break;
        case PsiWeight::Tag::rho1:
            terms.push_back({1.0, alpha - 0.5, alpha - 1.0, 0.5, 2.0 * alpha - 0.5});
            terms.push_back({1.0, alpha - 0.5, alpha, 0.0, 2.0 * alpha + 0.5});
            break;
        case PsiWeight::Tag::rho2:
            terms.push_back(
                {alpha, alpha + delta - 1.5, alpha, 0.5, 2.0 * alpha + delta - 0.5});
            terms.push_back(
                {alpha, alpha + delta - 0.5, alpha - 1.0, 0.5, 2.0 * alpha + delta - 0.5});
            break;
    }
    auto inner = [&](double r, double omr) {
        double rfac[2];
        for (std::size_t j = 0; j < terms.size(); ++j)
            rfac[j] = terms[j].coef * std::pow(r, terms[j].er) * std::pow(omr, terms[j].eomr);
        return tanh_sinh01(
            [&](double R, double omR) {
                double s = 0.0;
                for (std::size_t j = 0; j < terms.size(); ++j)
                    s += rfac[j] * std::pow(R, terms[j].eR) * std::pow(omR, terms[j].eomR);
                return s;
            },
            1e-11, 12);
    };
    double val = kTwoPow74 * tanh_sinh01(inner, 1e-10, 12);
    if (!std::isfinite(val)) throw std::domain_error("rho_psi: quadrature did not converge");
    return val;
}

std::vector<PsiBetaTerm> psi_beta_terms(const PsiWeight& psi, double alpha, double delta) {
    auto fail = [](const std::string& cond) {
        throw std::domain_error("psi_beta_terms: density not integrable (condition " + cond +
                                " violated)");
    };
    std::vector<PsiBetaTerm> out;
    switch (psi.tag) {
        case PsiWeight::Tag::one:
            if (!(alpha > -1.0)) fail("alpha > -1");
            out.push_back({beta_fn(alpha + 1.0, alpha + 1.0) * beta_fn(1.5, 2.0 * alpha + 2.0),
                           alpha + 1.0, alpha + 1.0, 1.5, 2.0 * alpha + 2.0});
            break;
        case PsiWeight::Tag::rho1:
            if (!(alpha > 0.0)) fail("alpha > 0");
            out.push_back({beta_fn(alpha + 1.0, alpha) * beta_fn(1.5, 2.0 * alpha + 1.0),
                           alpha + 1.0, alpha, 1.5, 2.0 * alpha + 1.0});
            out.push_back({beta_fn(alpha + 1.0, alpha + 1.0) * beta_fn(1.0, 2.0 * alpha + 2.0),
                           alpha + 1.0, alpha + 1.0, 1.0, 2.0 * alpha + 2.0});
            break;
        case PsiWeight::Tag::rho2:
            if (!(alpha + delta > 0.0)) fail("alpha + delta > 0");
            if (!(alpha > 0.0)) fail("alpha > 0");
            out.push_back({alpha * beta_fn(alpha + delta, alpha + 1.0) *
                               beta_fn(1.5, 2.0 * alpha + delta + 1.0),
                           alpha + delta, alpha + 1.0, 1.5, 2.0 * alpha + delta + 1.0});
            out.push_back({alpha * beta_fn(alpha + delta + 1.0, alpha) *
                               beta_fn(1.5, 2.0 * alpha + delta + 1.0),
                           alpha + delta + 1.0, alpha, 1.5, 2.0 * alpha + delta + 1.0});
            break;
    }
    return out;
}

double constant_Ca(double a, double s, const ModelParams& params, const PhaseGrid& grid) {
    params.validate();
    if (!(a > -1.25))
        throw std::domain_error("constant_Ca: requires a > -5/4");
    if (!(s > 2.0 * a + 2.5))
        throw std::domain_error("constant_Ca: requires s > 2a + 5/2");

    const int Nv = grid.Nv, NI = grid.NI;
    const std::size_t n = grid.size();
    const double w = grid.cell_weight();
    const double m = params.m;

    // Flatten node coordinates once; the inner integral is O(n) per node.
    std::vector<double> cx(n), cy(n), cz(n), cI(n), cbr(n);
    {
        std::size_t idx = 0;
        for (int i = 0; i < Nv; ++i)
            for (int j = 0; j < Nv; ++j)
                for (int k = 0; k < Nv; ++k)
                    for (int l = 0; l < NI; ++l, ++idx) {
                        cx[idx] = grid.v_node(i);
                        cy[idx] = grid.v_node(j);
                        cz[idx] = grid.v_node(k);
                        cI[idx] = grid.I_node(l);
                        cbr[idx] = bracket({cx[idx], cy[idx], cz[idx]}, cI[idx], params);
                    }
    }
    std::vector<double> per_node(n, 0.0);
    parallel_for(n, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t o = b0; o < b1; ++o) {
            double acc = 0.0;
            for (std::size_t q = 0; q < n; ++q) {
                double dx = cx[o] - cx[q], dy = cy[o] - cy[q], dz = cz[o] - cz[q];
                double E = 0.25 * m * (dx * dx + dy * dy + dz * dz) + cI[o] + cI[q];
                double val = std::pow(E / m, 2.0 * a) * std::pow(cbr[q], -2.0 * s);
                acc += val;
            }
            per_node[o] = std::pow(cbr[o], -s) * std::sqrt(w * acc);
        }
    });
    double best = 0.0;
    for (double x : per_node)
        if (x > best) best = x;
    return best;
}

std::pair<double, double> oscillatory_bound_check(double x, double alpha) {
    if (alpha < 0.0)
        throw std::invalid_argument("oscillatory_bound_check: alpha must be >= 0");
    std::complex<double> val = tanh_sinh_complex(
        [&](double r) {
            double amp = std::pow(r, alpha) * std::pow(1.0 - r, alpha);
            return std::complex<double>(amp * std::cos(x * r), -amp * std::sin(x * r));
        },
        0.0, 1.0, 1e-11, 13);
    double rhs = 2.0 * std::min(1.0, x != 0.0 ? 1.0 / std::abs(x) : 1.0);
    return {std::abs(val), rhs};
}

} // namespace polyboltz
