#include "polyboltz/collision_op.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <stdexcept>
#include <string>

#include "polyboltz/parallel.hpp"
#include "polyboltz/quadrature.hpp"
#include "polyboltz/rng.hpp"
#include "polyboltz/summation.hpp"

namespace polyboltz {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kTwoPi = 2.0 * kPi;

// RNG stream purposes; folded into the seed so every operation draws an
// independent stream keyed by (output-node index, sample index).
constexpr std::uint64_t kStreamGain = 0x9e3779b97f4a7c15ULL * 1;
constexpr std::uint64_t kStreamNu = 0x9e3779b97f4a7c15ULL * 2;
constexpr std::uint64_t kStreamGradV = 0x9e3779b97f4a7c15ULL * 3;
constexpr std::uint64_t kStreamNuDI = 0x9e3779b97f4a7c15ULL * 4;
constexpr std::uint64_t kStreamWeak = 0x9e3779b97f4a7c15ULL * 5;
constexpr std::uint64_t kStreamAvg = 0x9e3779b97f4a7c15ULL * 6;
constexpr std::uint64_t kStreamRemainder = 0x9e3779b97f4a7c15ULL * 7;
constexpr std::uint64_t kStreamNuAt = 0x9e3779b97f4a7c15ULL * 8;

inline double dot3(const Vec3& a, const Vec3& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline double bitcast_float(std::uint32_t bits) {
    return static_cast<double>(std::bit_cast<float>(bits));
}

/// x^e with fast paths for the half-integer exponents the model uses.
inline double apply_pow(double x, double e) {
    if (e == 0.0) return 1.0;
    if (e == 0.5) return std::sqrt(x);
    if (e == 1.0) return x;
    if (e == 1.5) return x * std::sqrt(x);
    if (e == 2.0) return x * x;
    if (e == -0.5) return 1.0 / std::sqrt(x);
    if (e == -1.0) return 1.0 / x;
    return std::pow(x, e);
}

inline double d_alpha_fast(double r, double R, double alpha) {
    const double omR = 1.0 - R;
    if (alpha == 0.0) return omR * std::sqrt(R);
    if (alpha == 0.5) return std::sqrt(r * (1.0 - r) * R) * omR * omR;
    if (alpha == 1.0) return r * (1.0 - r) * omR * omR * omR * std::sqrt(R);
    return std::pow(r * (1.0 - r), alpha) * std::pow(omR, 2.0 * alpha + 1.0) * std::sqrt(R);
}

// Gauss-Legendre nodes/weights on [-1, 1].
struct GaussRule {
    const double* x;
    const double* w;
    int n;
};

const double kGx1[] = {0.0};
const double kGw1[] = {2.0};
const double kGx2[] = {-0.5773502691896257645, 0.5773502691896257645};
const double kGw2[] = {1.0, 1.0};
const double kGx3[] = {-0.7745966692414833770, 0.0, 0.7745966692414833770};
const double kGw3[] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
const double kGx4[] = {-0.8611363115940525752, -0.3399810435848562648, 0.3399810435848562648,
                       0.8611363115940525752};
const double kGw4[] = {0.3478548451374538574, 0.6521451548625461426, 0.6521451548625461426,
                       0.3478548451374538574};
const double kGx5[] = {-0.9061798459386639928, -0.5384693101056830910, 0.0,
                       0.5384693101056830910, 0.9061798459386639928};
const double kGw5[] = {0.2369268850561890875, 0.4786286704993664680, 0.5688888888888888889,
                       0.4786286704993664680, 0.2369268850561890875};
const double kGx16[] = {
    -0.9894009349916499326, -0.9445750230732325761, -0.8656312023878317439,
    -0.7554044083550030339, -0.6178762444026437484, -0.4580167776572273863,
    -0.2816035507792589132, -0.0950125098376374402, 0.0950125098376374402,
    0.2816035507792589132,  0.4580167776572273863,  0.6178762444026437484,
    0.7554044083550030339,  0.8656312023878317439,  0.9445750230732325761,
    0.9894009349916499326};
const double kGw16[] = {
    0.0271524594117540949, 0.0622535239386478929, 0.0951585116824927848,
    0.1246289712555338720, 0.1495959888165767320, 0.1691565193950025382,
    0.1826034150449235889, 0.1894506104550684963, 0.1894506104550684963,
    0.1826034150449235889, 0.1691565193950025382, 0.1495959888165767320,
    0.1246289712555338720, 0.0951585116824927848, 0.0622535239386478929,
    0.0271524594117540949};

GaussRule gauss_rule(int n) {
    switch (n) {
        case 1: return {kGx1, kGw1, 1};
        case 2: return {kGx2, kGw2, 2};
        case 3: return {kGx3, kGw3, 3};
        case 4: return {kGx4, kGw4, 4};
        case 5: return {kGx5, kGw5, 5};
        default:
            throw std::invalid_argument(
                "QuadratureSpec: deterministic Gauss order must be between 1 and 5");
    }
}

/// Integrals E_k = int_p^q x^k exp(-a (x-u)^2) dx for k = 0..3, closed form.
struct PieceMoments {
    double e0, e1, e2, e3;
};

PieceMoments piece_moments(double p, double q, double a, double u) {
    const double s = std::sqrt(a);
    const double tp = p - u, tq = q - u;
    const double g0 = 0.5 * std::sqrt(kPi / a) * (std::erf(s * tq) - std::erf(s * tp));
    const double ep = std::exp(-a * tp * tp), eq = std::exp(-a * tq * tq);
    const double inv2a = 0.5 / a;
    const double g1 = (ep - eq) * inv2a;
    const double g2 = (tp * ep - tq * eq) * inv2a + g0 * inv2a;
    const double g3 = (tp * tp * ep - tq * tq * eq) * inv2a + 2.0 * g1 * inv2a;
    PieceMoments out;
    out.e0 = g0;
    out.e1 = u * g0 + g1;
    out.e2 = u * u * g0 + 2.0 * u * g1 + g2;
    out.e3 = u * u * u * g0 + 3.0 * u * u * g1 + 3.0 * u * g2 + g3;
    return out;
}

/// Walker alias table over cells weighted by nonnegative node values.
/// Acceptance thresholds are stored as 32-bit fixed point so a slot is eight
/// bytes; the quantization only reroutes an O(2^-32) sliver of each slot, and
/// full slots keep themselves as alias so the saturated threshold is exact.
struct AliasTable {
    static constexpr double kFixedScale = 4294967295.0;  // 2^32 - 1
    struct Entry {
        std::uint32_t thresh;
        std::uint32_t alias;
    };
    std::vector<Entry> slot;

    void build(const std::vector<double>& w, double total) {
        const std::size_t n = w.size();
        slot.assign(n, Entry{0xffffffffu, 0});
        std::vector<double> p(n);
        for (std::size_t i = 0; i < n; ++i) {
            slot[i].alias = static_cast<std::uint32_t>(i);
            p[i] = w[i] * static_cast<double>(n) / total;
        }
        std::vector<std::uint32_t> small, large;
        small.reserve(n);
        large.reserve(n);
        for (std::size_t i = 0; i < n; ++i)
            (p[i] < 1.0 ? small : large).push_back(static_cast<std::uint32_t>(i));
        while (!small.empty() && !large.empty()) {
            const std::uint32_t s = small.back();
            small.pop_back();
            const std::uint32_t l = large.back();
            large.pop_back();
            slot[s].thresh = static_cast<std::uint32_t>(p[s] * kFixedScale);
            slot[s].alias = l;
            p[l] = (p[l] + p[s]) - 1.0;
            (p[l] < 1.0 ? small : large).push_back(l);
        }
        // leftovers are numerically 1 and never had their alias reassigned
        while (!small.empty()) {
            slot[small.back()].thresh = 0xffffffffu;
            small.pop_back();
        }
        while (!large.empty()) {
            slot[large.back()].thresh = 0xffffffffu;
            large.pop_back();
        }
    }

    std::uint32_t sample(double u) const {
        const std::size_t n = slot.size();
        double t = u * static_cast<double>(n);
        std::size_t i = static_cast<std::size_t>(t);
        if (i >= n) i = n - 1;
        const std::uint32_t frac = static_cast<std::uint32_t>(static_cast<std::uint64_t>(
            (t - static_cast<double>(i)) * kFixedScale));
        const Entry e = slot[i];
        return frac < e.thresh ? static_cast<std::uint32_t>(i) : e.alias;
    }
};

/// Equal-probability-bin proposal on (0, 1) built from a numeric quantile
/// table of an unnormalized density. Sampling is exact with respect to the
/// stored edges: the realized proposal density is piecewise constant and
/// pdf() reports exactly that value, so importance ratios stay unbiased no
/// matter how approximate the quantile construction was.
struct HistProposal {
    int K = 0;
    std::vector<double> edge;

    template <class F>
    void build(F&& pdf, int bins, int fine) {
        K = bins;
        std::vector<double> cdf(static_cast<std::size_t>(fine) + 1, 0.0);
        const double h = 1.0 / fine;
        for (int i = 0; i < fine; ++i)
            cdf[i + 1] = cdf[i] + pdf((i + 0.5) * h) * h;
        const double total = cdf[fine];
        edge.assign(static_cast<std::size_t>(K) + 1, 0.0);
        edge[K] = 1.0;
        int pos = 0;
        for (int k = 1; k < K; ++k) {
            const double target = total * k / K;
            while (pos < fine - 1 && cdf[pos + 1] < target) ++pos;
            const double c0 = cdf[pos], c1 = cdf[pos + 1];
            const double frac = c1 > c0 ? (target - c0) / (c1 - c0) : 0.5;
            edge[k] = (pos + frac) * h;
        }
        for (int k = 1; k <= K; ++k)
            if (edge[k] <= edge[k - 1]) edge[k] = std::min(1.0, edge[k - 1] + 1e-12);
    }

    void sample(double u, double& x, double& dens) const {
        double t = u * K;
        int k = static_cast<int>(t);
        if (k >= K) k = K - 1;
        const double f = t - k;
        const double lo = edge[k], hi = edge[k + 1];
        x = lo + f * (hi - lo);
        dens = (1.0 / K) / (hi - lo);
    }

    /// Same draw, but reporting 1/density (keeps divisions off the hot path).
    void sample_inv(double u, double& x, double& inv_dens) const {
        double t = u * K;
        int k = static_cast<int>(t);
        if (k >= K) k = K - 1;
        const double f = t - k;
        const double lo = edge[k], hi = edge[k + 1];
        x = lo + f * (hi - lo);
        inv_dens = static_cast<double>(K) * (hi - lo);
    }

    double node(int k) const {
        // quantile midpoint of bin k, for deterministic rules
        return 0.5 * (edge[k] + edge[k + 1]);
    }
};

/// Uniform random point on the unit circle without trig calls
/// (Marsaglia rejection; the loop length is part of the per-sample stream).
inline void polar_unit(CounterRng& rng, double& c, double& s) {
    for (;;) {
        const double a = 2.0 * rng.next_unit() - 1.0;
        const double b = 2.0 * rng.next_unit() - 1.0;
        const double q = a * a + b * b;
        if (q > 0.0 && q <= 1.0) {
            c = (a * a - b * b) / q;
            s = 2.0 * a * b / q;
            return;
        }
    }
}

/// Orthonormal pair perpendicular to the unit vector n.
inline void unit_frame(const Vec3& n, Vec3& e1, Vec3& e2) {
    if (std::abs(n[0]) < 0.9) {
        // cross(n, ex)
        e1 = {0.0, n[2], -n[1]};
    } else {
        // cross(n, ey)
        e1 = {-n[2], 0.0, n[0]};
    }
    const double inv = 1.0 / std::sqrt(dot3(e1, e1));
    e1 = {e1[0] * inv, e1[1] * inv, e1[2] * inv};
    e2 = {n[1] * e1[2] - n[2] * e1[1], n[2] * e1[0] - n[0] * e1[2], n[0] * e1[1] - n[1] * e1[0]};
}

/// (r, R) proposal. For alpha >= 0 an equal-bin histogram proposal is used
/// with the exact density ratio d_alpha / (p_r p_R); for alpha < 0 the
/// r-marginal is endpoint-singular, so exact Beta sampling (constant ratio
/// ||d_alpha||_1) is used instead.
struct RRProposal {
    HistProposal hist_r, hist_R;
    bool use_hist = true;
    double alpha = 0.0;
    double beta_r_a = 1.0, beta_r_b = 1.0;
    double beta_R_a = 1.5, beta_R_b = 2.0;
    double d_l1 = 0.0;

    void build(double a) {
        alpha = a;
        d_l1 = d_alpha_l1(a);
        use_hist = a >= 0.0;
        if (use_hist) {
            hist_r.build([a](double r) { return std::pow(r * (1.0 - r), a); }, 512, 16384);
            hist_R.build([a](double R) { return std::pow(1.0 - R, 2.0 * a + 1.0) * std::sqrt(R); },
                         512, 16384);
        } else {
            beta_r_a = a + 1.0;
            beta_r_b = a + 1.0;
            beta_R_a = 1.5;
            beta_R_b = 2.0 * a + 2.0;
        }
    }

    /// Draw (r, R) and return the weight d_alpha(r,R) / proposal_density.
    double draw_rR(CounterRng& rng, double& r, double& R) const {
        if (use_hist) {
            double ir, iR;
            hist_r.sample_inv(rng.next_unit(), r, ir);
            hist_R.sample_inv(rng.next_unit(), R, iR);
            return d_alpha_fast(r, R, alpha) * ir * iR;
        }
        r = rng.next_beta(beta_r_a, beta_r_b);
        R = rng.next_beta(beta_R_a, beta_R_b);
        return d_l1;
    }
};

/// Mix a two-percent uniform component into piecewise-constant proposal
/// weights so the proposal support covers the whole box: the gain integrand
/// can be nonzero at star points where the field itself vanishes, and the
/// interpolated field extends half a cell past its last positive node.
/// Returns the floored total (zero if the weights were all zero).
double add_uniform_floor(std::vector<double>& w) {
    double tot = 0.0;
    for (double x : w) tot += x;
    if (!(tot > 0.0)) return 0.0;
    const double fl = 0.02 * tot / static_cast<double>(w.size());
    double tot2 = 0.0;
    for (double& x : w) {
        x += fl;
        tot2 += x;
    }
    return tot2;
}

/// Per-cell lookup for the sampler loops: node coordinates packed into one
/// word plus the reciprocal proposal weight, so drawing a star costs one
/// 16-byte read instead of an integer div/mod chain and a float division.
struct CellRef {
    std::uint64_t ijkl;
    double inv_weight;
};

/// Per-sample state carried between the transform phase and the table-lookup
/// phase of the batched gain loop.
struct GainSpill {
    Vec3 vp;
    Vec3 vps;
    double Ip;
    double Ips;
    double S;
    double wpre; ///< weight prefactor; negative marks a rejected sample
    double inv_w;
};

std::vector<CellRef> build_cell_refs(const PhaseGrid& grid, const std::vector<double>& w) {
    std::vector<CellRef> refs(grid.size());
    std::size_t n = 0;
    for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(grid.Nv); ++i)
        for (std::uint64_t j = 0; j < static_cast<std::uint64_t>(grid.Nv); ++j)
            for (std::uint64_t k = 0; k < static_cast<std::uint64_t>(grid.Nv); ++k)
                for (std::uint64_t l = 0; l < static_cast<std::uint64_t>(grid.NI); ++l, ++n)
                    refs[n] = {(i << 48) | (j << 32) | (k << 16) | l,
                               w[n] > 0.0 ? 1.0 / w[n] : 0.0};
    return refs;
}

struct BEval {
    const AngularKernel* b;
    bool is_const;
    double level;

    explicit BEval(const AngularKernel& bk)
        : b(&bk), is_const(bk.family == AngularKernel::Family::constant), level(bk.c) {}
    double operator()(double x) const { return is_const ? level : (*b)(x); }
};

void require_same_grid(const PhaseGrid& a, const PhaseGrid& b, const char* what) {
    if (!(a == b))
        throw std::invalid_argument(std::string(what) + ": fields live on different grids");
}

void finish_mean_se(double sumw, double sumw2, long long n, double& mean, double& se) {
    mean = sumw / static_cast<double>(n);
    const double var_num = sumw2 - sumw * sumw / static_cast<double>(n);
    se = var_num > 0.0 && n > 1
             ? std::sqrt(var_num / (static_cast<double>(n) * static_cast<double>(n - 1)))
             : 0.0;
}

#if POLYBOLTZ_SIMD512

/// Grid constants for the eight-lane interpolant lookup.
struct HTable8 {
    const float* H;
    int Nv, NI;
    double Lv, Imax, inv_hv, inv_hI;

    explicit HTable8(const InterpTable& T)
        : H(T.h_nodes().data()), Nv(T.grid().Nv), NI(T.grid().NI), Lv(T.grid().Lv),
          Imax(T.grid().Imax), inv_hv(1.0 / T.grid().hv()), inv_hI(1.0 / T.grid().hI()) {}
};

/// Eight h_factor lookups at once. Interior lanes use masked gathers; lanes in
/// the boundary shell fall back to the scalar routine; lanes outside the box
/// return zero.
inline __m512d h_factor8(const HTable8& t, const InterpTable& T, __m512d vx, __m512d vy,
                         __m512d vz, __m512d vI) {
    const __m512d LvP = _mm512_set1_pd(t.Lv);
    const __m512d LvN = _mm512_set1_pd(-t.Lv);
    __mmask8 inbox = _mm512_cmp_pd_mask(vI, _mm512_setzero_pd(), _CMP_GE_OQ) &
                     _mm512_cmp_pd_mask(vI, _mm512_set1_pd(t.Imax), _CMP_LE_OQ) &
                     _mm512_cmp_pd_mask(vx, LvN, _CMP_GE_OQ) &
                     _mm512_cmp_pd_mask(vx, LvP, _CMP_LE_OQ) &
                     _mm512_cmp_pd_mask(vy, LvN, _CMP_GE_OQ) &
                     _mm512_cmp_pd_mask(vy, LvP, _CMP_LE_OQ) &
                     _mm512_cmp_pd_mask(vz, LvN, _CMP_GE_OQ) &
                     _mm512_cmp_pd_mask(vz, LvP, _CMP_LE_OQ);
    if (!inbox) return _mm512_setzero_pd();
    const __m512d half = _mm512_set1_pd(0.5);
    const __m512d inv_hv = _mm512_set1_pd(t.inv_hv);
    const __m512d tx = _mm512_sub_pd(_mm512_mul_pd(_mm512_add_pd(vx, LvP), inv_hv), half);
    const __m512d ty = _mm512_sub_pd(_mm512_mul_pd(_mm512_add_pd(vy, LvP), inv_hv), half);
    const __m512d tz = _mm512_sub_pd(_mm512_mul_pd(_mm512_add_pd(vz, LvP), inv_hv), half);
    const __m512d tI =
        _mm512_sub_pd(_mm512_mul_pd(vI, _mm512_set1_pd(t.inv_hI)), half);
    constexpr int kDown = _MM_FROUND_TO_NEG_INF | _MM_FROUND_NO_EXC;
    const __m512i bi = _mm512_cvt_roundpd_epi64(tx, kDown);
    const __m512i bj = _mm512_cvt_roundpd_epi64(ty, kDown);
    const __m512i bk = _mm512_cvt_roundpd_epi64(tz, kDown);
    const __m512i bl = _mm512_cvt_roundpd_epi64(tI, kDown);
    const __m512d fx = _mm512_sub_pd(tx, _mm512_cvtepi64_pd(bi));
    const __m512d fy = _mm512_sub_pd(ty, _mm512_cvtepi64_pd(bj));
    const __m512d fz = _mm512_sub_pd(tz, _mm512_cvtepi64_pd(bk));
    const __m512d fI = _mm512_sub_pd(tI, _mm512_cvtepi64_pd(bl));
    const __m512i zero = _mm512_setzero_si512();
    const __mmask8 interior =
        inbox & _mm512_cmp_epi64_mask(bi, zero, _MM_CMPINT_GE) &
        _mm512_cmp_epi64_mask(bi, _mm512_set1_epi64(t.Nv - 1), _MM_CMPINT_LT) &
        _mm512_cmp_epi64_mask(bj, zero, _MM_CMPINT_GE) &
        _mm512_cmp_epi64_mask(bj, _mm512_set1_epi64(t.Nv - 1), _MM_CMPINT_LT) &
        _mm512_cmp_epi64_mask(bk, zero, _MM_CMPINT_GE) &
        _mm512_cmp_epi64_mask(bk, _mm512_set1_epi64(t.Nv - 1), _MM_CMPINT_LT) &
        _mm512_cmp_epi64_mask(bl, zero, _MM_CMPINT_GE) &
        _mm512_cmp_epi64_mask(bl, _mm512_set1_epi64(t.NI - 1), _MM_CMPINT_LT);
    __m512d res = _mm512_setzero_pd();
    if (interior) {
        const __m512i nv = _mm512_set1_epi64(t.Nv);
        const __m512i ni = _mm512_set1_epi64(t.NI);
        const __m512i base = _mm512_add_epi64(
            _mm512_mullo_epi64(
                _mm512_add_epi64(
                    _mm512_mullo_epi64(_mm512_add_epi64(_mm512_mullo_epi64(bi, nv), bj), nv),
                    bk),
                ni),
            bl);
        const int sk = t.NI;
        const int sj = sk * t.Nv;
        const int si = sj * t.Nv;
        const auto corner = [&](int off) {
            const __m512i idx = _mm512_add_epi64(base, _mm512_set1_epi64(off));
            const __m512i qw =
                _mm512_mask_i64gather_epi64(zero, interior, idx, t.H, 4);
            __m512d lo, hi;
            simd::split_pair(qw, lo, hi);
            return _mm512_fmadd_pd(fI, _mm512_sub_pd(hi, lo), lo);
        };
        const __m512d p000 = corner(0), p001 = corner(sk);
        const __m512d p010 = corner(sj), p011 = corner(sj + sk);
        const __m512d p100 = corner(si), p101 = corner(si + sk);
        const __m512d p110 = corner(si + sj), p111 = corner(si + sj + sk);
        const __m512d q00 = _mm512_fmadd_pd(fz, _mm512_sub_pd(p001, p000), p000);
        const __m512d q01 = _mm512_fmadd_pd(fz, _mm512_sub_pd(p011, p010), p010);
        const __m512d q10 = _mm512_fmadd_pd(fz, _mm512_sub_pd(p101, p100), p100);
        const __m512d q11 = _mm512_fmadd_pd(fz, _mm512_sub_pd(p111, p110), p110);
        const __m512d r0 = _mm512_fmadd_pd(fy, _mm512_sub_pd(q01, q00), q00);
        const __m512d r1 = _mm512_fmadd_pd(fy, _mm512_sub_pd(q11, q10), q10);
        res = _mm512_maskz_mov_pd(interior, _mm512_fmadd_pd(fx, _mm512_sub_pd(r1, r0), r0));
    }
    const __mmask8 shell = inbox & ~interior;
    if (shell) {
        alignas(64) double ax[8], ay[8], az[8], aI[8], ar[8];
        _mm512_store_pd(ax, vx);
        _mm512_store_pd(ay, vy);
        _mm512_store_pd(az, vz);
        _mm512_store_pd(aI, vI);
        _mm512_store_pd(ar, res);
        for (int l = 0; l < 8; ++l)
            if (shell & (1 << l)) ar[l] = T.h_factor(Vec3{ax[l], ay[l], az[l]}, aI[l]);
        res = _mm512_load_pd(ar);
    }
    return res;
}

/// Eight equal-bin proposal draws; mirrors HistProposal::sample_inv.
inline void hist_sample8(const std::vector<double>& edge, int K, __m512d u, __m512d& x,
                         __m512d& inv_dens) {
    const __m512d kd = _mm512_set1_pd(static_cast<double>(K));
    const __m512d tt = _mm512_mul_pd(u, kd);
    __m512i k = _mm512_cvttpd_epi64(tt);
    k = _mm512_min_epi64(k, _mm512_set1_epi64(K - 1));
    const __m512d fr = _mm512_sub_pd(tt, _mm512_cvtepi64_pd(k));
    const double* E = edge.data();
    const __m512d lo = _mm512_i64gather_pd(k, E, 8);
    const __m512d hi = _mm512_i64gather_pd(_mm512_add_epi64(k, _mm512_set1_epi64(1)), E, 8);
    const __m512d span = _mm512_sub_pd(hi, lo);
    x = _mm512_fmadd_pd(fr, span, lo);
    inv_dens = _mm512_mul_pd(kd, span);
}

/// Eight-lane d_alpha for the sampler's fast exponents.
inline __m512d d_alpha8(__m512d r, __m512d R, double alpha) {
    const __m512d one = _mm512_set1_pd(1.0);
    const __m512d omR = _mm512_sub_pd(one, R);
    const __m512d sR = _mm512_sqrt_pd(R);
    if (alpha == 0.0) return _mm512_mul_pd(omR, sR);
    const __m512d r1r = _mm512_mul_pd(r, _mm512_sub_pd(one, r));
    if (alpha == 0.5)
        return _mm512_mul_pd(_mm512_sqrt_pd(_mm512_mul_pd(r1r, R)), _mm512_mul_pd(omR, omR));
    // alpha == 1
    return _mm512_mul_pd(_mm512_mul_pd(r1r, _mm512_mul_pd(omR, _mm512_mul_pd(omR, omR))), sR);
}

/// Eight-lane Marsaglia point on the unit circle; each lane consumes exactly
/// the draws its scalar counterpart would.
inline void polar_unit8(simd::Rng8& rng, __m512d& cp, __m512d& sp) {
    const __m512d one = _mm512_set1_pd(1.0);
    const __m512d two = _mm512_set1_pd(2.0);
    cp = _mm512_setzero_pd();
    sp = _mm512_setzero_pd();
    __mmask8 pend = 0xff;
    do {
        const __m512d a = _mm512_fmsub_pd(two, rng.next_unit_masked(pend), one);
        const __m512d b = _mm512_fmsub_pd(two, rng.next_unit_masked(pend), one);
        const __m512d a2 = _mm512_mul_pd(a, a);
        const __m512d b2 = _mm512_mul_pd(b, b);
        const __m512d q = _mm512_add_pd(a2, b2);
        const __mmask8 ok = pend & _mm512_cmp_pd_mask(q, _mm512_setzero_pd(), _CMP_GT_OQ) &
                            _mm512_cmp_pd_mask(q, one, _CMP_LE_OQ);
        const __m512d iq = _mm512_div_pd(one, q);
        cp = _mm512_mask_mov_pd(cp, ok, _mm512_mul_pd(_mm512_sub_pd(a2, b2), iq));
        sp = _mm512_mask_mov_pd(
            sp, ok, _mm512_mul_pd(two, _mm512_mul_pd(_mm512_mul_pd(a, b), iq)));
        pend &= ~ok;
    } while (pend);
}

inline double hsum8(__m512d v) {
    alignas(64) double a[8];
    _mm512_store_pd(a, v);
    double s = 0.0;
    for (int l = 0; l < 8; ++l) s += a[l];
    return s;
}

/// Eight-samples-at-a-time gain kernel; lane L of group s0 reproduces the
/// scalar sample s0 + L draw for draw.
void gain_mc_simd(const InterpTable& f, const InterpTable& g, const ModelParams& params,
                  double bconst, const QuadratureSpec& quad, const AliasTable& cells,
                  const std::vector<CellRef>& refs, const RRProposal& rr, double pref_const,
                  OperatorField& out) {
    const PhaseGrid& grid = f.grid();
    const double alpha = params.alpha;
    const int ca = simd::pow_code(alpha);
    const int cg = simd::pow_code(0.5 * params.gamma);
    const double inv_m = 1.0 / params.m;
    const int mc = quad.mc_samples;

    const Vec3 uf3 = f.carrier_u(), ug3 = g.carrier_u();
    const __m512d ufx = _mm512_set1_pd(uf3[0]), ufy = _mm512_set1_pd(uf3[1]),
                  ufz = _mm512_set1_pd(uf3[2]);
    const __m512d ugx = _mm512_set1_pd(ug3[0]), ugy = _mm512_set1_pd(ug3[1]),
                  ugz = _mm512_set1_pd(ug3[2]);
    const __m512d af = _mm512_set1_pd(f.carrier_inv2theta_m());
    const __m512d ag = _mm512_set1_pd(g.carrier_inv2theta_m());
    const __m512d tf = _mm512_set1_pd(f.carrier_invT());
    const __m512d tg = _mm512_set1_pd(g.carrier_invT());
    const HTable8 hf_t(f), hg_t(g);

    const __m512d one = _mm512_set1_pd(1.0);
    const __m512d hv = _mm512_set1_pd(grid.hv());
    const __m512d hI = _mm512_set1_pd(grid.hI());
    const __m512d negL = _mm512_set1_pd(-grid.Lv);
    const __m512d quarter = _mm512_set1_pd(0.25);
    const __m512d invm = _mm512_set1_pd(inv_m);
    const __m512d mm = _mm512_set1_pd(params.m);
    const __m512d ncells = _mm512_set1_pd(static_cast<double>(cells.slot.size()));
    const __m512i ncells_m1 = _mm512_set1_epi64(static_cast<long long>(cells.slot.size()) - 1);
    const __m512d fixed_scale = _mm512_set1_pd(AliasTable::kFixedScale);
    const __m512i lo32mask = _mm512_set1_epi64(0xffffffffLL);
    const std::uint64_t* slot_raw = reinterpret_cast<const std::uint64_t*>(cells.slot.data());
    const std::uint64_t* refs_raw = reinterpret_cast<const std::uint64_t*>(refs.data());

    parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const __m512d vx = _mm512_set1_pd(grid.v_node(i));
            const __m512d vy = _mm512_set1_pd(grid.v_node(j));
            const __m512d vz = _mm512_set1_pd(grid.v_node(k));
            const __m512d In = _mm512_set1_pd(grid.I_node(l));
            const __m512d prefb =
                _mm512_set1_pd(pref_const * apply_pow(grid.I_node(l), alpha) * bconst);
            const std::uint64_t pfx = simd::Rng8::prefix(quad.seed + kStreamGain, n);
            __m512d sumv = _mm512_setzero_pd();
            __m512d sumv2 = _mm512_setzero_pd();
            for (int s0 = 0; s0 < mc; s0 += 8) {
                simd::Rng8 rng;
                rng.init(pfx, static_cast<std::uint64_t>(s0));
                // star cell
                const __m512d uc = rng.next_unit();
                const __m512d tcell = _mm512_mul_pd(uc, ncells);
                __m512i ci = _mm512_min_epi64(_mm512_cvttpd_epi64(tcell), ncells_m1);
                const __m512i frac = _mm512_cvttpd_epu64(_mm512_mul_pd(
                    _mm512_sub_pd(tcell, _mm512_cvtepi64_pd(ci)), fixed_scale));
                const __m512i entry = _mm512_i64gather_epi64(ci, slot_raw, 8);
                const __mmask8 keep = _mm512_cmp_epu64_mask(
                    frac, _mm512_and_epi64(entry, lo32mask), _MM_CMPINT_LT);
                const __m512i cell =
                    _mm512_mask_blend_epi64(keep, _mm512_srli_epi64(entry, 32), ci);
                const __m512i cell2 = _mm512_add_epi64(cell, cell);
                const __m512i ijkl = _mm512_i64gather_epi64(cell2, refs_raw, 8);
                const __m512d invw = _mm512_i64gather_pd(
                    _mm512_add_epi64(cell2, _mm512_set1_epi64(1)),
                    reinterpret_cast<const double*>(refs_raw), 8);
                // star point, jittered within the cell
                const __m512d di = _mm512_cvtepu64_pd(_mm512_srli_epi64(ijkl, 48));
                const __m512d dj = _mm512_cvtepu64_pd(
                    _mm512_and_epi64(_mm512_srli_epi64(ijkl, 32), lo32mask &
                                     _mm512_set1_epi64(0xffffLL)));
                const __m512d dk = _mm512_cvtepu64_pd(
                    _mm512_and_epi64(_mm512_srli_epi64(ijkl, 16), _mm512_set1_epi64(0xffffLL)));
                const __m512d dl =
                    _mm512_cvtepu64_pd(_mm512_and_epi64(ijkl, _mm512_set1_epi64(0xffffLL)));
                const __m512d vsx =
                    _mm512_add_pd(negL, _mm512_mul_pd(_mm512_add_pd(di, rng.next_unit()), hv));
                const __m512d vsy =
                    _mm512_add_pd(negL, _mm512_mul_pd(_mm512_add_pd(dj, rng.next_unit()), hv));
                const __m512d vsz =
                    _mm512_add_pd(negL, _mm512_mul_pd(_mm512_add_pd(dk, rng.next_unit()), hv));
                const __m512d Is = _mm512_mul_pd(_mm512_add_pd(dl, rng.next_unit()), hI);
                // (r, R) and the angular node
                __m512d r, ir, R, iR;
                hist_sample8(rr.hist_r.edge, rr.hist_r.K, rng.next_unit(), r, ir);
                hist_sample8(rr.hist_R.edge, rr.hist_R.K, rng.next_unit(), R, iR);
                const __m512d wd =
                    _mm512_mul_pd(d_alpha8(r, R, alpha), _mm512_mul_pd(ir, iR));
                __m512d z = rng.next_unit();
                z = _mm512_mask_mov_pd(z, _mm512_cmp_pd_mask(z, _mm512_setzero_pd(), _CMP_EQ_OQ),
                                       _mm512_set1_pd(0x1.0p-55));
                const __m512d ux = _mm512_sub_pd(vx, vsx);
                const __m512d uy = _mm512_sub_pd(vy, vsy);
                const __m512d uz = _mm512_sub_pd(vz, vsz);
                const __m512d u2 = _mm512_add_pd(
                    _mm512_mul_pd(ux, ux),
                    _mm512_add_pd(_mm512_mul_pd(uy, uy), _mm512_mul_pd(uz, uz)));
                const __m512d Em = _mm512_add_pd(
                    _mm512_mul_pd(quarter, u2),
                    _mm512_mul_pd(_mm512_add_pd(In, Is), invm));
                const __m512d E = _mm512_mul_pd(mm, Em);
                const __m512d omR = _mm512_sub_pd(one, R);
                const __m512d Ip = _mm512_mul_pd(r, _mm512_mul_pd(omR, E));
                const __m512d Ips = _mm512_mul_pd(_mm512_sub_pd(one, r), _mm512_mul_pd(omR, E));
                // unit vector along u, with the degenerate default
                const __mmask8 upos = _mm512_cmp_pd_mask(u2, _mm512_setzero_pd(), _CMP_GT_OQ);
                const __m512d inv_un = _mm512_div_pd(one, _mm512_sqrt_pd(u2));
                const __m512d nx = _mm512_mask_mov_pd(one, upos, _mm512_mul_pd(ux, inv_un));
                const __m512d ny =
                    _mm512_maskz_mov_pd(upos, _mm512_mul_pd(uy, inv_un));
                const __m512d nz =
                    _mm512_maskz_mov_pd(upos, _mm512_mul_pd(uz, inv_un));
                // orthonormal frame
                const __mmask8 small_x = _mm512_cmp_pd_mask(
                    _mm512_abs_pd(nx), _mm512_set1_pd(0.9), _CMP_LT_OQ);
                __m512d e1x = _mm512_maskz_mov_pd(~small_x, _mm512_sub_pd(_mm512_setzero_pd(), nz));
                __m512d e1y = _mm512_maskz_mov_pd(small_x, nz);
                __m512d e1z = _mm512_mask_mov_pd(nx, small_x,
                                                 _mm512_sub_pd(_mm512_setzero_pd(), ny));
                const __m512d e1n = _mm512_div_pd(
                    one, _mm512_sqrt_pd(_mm512_add_pd(
                             _mm512_mul_pd(e1x, e1x),
                             _mm512_add_pd(_mm512_mul_pd(e1y, e1y), _mm512_mul_pd(e1z, e1z)))));
                e1x = _mm512_mul_pd(e1x, e1n);
                e1y = _mm512_mul_pd(e1y, e1n);
                e1z = _mm512_mul_pd(e1z, e1n);
                const __m512d e2x = _mm512_sub_pd(_mm512_mul_pd(ny, e1z), _mm512_mul_pd(nz, e1y));
                const __m512d e2y = _mm512_sub_pd(_mm512_mul_pd(nz, e1x), _mm512_mul_pd(nx, e1z));
                const __m512d e2z = _mm512_sub_pd(_mm512_mul_pd(nx, e1y), _mm512_mul_pd(ny, e1x));
                __m512d cp, sp;
                polar_unit8(rng, cp, sp);
                const __m512d sq =
                    _mm512_sqrt_pd(_mm512_sub_pd(one, _mm512_mul_pd(z, z)));
                const __m512d sgx = _mm512_fmadd_pd(
                    sq, _mm512_fmadd_pd(cp, e1x, _mm512_mul_pd(sp, e2x)), _mm512_mul_pd(z, nx));
                const __m512d sgy = _mm512_fmadd_pd(
                    sq, _mm512_fmadd_pd(cp, e1y, _mm512_mul_pd(sp, e2y)), _mm512_mul_pd(z, ny));
                const __m512d sgz = _mm512_fmadd_pd(
                    sq, _mm512_fmadd_pd(cp, e1z, _mm512_mul_pd(sp, e2z)), _mm512_mul_pd(z, nz));
                const __m512d rho = _mm512_sqrt_pd(_mm512_mul_pd(R, Em));
                const __m512d vcx = _mm512_mul_pd(_mm512_set1_pd(0.5), _mm512_add_pd(vx, vsx));
                const __m512d vcy = _mm512_mul_pd(_mm512_set1_pd(0.5), _mm512_add_pd(vy, vsy));
                const __m512d vcz = _mm512_mul_pd(_mm512_set1_pd(0.5), _mm512_add_pd(vz, vsz));
                const __m512d vpx = _mm512_fmadd_pd(rho, sgx, vcx);
                const __m512d vpy = _mm512_fmadd_pd(rho, sgy, vcy);
                const __m512d vpz = _mm512_fmadd_pd(rho, sgz, vcz);
                const __m512d vqx = _mm512_fnmadd_pd(rho, sgx, vcx);
                const __m512d vqy = _mm512_fnmadd_pd(rho, sgy, vcy);
                const __m512d vqz = _mm512_fnmadd_pd(rho, sgz, vcz);
                const __m512d hfv = h_factor8(hf_t, f, vpx, vpy, vpz, Ip);
                const __m512d hgv = h_factor8(hg_t, g, vqx, vqy, vqz, Ips);
                const __m512d dfx = _mm512_sub_pd(vpx, ufx);
                const __m512d dfy = _mm512_sub_pd(vpy, ufy);
                const __m512d dfz = _mm512_sub_pd(vpz, ufz);
                const __m512d dgx = _mm512_sub_pd(vqx, ugx);
                const __m512d dgy = _mm512_sub_pd(vqy, ugy);
                const __m512d dgz = _mm512_sub_pd(vqz, ugz);
                const __m512d S = _mm512_add_pd(
                    _mm512_add_pd(
                        _mm512_mul_pd(af, _mm512_add_pd(_mm512_mul_pd(dfx, dfx),
                                                        _mm512_add_pd(_mm512_mul_pd(dfy, dfy),
                                                                      _mm512_mul_pd(dfz, dfz)))),
                        _mm512_mul_pd(Ip, tf)),
                    _mm512_add_pd(
                        _mm512_mul_pd(ag, _mm512_add_pd(_mm512_mul_pd(dgx, dgx),
                                                        _mm512_add_pd(_mm512_mul_pd(dgy, dgy),
                                                                      _mm512_mul_pd(dgz, dgz)))),
                        _mm512_mul_pd(Ips, tg)));
                const __m512d w = _mm512_mul_pd(
                    _mm512_mul_pd(
                        _mm512_mul_pd(prefb, simd::pow_half(Em, cg)),
                        _mm512_mul_pd(_mm512_mul_pd(wd, simd::pow_half(Is, ca)),
                                      _mm512_mul_pd(hfv, hgv))),
                    _mm512_mul_pd(simd::exp_nonpos(_mm512_sub_pd(_mm512_setzero_pd(), S)),
                                  invw));
                sumv = _mm512_add_pd(sumv, w);
                sumv2 = _mm512_fmadd_pd(w, w, sumv2);
            }
            double mean, se;
            finish_mean_se(hsum8(sumv), hsum8(sumv2), mc, mean, se);
            out.value[n] = mean;
            out.se[n] = se;
        }
    });
    out.samples = static_cast<long long>(grid.size()) * mc;
}

#endif // POLYBOLTZ_SIMD512

} // namespace

// ---------------------------------------------------------------------------
// QuadratureSpec / small structs
// ---------------------------------------------------------------------------

void QuadratureSpec::validate() const {
    if (mode != Mode::monte_carlo && mode != Mode::tensor_deterministic)
        throw std::invalid_argument("QuadratureSpec: unknown mode");
    if (mc_samples < 2)
        throw std::invalid_argument("QuadratureSpec: mc_samples must be at least 2");
    if (det_v_nodes < 1 || det_v_nodes > 5 || det_I_nodes < 1 || det_I_nodes > 5)
        throw std::invalid_argument("QuadratureSpec: deterministic Gauss orders must be in 1..5");
    if (det_sigma_nodes < 1 || det_r_nodes < 1 || det_R_nodes < 1)
        throw std::invalid_argument("QuadratureSpec: deterministic node counts must be positive");
    if (det_budget < 1)
        throw std::invalid_argument("QuadratureSpec: det_budget must be positive");
}

double CollisionFrequencyField::min_value() const {
    double m = nu.empty() ? 0.0 : nu[0];
    for (double x : nu) m = std::min(m, x);
    return m;
}

double CollisionFrequencyField::max_value() const {
    double m = nu.empty() ? 0.0 : nu[0];
    for (double x : nu) m = std::max(m, x);
    return m;
}

double OperatorField::l1() const {
    NeumaierSum s;
    for (double x : value) s.add(std::abs(x));
    return grid.cell_weight() * s.value();
}

double OperatorField::l1_se() const {
    NeumaierSum s;
    for (double x : se) s.add(x * x);
    return grid.cell_weight() * std::sqrt(s.value());
}

// ---------------------------------------------------------------------------
// InterpTable
// ---------------------------------------------------------------------------

namespace {

/// Values copy + node-arithmetic L1 live outside the class to keep the header
/// minimal; the table carries what the samplers need.
struct NodeMoments {
    double p0 = 0.0;
    Vec3 p1{0, 0, 0};
    double p2 = 0.0;
    double pI = 0.0;
};

NodeMoments node_moments(const DistributionField& f) {
    const PhaseGrid& g = f.grid;
    NeumaierSum s0, sx, sy, sz, s2, sI;
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k = 0; k < g.Nv; ++k) {
                const double vx = g.v_node(i), vy = g.v_node(j), vz = g.v_node(k);
                const double vv = vx * vx + vy * vy + vz * vz;
                const std::size_t base = g.index(i, j, k, 0);
                for (int l = 0; l < g.NI; ++l) {
                    const double a = f.a[base + l];
                    if (a == 0.0) continue;
                    s0.add(a);
                    sx.add(a * vx);
                    sy.add(a * vy);
                    sz.add(a * vz);
                    s2.add(a * vv);
                    sI.add(a * g.I_node(l));
                }
            }
    const double w = g.cell_weight();
    NodeMoments out;
    out.p0 = w * s0.value();
    out.p1 = {w * sx.value(), w * sy.value(), w * sz.value()};
    out.p2 = w * s2.value();
    out.pI = w * sI.value();
    return out;
}

} // namespace

InterpTable::InterpTable(const DistributionField& f, const ModelParams& params) : grid_(f.grid) {
    params.validate();
    f.validate();
    alpha_ = params.alpha;
    m_ = params.m;
    inv_hv_ = 1.0 / grid_.hv();
    inv_hI_ = 1.0 / grid_.hI();
    fit_carrier(f, params);
    build_h(f);
    compute_moments();
}

void InterpTable::fit_carrier(const DistributionField& f, const ModelParams& params) {
    const NodeMoments nm = node_moments(f);
    if (!(nm.p0 > 0.0)) {
        zero_ = true;
        u_ = {0, 0, 0};
        theta_ = 1.0;
        Ti_ = 1.0;
        inv2theta_m_ = m_ / 2.0;
        invT_ = 1.0;
        coeff_ = 0.0;
        return;
    }
    u_ = {nm.p1[0] / nm.p0, nm.p1[1] / nm.p0, nm.p1[2] / nm.p0};
    const double hv = grid_.hv(), hI = grid_.hI();
    const double theta_raw = (nm.p2 / nm.p0 - dot3(u_, u_)) * m_ / 3.0;
    const double ti_raw = (nm.pI / nm.p0) / (params.alpha + 1.0);
    theta_ = std::max(theta_raw, 0.02 * hv * hv);
    Ti_ = std::max(ti_raw, 0.02 * hI);
    inv2theta_m_ = m_ / (2.0 * theta_);
    invT_ = 1.0 / Ti_;
    coeff_ = nm.p0 * std::exp(1.5 * std::log(m_ / (kTwoPi * theta_)) - std::lgamma(alpha_ + 1.0) -
                              (alpha_ + 1.0) * std::log(Ti_));
}

void InterpTable::build_h(const DistributionField& f) {
    h_.assign(grid_.size(), 0.0f);
    if (zero_) return;
    const double log_coeff = std::log(coeff_);
    const PhaseGrid& g = grid_;
    for (int i = 0; i < g.Nv; ++i)
        for (int j = 0; j < g.Nv; ++j)
            for (int k = 0; k < g.Nv; ++k) {
                const Vec3 v{g.v_node(i), g.v_node(j), g.v_node(k)};
                const double dv2 = (v[0] - u_[0]) * (v[0] - u_[0]) +
                                   (v[1] - u_[1]) * (v[1] - u_[1]) +
                                   (v[2] - u_[2]) * (v[2] - u_[2]);
                const std::size_t base = g.index(i, j, k, 0);
                for (int l = 0; l < g.NI; ++l) {
                    const double a = f.a[base + l];
                    if (a <= 0.0) continue;
                    const double In = g.I_node(l);
                    const double s = inv2theta_m_ * dv2 + In * invT_;
                    const double lh = std::log(a) - (log_coeff + alpha_ * std::log(In) - s);
                    // Nodes where the carrier underflowed past float range
                    // carry negligible mass; drop them rather than overflow.
                    h_[base + l] = lh > 85.0 ? 0.0f : static_cast<float>(std::exp(lh));
                }
            }
}

void InterpTable::compute_moments() {
    moments_ = FieldMoments{};
    if (zero_) return;
    const PhaseGrid& g = grid_;
    const int Nv = g.Nv, NI = g.NI;
    const double hv = g.hv(), hI = g.hI();

    // 1-D tent integrals against the carrier factors, per velocity axis.
    std::array<std::vector<double>, 3> T0, T1, T2;
    for (int d = 0; d < 3; ++d) {
        T0[d].assign(Nv, 0.0);
        T1[d].assign(Nv, 0.0);
        T2[d].assign(Nv, 0.0);
        const double a = inv2theta_m_;
        const double u = u_[d];
        // constant extensions over the boundary half cells
        {
            const PieceMoments e = piece_moments(-g.Lv, g.v_node(0), a, u);
            T0[d][0] += e.e0;
            T1[d][0] += e.e1;
            T2[d][0] += e.e2;
        }
        {
            const PieceMoments e = piece_moments(g.v_node(Nv - 1), g.Lv, a, u);
            T0[d][Nv - 1] += e.e0;
            T1[d][Nv - 1] += e.e1;
            T2[d][Nv - 1] += e.e2;
        }
        for (int i = 0; i + 1 < Nv; ++i) {
            const double p = g.v_node(i), q = g.v_node(i + 1);
            const PieceMoments e = piece_moments(p, q, a, u);
            // falling tent of node i: (q - x)/hv
            {
                const double c0 = q / hv, c1 = -1.0 / hv;
                T0[d][i] += c0 * e.e0 + c1 * e.e1;
                T1[d][i] += c0 * e.e1 + c1 * e.e2;
                T2[d][i] += c0 * e.e2 + c1 * e.e3;
            }
            // rising tent of node i+1: (x - p)/hv
            {
                const double c0 = -p / hv, c1 = 1.0 / hv;
                T0[d][i + 1] += c0 * e.e0 + c1 * e.e1;
                T1[d][i + 1] += c0 * e.e1 + c1 * e.e2;
                T2[d][i + 1] += c0 * e.e2 + c1 * e.e3;
            }
        }
    }

    // 1-D tent integrals in I against I^alpha exp(-I/Ti).
    std::vector<double> U0(NI, 0.0), U1(NI, 0.0);
    {
        // [0, I_0] strip, constant extension (alpha-singular at 0: mapped DE rule)
        const double c = g.I_node(0);
        const double scale = c * invT_;
        const double a = alpha_;
        U0[0] += std::pow(c, a + 1.0) *
                 tanh_sinh01([a, scale](double t, double) {
                     return std::pow(t, a) * std::exp(-scale * t);
                 });
        U1[0] += std::pow(c, a + 2.0) *
                 tanh_sinh01([a, scale](double t, double) {
                     return std::pow(t, a + 1.0) * std::exp(-scale * t);
                 });
        // top strip [I_{NI-1}, Imax]
        const double p = g.I_node(NI - 1), q = g.Imax;
        for (int gp = 0; gp < 16; ++gp) {
            const double I = 0.5 * (p + q) + 0.5 * (q - p) * kGx16[gp];
            const double wt = 0.5 * (q - p) * kGw16[gp];
            const double f0 = wt * std::pow(I, alpha_) * std::exp(-I * invT_);
            U0[NI - 1] += f0;
            U1[NI - 1] += f0 * I;
        }
    }
    for (int l = 0; l + 1 < NI; ++l) {
        const double p = g.I_node(l), q = g.I_node(l + 1);
        for (int gp = 0; gp < 16; ++gp) {
            const double I = 0.5 * (p + q) + 0.5 * (q - p) * kGx16[gp];
            const double wt = 0.5 * (q - p) * kGw16[gp];
            const double f0 = wt * std::pow(I, alpha_) * std::exp(-I * invT_);
            const double wfall = (q - I) / hI;
            U0[l] += f0 * wfall;
            U1[l] += f0 * wfall * I;
            U0[l + 1] += f0 * (1.0 - wfall);
            U1[l + 1] += f0 * (1.0 - wfall) * I;
        }
    }

    NeumaierSum mass, momx, momy, momz, second, internal;
    for (int i = 0; i < Nv; ++i)
        for (int j = 0; j < Nv; ++j) {
            const double t00 = T0[0][i] * T0[1][j];
            const double t10 = T1[0][i] * T0[1][j];
            const double t01 = T0[0][i] * T1[1][j];
            const double t2sum_xy = T2[0][i] * T0[1][j] + T0[0][i] * T2[1][j];
            for (int k = 0; k < Nv; ++k) {
                const double a000 = t00 * T0[2][k];
                const double a100 = t10 * T0[2][k];
                const double a010 = t01 * T0[2][k];
                const double a001 = t00 * T1[2][k];
                const double a2 = t2sum_xy * T0[2][k] + t00 * T2[2][k];
                const std::size_t base = g.index(i, j, k, 0);
                for (int l = 0; l < NI; ++l) {
                    const double h = static_cast<double>(h_[base + l]);
                    if (h == 0.0) continue;
                    mass.add(h * a000 * U0[l]);
                    momx.add(h * a100 * U0[l]);
                    momy.add(h * a010 * U0[l]);
                    momz.add(h * a001 * U0[l]);
                    second.add(h * a2 * U0[l]);
                    internal.add(h * a000 * U1[l]);
                }
            }
        }
    moments_.mass = coeff_ * mass.value();
    moments_.momentum = {coeff_ * momx.value(), coeff_ * momy.value(), coeff_ * momz.value()};
    moments_.second = coeff_ * second.value();
    moments_.internal = coeff_ * internal.value();
}

double InterpTable::h_factor(const Vec3& v, double I) const {
    const PhaseGrid& g = grid_;
    if (I < 0.0 || I > g.Imax) return 0.0;
    if (v[0] < -g.Lv || v[0] > g.Lv || v[1] < -g.Lv || v[1] > g.Lv || v[2] < -g.Lv ||
        v[2] > g.Lv)
        return 0.0;
    const double inv_hv = inv_hv_, inv_hI = inv_hI_;
    const double tx = (v[0] + g.Lv) * inv_hv - 0.5;
    const double ty = (v[1] + g.Lv) * inv_hv - 0.5;
    const double tz = (v[2] + g.Lv) * inv_hv - 0.5;
    const double tI = I * inv_hI - 0.5;
    const int bi = static_cast<int>(std::floor(tx));
    const int bj = static_cast<int>(std::floor(ty));
    const int bk = static_cast<int>(std::floor(tz));
    const int bl = static_cast<int>(std::floor(tI));
    const double fx = tx - bi, fy = ty - bj, fz = tz - bk, fI = tI - bl;
    const int hi_v = g.Nv - 1, hi_I = g.NI - 1;
    const float* H = h_.data();
    if (((bi | bj | bk | bl) >= 0) && bi < hi_v && bj < hi_v && bk < hi_v && bl < hi_I) {
        // interior cell: every corner exists and the I-pairs are contiguous
        const int sk = g.NI;
        const int sj = sk * g.Nv;
        const int si = sj * g.Nv;
        const int base = ((bi * g.Nv + bj) * g.Nv + bk) * g.NI + bl;
        // fetch each contiguous I-pair with a single 8-byte load
        const auto pair = [&](int idx) {
            std::uint64_t q;
            std::memcpy(&q, H + idx, sizeof(q));
            const double lo = bitcast_float(static_cast<std::uint32_t>(q));
            const double hi = bitcast_float(static_cast<std::uint32_t>(q >> 32));
            return lo + fI * (hi - lo);
        };
        const double p000 = pair(base), p001 = pair(base + sk);
        const double p010 = pair(base + sj), p011 = pair(base + sj + sk);
        const double p100 = pair(base + si), p101 = pair(base + si + sk);
        const double p110 = pair(base + si + sj), p111 = pair(base + si + sj + sk);
        const double q00 = p000 + fz * (p001 - p000);
        const double q01 = p010 + fz * (p011 - p010);
        const double q10 = p100 + fz * (p101 - p100);
        const double q11 = p110 + fz * (p111 - p110);
        const double r0 = q00 + fy * (q01 - q00);
        const double r1 = q10 + fy * (q11 - q10);
        return r0 + fx * (r1 - r0);
    }
    const int ix[2] = {std::clamp(bi, 0, hi_v), std::clamp(bi + 1, 0, hi_v)};
    const int jy[2] = {std::clamp(bj, 0, hi_v), std::clamp(bj + 1, 0, hi_v)};
    const int kz[2] = {std::clamp(bk, 0, hi_v), std::clamp(bk + 1, 0, hi_v)};
    const int l0 = std::clamp(bl, 0, hi_I);
    const int l1 = std::clamp(bl + 1, 0, hi_I);
    const std::size_t dl = static_cast<std::size_t>(l1 - l0);
    const double wx[2] = {1.0 - fx, fx};
    const double wy[2] = {1.0 - fy, fy};
    const double wz[2] = {1.0 - fz, fz};
    double acc = 0.0;
    for (int a = 0; a < 2; ++a) {
        const std::size_t ba = static_cast<std::size_t>(ix[a]) * g.Nv;
        for (int b = 0; b < 2; ++b) {
            const std::size_t bb = (ba + jy[b]) * g.Nv;
            const double wab = wx[a] * wy[b];
            for (int c = 0; c < 2; ++c) {
                const std::size_t idx = (bb + kz[c]) * g.NI + l0;
                const double hval =
                    static_cast<double>(H[idx]) * (1.0 - fI) + static_cast<double>(H[idx + dl]) * fI;
                acc += wab * wz[c] * hval;
            }
        }
    }
    return acc;
}

void InterpTable::prefetch(const Vec3& v, double I) const {
    const PhaseGrid& g = grid_;
    if (I < 0.0 || I > g.Imax) return;
    if (v[0] < -g.Lv || v[0] > g.Lv || v[1] < -g.Lv || v[1] > g.Lv || v[2] < -g.Lv ||
        v[2] > g.Lv)
        return;
    // truncation instead of floor is fine here: a hint one cell off only costs
    // an extra warm line, never a wrong result
    const int bi = std::clamp(static_cast<int>((v[0] + g.Lv) * inv_hv_ - 0.5), 0, g.Nv - 2);
    const int bj = std::clamp(static_cast<int>((v[1] + g.Lv) * inv_hv_ - 0.5), 0, g.Nv - 2);
    const int bk = std::clamp(static_cast<int>((v[2] + g.Lv) * inv_hv_ - 0.5), 0, g.Nv - 2);
    const int bl = std::clamp(static_cast<int>(I * inv_hI_ - 0.5), 0, g.NI - 2);
    const int sk = g.NI;
    const int sj = sk * g.Nv;
    const int si = sj * g.Nv;
    const float* H = h_.data() + (((bi * g.Nv + bj) * g.Nv + bk) * g.NI + bl);
    __builtin_prefetch(H);
    __builtin_prefetch(H + sk);
    __builtin_prefetch(H + sj);
    __builtin_prefetch(H + sj + sk);
    __builtin_prefetch(H + si);
    __builtin_prefetch(H + si + sk);
    __builtin_prefetch(H + si + sj);
    __builtin_prefetch(H + si + sj + sk);
}

double InterpTable::exponent(const Vec3& v, double I) const {
    const double dx = v[0] - u_[0], dy = v[1] - u_[1], dz = v[2] - u_[2];
    return inv2theta_m_ * (dx * dx + dy * dy + dz * dz) + I * invT_;
}

double InterpTable::value(const Vec3& v, double I) const {
    if (zero_) return 0.0;
    const double h = h_factor(v, I);
    if (h == 0.0) return 0.0;
    return h * coeff_ * apply_pow(I, alpha_) * std::exp(-exponent(v, I));
}

// ---------------------------------------------------------------------------
// collision_frequency
// ---------------------------------------------------------------------------

namespace {

/// nu via the quadratic-moment expansion, exact for gamma = 2:
/// E/m = |v - v*|^2/4 + (I + I*)/m.
double nu_gamma2(const FieldMoments& mm, double kap, double inv_m, const Vec3& v, double I) {
    const double vv = dot3(v, v);
    return kap * (0.25 * (vv * mm.mass - 2.0 * dot3(v, mm.momentum) + mm.second) +
                  (I * mm.mass + mm.internal) * inv_m);
}

struct DetCellRule {
    // Gauss points/weights over one (v*, I*) cell, offsets from the node.
    std::vector<double> off_v, w_v, off_I, w_I;

    DetCellRule(const PhaseGrid& g, int nv, int nI) {
        const GaussRule rv = gauss_rule(nv), rI = gauss_rule(nI);
        for (int i = 0; i < rv.n; ++i) {
            off_v.push_back(0.5 * g.hv() * rv.x[i]);
            w_v.push_back(0.5 * g.hv() * rv.w[i]);
        }
        for (int i = 0; i < rI.n; ++i) {
            off_I.push_back(0.5 * g.hI() * rI.x[i]);
            w_I.push_back(0.5 * g.hI() * rI.w[i]);
        }
    }
};

} // namespace

CollisionFrequencyField collision_frequency(const InterpTable& g, const ModelParams& params,
                                            const AngularKernel& b, const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    const PhaseGrid& grid = g.grid();
    CollisionFrequencyField out(grid);
    const double kap = kappa(b, params.alpha);
    if (g.zero()) return out;

    if (params.gamma == 0.0) {
        const double nu0 = kap * g.l1();
        std::fill(out.nu.begin(), out.nu.end(), nu0);
        return out;
    }
    if (params.gamma == 2.0) {
        const FieldMoments& mm = g.moments();
        const double inv_m = 1.0 / params.m;
        parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t n = lo; n < hi; ++n) {
                std::size_t rest = n;
                const int l = static_cast<int>(rest % grid.NI);
                rest /= grid.NI;
                const int k = static_cast<int>(rest % grid.Nv);
                rest /= grid.Nv;
                const int j = static_cast<int>(rest % grid.Nv);
                const int i = static_cast<int>(rest / grid.Nv);
                const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
                out.nu[n] = nu_gamma2(mm, kap, inv_m, v, grid.I_node(l));
            }
        });
        return out;
    }

    const double gexp = 0.5 * params.gamma;
    const double inv_m = 1.0 / params.m;
    if (quad.mode == QuadratureSpec::Mode::tensor_deterministic) {
        const long long inner = static_cast<long long>(grid.size()) * quad.det_v_nodes *
                                quad.det_v_nodes * quad.det_v_nodes * quad.det_I_nodes;
        if (inner > quad.det_budget)
            throw std::invalid_argument(
                "collision_frequency: tensor_deterministic inner evaluations exceed det_budget");
        const DetCellRule rule(grid, quad.det_v_nodes, quad.det_I_nodes);
        const double coeff = g.coeff();
        const double alpha = g.alpha();
        parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t n = lo; n < hi; ++n) {
                std::size_t rest = n;
                const int l = static_cast<int>(rest % grid.NI);
                rest /= grid.NI;
                const int k = static_cast<int>(rest % grid.Nv);
                rest /= grid.Nv;
                const int j = static_cast<int>(rest % grid.Nv);
                const int i = static_cast<int>(rest / grid.Nv);
                const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
                const double I = grid.I_node(l);
                double acc = 0.0;
                for (int ci = 0; ci < grid.Nv; ++ci)
                    for (int cj = 0; cj < grid.Nv; ++cj)
                        for (int ck = 0; ck < grid.Nv; ++ck)
                            for (int cl = 0; cl < grid.NI; ++cl) {
                                const double cvx = grid.v_node(ci), cvy = grid.v_node(cj),
                                             cvz = grid.v_node(ck), cI = grid.I_node(cl);
                                for (std::size_t ax = 0; ax < rule.off_v.size(); ++ax)
                                    for (std::size_t ay = 0; ay < rule.off_v.size(); ++ay)
                                        for (std::size_t az = 0; az < rule.off_v.size(); ++az)
                                            for (std::size_t aI = 0; aI < rule.off_I.size(); ++aI) {
                                                const Vec3 vs{cvx + rule.off_v[ax],
                                                              cvy + rule.off_v[ay],
                                                              cvz + rule.off_v[az]};
                                                const double Is = cI + rule.off_I[aI];
                                                const double wt = rule.w_v[ax] * rule.w_v[ay] *
                                                                  rule.w_v[az] * rule.w_I[aI];
                                                const double h = g.h_factor(vs, Is);
                                                if (h == 0.0) continue;
                                                const double gval =
                                                    h * coeff * apply_pow(Is, alpha) *
                                                    std::exp(-g.exponent(vs, Is));
                                                const double dx = v[0] - vs[0], dy = v[1] - vs[1],
                                                             dz = v[2] - vs[2];
                                                const double Em =
                                                    0.25 * (dx * dx + dy * dy + dz * dz) +
                                                    (I + Is) * inv_m;
                                                acc += wt * gval * apply_pow(Em, gexp);
                                            }
                            }
                out.nu[n] = kap * acc;
            }
        });
        return out;
    }

    // Monte-Carlo path: stars drawn from the field treated as a density
    // (plus a uniform floor so the proposal covers the interpolant support).
    AliasTable cells;
    double l1prop = 0.0;
    std::vector<double> values(grid.size());
    {
        const double coeff = g.coeff();
        const double alpha = g.alpha();
        for (std::size_t n = 0; n < grid.size(); ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double I = grid.I_node(l);
            const double h = static_cast<double>(g.h_nodes()[n]);
            values[n] = h == 0.0 ? 0.0 : h * coeff * apply_pow(I, alpha) * std::exp(-g.exponent(v, I));
        }
        const double tot = add_uniform_floor(values);
        if (!(tot > 0.0)) return out;
        cells.build(values, tot);
        l1prop = grid.cell_weight() * tot;
    }
    const std::vector<CellRef> refs = build_cell_refs(grid, values);
    const int mc = quad.mc_samples;
    const double hv = grid.hv(), hI = grid.hI();
    const double negL = -grid.Lv;
    const double coeff = g.coeff();
    const double alpha = g.alpha();
    parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double I = grid.I_node(l);
            double sumw = 0.0, sumw2 = 0.0;
            for (int s = 0; s < mc; ++s) {
                CounterRng rng(quad.seed + kStreamNu, n, static_cast<std::uint64_t>(s));
                const std::uint32_t cell = cells.sample(rng.next_unit());
                const CellRef ref = refs[cell];
                const Vec3 vs{
                    negL + (static_cast<double>(ref.ijkl >> 48) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((ref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((ref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
                const double Is = (static_cast<double>(ref.ijkl & 0xffff) + rng.next_unit()) * hI;
                const double gval = g.h_factor(vs, Is) * coeff * apply_pow(Is, alpha) *
                                    std::exp(-g.exponent(vs, Is));
                const double dx = v[0] - vs[0], dy = v[1] - vs[1], dz = v[2] - vs[2];
                const double Em = 0.25 * (dx * dx + dy * dy + dz * dz) + (I + Is) * inv_m;
                const double w = gval * ref.inv_weight * apply_pow(Em, gexp);
                sumw += w;
                sumw2 += w * w;
            }
            double mean, se;
            finish_mean_se(sumw, sumw2, mc, mean, se);
            out.nu[n] = kap * l1prop * mean;
            out.se[n] = kap * l1prop * se;
        }
    });
    return out;
}

CollisionFrequencyField collision_frequency(const DistributionField& g, const ModelParams& params,
                                            const AngularKernel& b, const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    const InterpTable table(g, params);
    return collision_frequency(table, params, b, quad);
}

double collision_frequency_at(const InterpTable& g, const Vec3& v, double I,
                              const ModelParams& params, const AngularKernel& b,
                              const QuadratureSpec& quad, std::uint64_t stream_key) {
    params.validate();
    b.validate();
    quad.validate();
    const double kap = kappa(b, params.alpha);
    if (g.zero()) return 0.0;
    if (params.gamma == 0.0) return kap * g.l1();
    if (params.gamma == 2.0) return nu_gamma2(g.moments(), kap, 1.0 / params.m, v, I);

    const PhaseGrid& grid = g.grid();
    const double gexp = 0.5 * params.gamma;
    const double inv_m = 1.0 / params.m;
    const double coeff = g.coeff();
    const double alpha = g.alpha();
    std::vector<double> values(grid.size());
    for (std::size_t n = 0; n < grid.size(); ++n) {
        std::size_t rest = n;
        const int l = static_cast<int>(rest % grid.NI);
        rest /= grid.NI;
        const int k = static_cast<int>(rest % grid.Nv);
        rest /= grid.Nv;
        const int j = static_cast<int>(rest % grid.Nv);
        const int i = static_cast<int>(rest / grid.Nv);
        const Vec3 vv{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
        const double In = grid.I_node(l);
        const double h = static_cast<double>(g.h_nodes()[n]);
        values[n] = h == 0.0 ? 0.0 : h * coeff * apply_pow(In, alpha) * std::exp(-g.exponent(vv, In));
    }
    const double tot = add_uniform_floor(values);
    if (!(tot > 0.0)) return 0.0;
    AliasTable cells;
    cells.build(values, tot);
    const std::vector<CellRef> refs = build_cell_refs(grid, values);
    const double l1prop = grid.cell_weight() * tot;
    const double hv = grid.hv(), hI = grid.hI();
    const double negL = -grid.Lv;
    double sumw = 0.0;
    for (int s = 0; s < quad.mc_samples; ++s) {
        CounterRng rng(quad.seed + kStreamNuAt, stream_key, static_cast<std::uint64_t>(s));
        const std::uint32_t cell = cells.sample(rng.next_unit());
        const CellRef ref = refs[cell];
        const Vec3 vs{negL + (static_cast<double>(ref.ijkl >> 48) + rng.next_unit()) * hv,
                      negL + (static_cast<double>((ref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                      negL + (static_cast<double>((ref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
        const double Is = (static_cast<double>(ref.ijkl & 0xffff) + rng.next_unit()) * hI;
        const double gval =
            g.h_factor(vs, Is) * coeff * apply_pow(Is, alpha) * std::exp(-g.exponent(vs, Is));
        const double dx = v[0] - vs[0], dy = v[1] - vs[1], dz = v[2] - vs[2];
        const double Em = 0.25 * (dx * dx + dy * dy + dz * dz) + (I + Is) * inv_m;
        sumw += gval * ref.inv_weight * apply_pow(Em, gexp);
    }
    return kap * l1prop * sumw / quad.mc_samples;
}

// ---------------------------------------------------------------------------
// gain
// ---------------------------------------------------------------------------

OperatorField gain(const InterpTable& f, const InterpTable& g, const ModelParams& params,
                   const AngularKernel& b, const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    require_same_grid(f.grid(), g.grid(), "gain");
    const PhaseGrid& grid = f.grid();
    OperatorField out(grid);
    if (f.zero() || g.zero()) return out;

    const double alpha = params.alpha;
    const double gexp = 0.5 * params.gamma;
    const double inv_m = 1.0 / params.m;
    const double m = params.m;
    const BEval beval(b);

    // carrier pieces hoisted out of the sample loop
    const Vec3 uf = f.carrier_u(), ug = g.carrier_u();
    const double af = f.carrier_inv2theta_m(), ag = g.carrier_inv2theta_m();
    const double tf = f.carrier_invT(), tg = g.carrier_invT();
    const double coeff_fg = f.coeff() * g.coeff();

    // proposal: g's node values as a piecewise-constant density
    std::vector<double> gvals(grid.size());
    {
        const double cg = g.coeff();
        for (std::size_t n = 0; n < grid.size(); ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 vv{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double In = grid.I_node(l);
            const double h = static_cast<double>(g.h_nodes()[n]);
            gvals[n] = h == 0.0 ? 0.0 : h * cg * apply_pow(In, alpha) * std::exp(-g.exponent(vv, In));
        }
    }
    double l1g = 0.0;
    for (double x : gvals) l1g += x;
    l1g *= grid.cell_weight();
    if (!(l1g > 0.0)) return out;

    if (quad.mode == QuadratureSpec::Mode::tensor_deterministic) {
        const long long per_cell = static_cast<long long>(quad.det_v_nodes) * quad.det_v_nodes *
                                   quad.det_v_nodes * quad.det_I_nodes * quad.det_sigma_nodes *
                                   (2 * quad.det_sigma_nodes) * quad.det_r_nodes * quad.det_R_nodes;
        const double inner = static_cast<double>(grid.size()) * static_cast<double>(per_cell);
        if (inner > static_cast<double>(quad.det_budget))
            throw std::invalid_argument("gain: tensor_deterministic inner evaluations exceed det_budget");
        if (alpha < 0.0)
            throw std::invalid_argument("gain: tensor_deterministic mode requires alpha >= 0");
        // quantile-midpoint nodes for (r, R); weights carry the marginal norms
        const double wr = beta_fn(alpha + 1.0, alpha + 1.0) / quad.det_r_nodes;
        const double wR = beta_fn(1.5, 2.0 * alpha + 2.0) / quad.det_R_nodes;
        HistProposal qr, qR;
        qr.build([alpha](double r) { return std::pow(r * (1.0 - r), alpha); }, quad.det_r_nodes,
                 16384);
        qR.build([alpha](double R) { return std::pow(1.0 - R, 2.0 * alpha + 1.0) * std::sqrt(R); },
                 quad.det_R_nodes, 16384);
        const DetCellRule rule(grid, quad.det_v_nodes, quad.det_I_nodes);
        const int nz = quad.det_sigma_nodes, nphi = 2 * quad.det_sigma_nodes;
        parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t n = lo; n < hi; ++n) {
                std::size_t rest = n;
                const int l = static_cast<int>(rest % grid.NI);
                rest /= grid.NI;
                const int k = static_cast<int>(rest % grid.Nv);
                rest /= grid.Nv;
                const int j = static_cast<int>(rest % grid.Nv);
                const int i = static_cast<int>(rest / grid.Nv);
                const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
                const double I = grid.I_node(l);
                const double Ia = apply_pow(I, alpha);
                double acc = 0.0;
                for (std::size_t cell = 0; cell < grid.size(); ++cell) {
                    std::size_t crest = cell;
                    const int sl = static_cast<int>(crest % grid.NI);
                    crest /= grid.NI;
                    const int sk = static_cast<int>(crest % grid.Nv);
                    crest /= grid.Nv;
                    const int sj = static_cast<int>(crest % grid.Nv);
                    const int si = static_cast<int>(crest / grid.Nv);
                    for (std::size_t ax = 0; ax < rule.off_v.size(); ++ax)
                        for (std::size_t ay = 0; ay < rule.off_v.size(); ++ay)
                            for (std::size_t az = 0; az < rule.off_v.size(); ++az)
                                for (std::size_t aI = 0; aI < rule.off_I.size(); ++aI) {
                                    const Vec3 vs{grid.v_node(si) + rule.off_v[ax],
                                                  grid.v_node(sj) + rule.off_v[ay],
                                                  grid.v_node(sk) + rule.off_v[az]};
                                    const double Is = grid.I_node(sl) + rule.off_I[aI];
                                    const double wt4 = rule.w_v[ax] * rule.w_v[ay] * rule.w_v[az] *
                                                       rule.w_I[aI];
                                    const Vec3 u{v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]};
                                    const double u2 = dot3(u, u);
                                    const double Em = 0.25 * u2 + (I + Is) * inv_m;
                                    const double E = m * Em;
                                    Vec3 uh{1.0, 0.0, 0.0};
                                    if (u2 > 0.0) {
                                        const double inv = 1.0 / std::sqrt(u2);
                                        uh = {u[0] * inv, u[1] * inv, u[2] * inv};
                                    }
                                    Vec3 e1, e2;
                                    unit_frame(uh, e1, e2);
                                    const Vec3 vc{0.5 * (v[0] + vs[0]), 0.5 * (v[1] + vs[1]),
                                                  0.5 * (v[2] + vs[2])};
                                    const double egam = apply_pow(Em, gexp);
                                    const double Isa = apply_pow(Is, alpha);
                                    for (int zi = 0; zi < nz; ++zi) {
                                        const double z = (zi + 0.5) / nz;
                                        const double sq = std::sqrt(1.0 - z * z);
                                        const double bz = beval(z);
                                        for (int pi2 = 0; pi2 < nphi; ++pi2) {
                                            const double phi = kTwoPi * (pi2 + 0.5) / nphi;
                                            const double cp = std::cos(phi), sp = std::sin(phi);
                                            const Vec3 sg{
                                                z * uh[0] + sq * (cp * e1[0] + sp * e2[0]),
                                                z * uh[1] + sq * (cp * e1[1] + sp * e2[1]),
                                                z * uh[2] + sq * (cp * e1[2] + sp * e2[2])};
                                            for (int ri = 0; ri < quad.det_r_nodes; ++ri) {
                                                const double r = qr.node(ri);
                                                for (int Ri = 0; Ri < quad.det_R_nodes; ++Ri) {
                                                    const double R = qR.node(Ri);
                                                    const double rho = std::sqrt(R * Em);
                                                    const Vec3 vp{vc[0] + rho * sg[0],
                                                                  vc[1] + rho * sg[1],
                                                                  vc[2] + rho * sg[2]};
                                                    const Vec3 vps{vc[0] - rho * sg[0],
                                                                   vc[1] - rho * sg[1],
                                                                   vc[2] - rho * sg[2]};
                                                    const double Ip = r * (1.0 - R) * E;
                                                    const double Ips = (1.0 - r) * (1.0 - R) * E;
                                                    const double hf = f.h_factor(vp, Ip);
                                                    if (hf == 0.0) continue;
                                                    const double hg = g.h_factor(vps, Ips);
                                                    if (hg == 0.0) continue;
                                                    const double S =
                                                        af * ((vp[0] - uf[0]) * (vp[0] - uf[0]) +
                                                              (vp[1] - uf[1]) * (vp[1] - uf[1]) +
                                                              (vp[2] - uf[2]) * (vp[2] - uf[2])) +
                                                        Ip * tf +
                                                        ag * ((vps[0] - ug[0]) * (vps[0] - ug[0]) +
                                                              (vps[1] - ug[1]) * (vps[1] - ug[1]) +
                                                              (vps[2] - ug[2]) * (vps[2] - ug[2])) +
                                                        Ips * tg;
                                                    acc += wt4 * (1.0 / nz) * (kTwoPi / nphi) *
                                                           wr * wR * bz * egam * Ia * Isa *
                                                           coeff_fg * hf * hg * std::exp(-S);
                                                }
                                            }
                                        }
                                    }
                                }
                }
                out.value[n] = acc;
            }
        });
        out.samples = static_cast<long long>(grid.size()) * static_cast<long long>(inner);
        return out;
    }

    // Monte-Carlo mode
    const double gtot = add_uniform_floor(gvals);
    if (!(gtot > 0.0)) return out;
    AliasTable cells;
    cells.build(gvals, gtot);
    const std::vector<CellRef> refs = build_cell_refs(grid, gvals);
    RRProposal rr;
    rr.build(alpha);
    const double l1prop = grid.cell_weight() * gtot;
    const int mc = quad.mc_samples;
    const double hv = grid.hv(), hI = grid.hI();
    const double negL = -grid.Lv;
    const double pref_const = l1prop * kTwoPi * coeff_fg;
    std::vector<long long> rejected(grid.size(), 0);

    parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double I = grid.I_node(l);
            const double pref = pref_const * apply_pow(I, alpha);
            double sumw = 0.0, sumw2 = 0.0;
            long long rej = 0;
            // three-phase batches hide the table-lookup latency: draw the star
            // cells and prefetch their refs, run the transforms and prefetch
            // the interpolation corners, then evaluate against warm lines. The
            // arithmetic and accumulation order match the straight-line loop
            // bit for bit.
            constexpr int kBatch = 16;
            std::uint32_t cellbuf[kBatch];
            GainSpill spill[kBatch];
            for (int s0 = 0; s0 < mc; s0 += kBatch) {
                const int sb = std::min(kBatch, mc - s0);
                for (int t = 0; t < sb; ++t) {
                    CounterRng rng(quad.seed + kStreamGain, n,
                                   static_cast<std::uint64_t>(s0 + t));
                    const std::uint32_t cell = cells.sample(rng.next_unit());
                    cellbuf[t] = cell;
                    __builtin_prefetch(&refs[cell]);
                }
                for (int t = 0; t < sb; ++t) {
                    CounterRng rng(quad.seed + kStreamGain, n,
                                   static_cast<std::uint64_t>(s0 + t));
                    rng.skip(1);
                    GainSpill& sp = spill[t];
                    const CellRef ref = refs[cellbuf[t]];
                    const Vec3 vs{
                        negL + (static_cast<double>(ref.ijkl >> 48) + rng.next_unit()) * hv,
                        negL + (static_cast<double>((ref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                        negL + (static_cast<double>((ref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
                    const double Is = (static_cast<double>(ref.ijkl & 0xffff) + rng.next_unit()) * hI;
                    double r, R;
                    const double wd = rr.draw_rR(rng, r, R);
                    double z = rng.next_unit();
                    if (z == 0.0) z = 0x1.0p-55;
                    const Vec3 u{v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]};
                    const double u2 = dot3(u, u);
                    const double Em = 0.25 * u2 + (I + Is) * inv_m;
                    const double E = m * Em;
                    const double Ip = r * (1.0 - R) * E;
                    const double Ips = (1.0 - r) * (1.0 - R) * E;
                    if (alpha < 0.0 && (Is == 0.0 || Ip * Ips == 0.0)) {
                        sp.wpre = -1.0;
                        continue;
                    }
                    Vec3 uh{1.0, 0.0, 0.0};
                    if (u2 > 0.0) {
                        const double inv = 1.0 / std::sqrt(u2);
                        uh = {u[0] * inv, u[1] * inv, u[2] * inv};
                    }
                    Vec3 e1, e2;
                    unit_frame(uh, e1, e2);
                    double cp, sp_;
                    polar_unit(rng, cp, sp_);
                    const double sq = std::sqrt(1.0 - z * z);
                    const Vec3 sg{z * uh[0] + sq * (cp * e1[0] + sp_ * e2[0]),
                                  z * uh[1] + sq * (cp * e1[1] + sp_ * e2[1]),
                                  z * uh[2] + sq * (cp * e1[2] + sp_ * e2[2])};
                    const double rho = std::sqrt(R * Em);
                    const Vec3 vc{0.5 * (v[0] + vs[0]), 0.5 * (v[1] + vs[1]),
                                  0.5 * (v[2] + vs[2])};
                    sp.vp = {vc[0] + rho * sg[0], vc[1] + rho * sg[1], vc[2] + rho * sg[2]};
                    sp.vps = {vc[0] - rho * sg[0], vc[1] - rho * sg[1], vc[2] - rho * sg[2]};
                    sp.Ip = Ip;
                    sp.Ips = Ips;
                    sp.S = af * ((sp.vp[0] - uf[0]) * (sp.vp[0] - uf[0]) +
                                 (sp.vp[1] - uf[1]) * (sp.vp[1] - uf[1]) +
                                 (sp.vp[2] - uf[2]) * (sp.vp[2] - uf[2])) +
                           Ip * tf +
                           ag * ((sp.vps[0] - ug[0]) * (sp.vps[0] - ug[0]) +
                                 (sp.vps[1] - ug[1]) * (sp.vps[1] - ug[1]) +
                                 (sp.vps[2] - ug[2]) * (sp.vps[2] - ug[2])) +
                           Ips * tg;
                    sp.wpre = pref * beval(z) * apply_pow(Em, gexp) * wd * apply_pow(Is, alpha);
                    sp.inv_w = ref.inv_weight;
                    f.prefetch(sp.vp, Ip);
                    g.prefetch(sp.vps, Ips);
                }
                for (int t = 0; t < sb; ++t) {
                    const GainSpill& sp = spill[t];
                    if (sp.wpre < 0.0) {
                        ++rej;
                        continue;
                    }
                    const double hf = f.h_factor(sp.vp, sp.Ip);
                    if (hf == 0.0) continue;
                    const double hg = g.h_factor(sp.vps, sp.Ips);
                    if (hg == 0.0) continue;
                    const double w = sp.wpre * hf * hg * std::exp(-sp.S) * sp.inv_w;
                    sumw += w;
                    sumw2 += w * w;
                }
            }
            double mean, se;
            finish_mean_se(sumw, sumw2, mc, mean, se);
            out.value[n] = mean;
            out.se[n] = se;
            rejected[n] = rej;
        }
    });
    out.samples = static_cast<long long>(grid.size()) * mc;
    for (long long rj : rejected) out.rejected += rj;
    return out;
}

OperatorField gain(const DistributionField& f, const DistributionField& g,
                   const ModelParams& params, const AngularKernel& b, const QuadratureSpec& quad) {
    const InterpTable tf(f, params);
    if (&f == &g) return gain(tf, tf, params, b, quad);
    const InterpTable tg(g, params);
    return gain(tf, tg, params, b, quad);
}

// ---------------------------------------------------------------------------
// loss / q_total
// ---------------------------------------------------------------------------

DistributionField loss(const DistributionField& f, const CollisionFrequencyField& nu) {
    require_same_grid(f.grid, nu.grid, "loss");
    DistributionField out(f.grid);
    for (std::size_t n = 0; n < f.a.size(); ++n) out.a[n] = f.a[n] * nu.nu[n];
    return out;
}

OperatorField q_total(const DistributionField& f, const ModelParams& params,
                      const AngularKernel& b, const QuadratureSpec& quad) {
    const InterpTable table(f, params);
    OperatorField gp = gain(table, table, params, b, quad);
    const CollisionFrequencyField nu = collision_frequency(table, params, b, quad);
    for (std::size_t n = 0; n < gp.value.size(); ++n) {
        gp.value[n] -= f.a[n] * nu.nu[n];
        const double se_loss = f.a[n] * nu.se[n];
        gp.se[n] = std::sqrt(gp.se[n] * gp.se[n] + se_loss * se_loss);
    }
    return gp;
}

// ---------------------------------------------------------------------------
// weak form
// ---------------------------------------------------------------------------

WeakFormResult weak_form_moment(const DistributionField& f, const DistributionField& g,
                                const TestFunction& chi, const ModelParams& params,
                                const AngularKernel& b, const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    require_same_grid(f.grid, g.grid, "weak_form_moment");
    f.validate();
    g.validate();
    const PhaseGrid& grid = f.grid;
    WeakFormResult out;
    const double w = grid.cell_weight();
    double l1f = 0.0, l1g = 0.0;
    for (double x : f.a) l1f += x;
    for (double x : g.a) l1g += x;
    l1f *= w;
    l1g *= w;
    if (!(l1f > 0.0) || !(l1g > 0.0)) return out;

    AliasTable fcells, gcells;
    fcells.build(f.a, l1f / w);
    gcells.build(g.a, l1g / w);
    const std::vector<CellRef> frefs = build_cell_refs(grid, f.a);
    const std::vector<CellRef> grefs = build_cell_refs(grid, g.a);
    RRProposal rr;
    rr.build(params.alpha);

    const long long total =
        static_cast<long long>(quad.mc_samples) * static_cast<long long>(grid.size());
    const long long block = 8192;
    const long long nblocks = (total + block - 1) / block;
    std::vector<double> bs(static_cast<std::size_t>(nblocks), 0.0);
    std::vector<double> bs2(static_cast<std::size_t>(nblocks), 0.0);
    const double hv = grid.hv(), hI = grid.hI();
    const double negL = -grid.Lv;
    const double inv_m = 1.0 / params.m;
    const double m = params.m;
    const double gexp = 0.5 * params.gamma;
    const BEval beval(b);
    const double pref = l1f * l1g * kTwoPi;

    parallel_for(static_cast<std::size_t>(nblocks), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t blk = lo; blk < hi; ++blk) {
            const long long begin = static_cast<long long>(blk) * block;
            const long long end = std::min(total, begin + block);
            double sumw = 0.0, sumw2 = 0.0;
            for (long long s = begin; s < end; ++s) {
                CounterRng rng(quad.seed + kStreamWeak, 0, static_cast<std::uint64_t>(s));
                const std::uint32_t fc = fcells.sample(rng.next_unit());
                const CellRef fref = frefs[fc];
                const Vec3 v{
                    negL + (static_cast<double>(fref.ijkl >> 48) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((fref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((fref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
                const double I = (static_cast<double>(fref.ijkl & 0xffff) + rng.next_unit()) * hI;
                const std::uint32_t gc = gcells.sample(rng.next_unit());
                const CellRef gref = grefs[gc];
                const Vec3 vs{
                    negL + (static_cast<double>(gref.ijkl >> 48) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((gref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((gref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
                const double Is = (static_cast<double>(gref.ijkl & 0xffff) + rng.next_unit()) * hI;
                double r, R;
                const double wd = rr.draw_rR(rng, r, R);
                double z = rng.next_unit();
                if (z == 0.0) z = 0x1.0p-55;
                const Vec3 u{v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]};
                const double u2 = dot3(u, u);
                const double Em = 0.25 * u2 + (I + Is) * inv_m;
                const double E = m * Em;
                Vec3 uh{1.0, 0.0, 0.0};
                if (u2 > 0.0) {
                    const double inv = 1.0 / std::sqrt(u2);
                    uh = {u[0] * inv, u[1] * inv, u[2] * inv};
                }
                Vec3 e1, e2;
                unit_frame(uh, e1, e2);
                double cp, sp;
                polar_unit(rng, cp, sp);
                const double sq = std::sqrt(1.0 - z * z);
                const Vec3 sg{z * uh[0] + sq * (cp * e1[0] + sp * e2[0]),
                              z * uh[1] + sq * (cp * e1[1] + sp * e2[1]),
                              z * uh[2] + sq * (cp * e1[2] + sp * e2[2])};
                const double rho = std::sqrt(R * Em);
                const Vec3 vc{0.5 * (v[0] + vs[0]), 0.5 * (v[1] + vs[1]), 0.5 * (v[2] + vs[2])};
                const Vec3 vp{vc[0] + rho * sg[0], vc[1] + rho * sg[1], vc[2] + rho * sg[2]};
                const double Ip = r * (1.0 - R) * E;
                const double wgt = pref * beval(z) * apply_pow(Em, gexp) * wd *
                                   (chi(vp, Ip) - chi(v, I));
                sumw += wgt;
                sumw2 += wgt * wgt;
            }
            bs[blk] = sumw;
            bs2[blk] = sumw2;
        }
    });
    NeumaierSum sw, sw2;
    for (double x : bs) sw.add(x);
    for (double x : bs2) sw2.add(x);
    double mean, se;
    finish_mean_se(sw.value(), sw2.value(), total, mean, se);
    out.value = mean;
    out.se = se;
    out.samples = total;
    return out;
}

// ---------------------------------------------------------------------------
// frequency derivatives
// ---------------------------------------------------------------------------

namespace {

/// Shared driver for the gradient fields: integrates
/// g * (E/m)^{gamma/2 - 1} * payload over the star variables.
template <class Payload>
void nu_deriv_mc(const InterpTable& g, const ModelParams& params, const QuadratureSpec& quad,
                 std::uint64_t stream, double pref, const Payload& payload, int ncomp,
                 OperatorField* comps) {
    const PhaseGrid& grid = g.grid();
    const double gexp = 0.5 * params.gamma - 1.0;
    const double inv_m = 1.0 / params.m;
    const double coeff = g.coeff();
    const double alpha = g.alpha();
    std::vector<double> values(grid.size());
    for (std::size_t n = 0; n < grid.size(); ++n) {
        std::size_t rest = n;
        const int l = static_cast<int>(rest % grid.NI);
        rest /= grid.NI;
        const int k = static_cast<int>(rest % grid.Nv);
        rest /= grid.Nv;
        const int j = static_cast<int>(rest % grid.Nv);
        const int i = static_cast<int>(rest / grid.Nv);
        const Vec3 vv{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
        const double In = grid.I_node(l);
        const double h = static_cast<double>(g.h_nodes()[n]);
        values[n] = h == 0.0 ? 0.0 : h * coeff * apply_pow(In, alpha) * std::exp(-g.exponent(vv, In));
    }
    const double tot = add_uniform_floor(values);
    if (!(tot > 0.0)) return;
    AliasTable cells;
    cells.build(values, tot);
    const std::vector<CellRef> refs = build_cell_refs(grid, values);
    const double l1prop = grid.cell_weight() * tot;
    const double hv = grid.hv(), hI = grid.hI();
    const double negL = -grid.Lv;
    const int mc = quad.mc_samples;
    std::vector<long long> rejected(grid.size(), 0);

    parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
        std::vector<double> sumw(ncomp), sumw2(ncomp);
        for (std::size_t n = lo; n < hi; ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double I = grid.I_node(l);
            std::fill(sumw.begin(), sumw.end(), 0.0);
            std::fill(sumw2.begin(), sumw2.end(), 0.0);
            long long rej = 0;
            for (int s = 0; s < mc; ++s) {
                CounterRng rng(quad.seed + stream, n, static_cast<std::uint64_t>(s));
                const std::uint32_t cell = cells.sample(rng.next_unit());
                const CellRef ref = refs[cell];
                const Vec3 vs{
                    negL + (static_cast<double>(ref.ijkl >> 48) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((ref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((ref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
                const double Is = (static_cast<double>(ref.ijkl & 0xffff) + rng.next_unit()) * hI;
                const double dx = v[0] - vs[0], dy = v[1] - vs[1], dz = v[2] - vs[2];
                const double Em = 0.25 * (dx * dx + dy * dy + dz * dz) + (I + Is) * inv_m;
                if (gexp < 0.0 && Em <= 0.0) {
                    ++rej;
                    continue;
                }
                const double gval = g.h_factor(vs, Is) * coeff * apply_pow(Is, alpha) *
                                    std::exp(-g.exponent(vs, Is));
                const double base = gval * ref.inv_weight * apply_pow(Em, gexp);
                for (int c = 0; c < ncomp; ++c) {
                    const double wc = base * payload(c, v, vs);
                    sumw[c] += wc;
                    sumw2[c] += wc * wc;
                }
            }
            for (int c = 0; c < ncomp; ++c) {
                double mean, se;
                finish_mean_se(sumw[c], sumw2[c], mc, mean, se);
                comps[c].value[n] = pref * l1prop * mean;
                comps[c].se[n] = std::abs(pref) * l1prop * se;
                if (c == 0) rejected[n] = rej;
            }
        }
    });
    long long rtot = 0;
    for (long long r : rejected) rtot += r;
    for (int c = 0; c < ncomp; ++c) {
        comps[c].samples = static_cast<long long>(grid.size()) * mc;
        comps[c].rejected = rtot;
    }
}

} // namespace

std::array<OperatorField, 3> nu_gradient_v(const InterpTable& g, const ModelParams& params,
                                           const AngularKernel& b, const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    const PhaseGrid& grid = g.grid();
    std::array<OperatorField, 3> out{OperatorField(grid), OperatorField(grid), OperatorField(grid)};
    const double kap = kappa(b, params.alpha);
    if (g.zero() || params.gamma == 0.0) return out; // identically zero for gamma = 0
    if (params.gamma == 2.0) {
        // (kappa/2) (v_i ||g||_0 - P1_i), exact
        const FieldMoments& mm = g.moments();
        for (std::size_t n = 0; n < grid.size(); ++n) {
            std::size_t rest = n;
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            for (int c = 0; c < 3; ++c)
                out[c].value[n] = 0.5 * kap * (v[c] * mm.mass - mm.momentum[c]);
        }
        return out;
    }
    const double pref = params.gamma * kap / 4.0;
    nu_deriv_mc(
        g, params, quad, kStreamGradV, pref,
        [](int c, const Vec3& v, const Vec3& vs) { return v[c] - vs[c]; }, 3, out.data());
    return out;
}

OperatorField nu_dI(const InterpTable& g, const ModelParams& params, const AngularKernel& b,
                    const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    const PhaseGrid& grid = g.grid();
    OperatorField out(grid);
    const double kap = kappa(b, params.alpha);
    if (g.zero() || params.gamma == 0.0) return out;
    if (params.gamma == 2.0) {
        const double c = kap * g.moments().mass / params.m;
        std::fill(out.value.begin(), out.value.end(), c);
        return out;
    }
    const double pref = params.gamma * kap / (2.0 * params.m);
    nu_deriv_mc(
        g, params, quad, kStreamNuDI, pref,
        [](int, const Vec3&, const Vec3&) { return 1.0; }, 1, &out);
    return out;
}

// ---------------------------------------------------------------------------
// averaging operator
// ---------------------------------------------------------------------------

OperatorField averaging_S(const TestFunction& chi, const PsiWeight& psi,
                          const CollisionState& star, const PhaseGrid& grid,
                          const ModelParams& params, const AngularKernel& b,
                          const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    OperatorField out(grid);
    const std::vector<PsiBetaTerm> terms = psi_beta_terms(psi, params.alpha, params.delta());
    double csum = 0.0;
    std::vector<double> cumul;
    for (const PsiBetaTerm& t : terms) {
        csum += t.coef;
        cumul.push_back(csum);
    }
    const double m = params.m;
    const int mc = quad.mc_samples;
    const BEval beval(b);

    parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            CollisionState s = star;
            s.v = {grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            s.I = grid.I_node(l);
            const Vec3 u{s.v[0] - s.v_star[0], s.v[1] - s.v_star[1], s.v[2] - s.v_star[2]};
            const double u2 = dot3(u, u);
            Vec3 uh{1.0, 0.0, 0.0};
            if (u2 > 0.0) {
                const double inv = 1.0 / std::sqrt(u2);
                uh = {u[0] * inv, u[1] * inv, u[2] * inv};
            }
            Vec3 e1, e2;
            unit_frame(uh, e1, e2);
            const double E = 0.25 * m * u2 + s.I + s.I_star;
            const Vec3 vc{0.5 * (s.v[0] + s.v_star[0]), 0.5 * (s.v[1] + s.v_star[1]),
                          0.5 * (s.v[2] + s.v_star[2])};
            double sumw = 0.0, sumw2 = 0.0;
            for (int sm = 0; sm < mc; ++sm) {
                CounterRng rng(quad.seed + kStreamAvg, n, static_cast<std::uint64_t>(sm));
                // pick a mixture term, then exact Beta draws
                const double pick = rng.next_unit() * csum;
                std::size_t ti = 0;
                while (ti + 1 < cumul.size() && pick > cumul[ti]) ++ti;
                const PsiBetaTerm& t = terms[ti];
                const double r = rng.next_beta(t.r_a, t.r_b);
                const double R = rng.next_beta(t.R_a, t.R_b);
                double z = rng.next_unit();
                if (z == 0.0) z = 0x1.0p-55;
                double cp, sp;
                polar_unit(rng, cp, sp);
                const double sq = std::sqrt(1.0 - z * z);
                const Vec3 sg{z * uh[0] + sq * (cp * e1[0] + sp * e2[0]),
                              z * uh[1] + sq * (cp * e1[1] + sp * e2[1]),
                              z * uh[2] + sq * (cp * e1[2] + sp * e2[2])};
                const double rho = std::sqrt(R * E / m);
                const Vec3 vp{vc[0] + rho * sg[0], vc[1] + rho * sg[1], vc[2] + rho * sg[2]};
                const double Ip = r * (1.0 - R) * E;
                const double w = csum * kTwoPi * beval(z) * chi(vp, Ip);
                sumw += w;
                sumw2 += w * w;
            }
            double mean, se;
            finish_mean_se(sumw, sumw2, mc, mean, se);
            out.value[n] = mean;
            out.se[n] = se;
        }
    });
    out.samples = static_cast<long long>(grid.size()) * mc;
    return out;
}

// ---------------------------------------------------------------------------
// commutator remainder
// ---------------------------------------------------------------------------

OperatorField gain_remainder(const DistributionField& f, const DistributionField& g, int axis,
                             const ModelParams& params, const AngularKernel& b,
                             const QuadratureSpec& quad) {
    params.validate();
    b.validate();
    quad.validate();
    if (axis < 0 || axis > 2)
        throw std::invalid_argument("gain_remainder: axis must be 0, 1 or 2");
    if (params.alpha <= 0.0)
        throw std::domain_error("gain_remainder: requires alpha > 0");
    require_same_grid(f.grid, g.grid, "gain_remainder");

    const InterpTable tf(f, params);
    const InterpTable tg(g, params);
    const PhaseGrid& grid = f.grid;
    OperatorField out(grid);
    if (tf.zero() || tg.zero()) return out;

    const double alpha = params.alpha;
    const double gexp = 0.5 * params.gamma;
    const double inv_m = 1.0 / params.m;
    const double m = params.m;
    const BEval beval(b);
    const Vec3 uf = tf.carrier_u(), ug = tg.carrier_u();
    const double af = tf.carrier_inv2theta_m(), ag = tg.carrier_inv2theta_m();
    const double tfT = tf.carrier_invT(), tgT = tg.carrier_invT();
    const double coeff_fg = tf.coeff() * tg.coeff();
    const double beta_R_coef = 2.0 * alpha + 2.5 - 0.5 * params.gamma;
    const double floor_I = 1e-12 * grid.Imax;
    const double floor_w = 1e-12 * grid.Lv;

    std::vector<double> gvals(grid.size());
    {
        const double cg = tg.coeff();
        for (std::size_t n = 0; n < grid.size(); ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 vv{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double In = grid.I_node(l);
            const double h = static_cast<double>(tg.h_nodes()[n]);
            gvals[n] =
                h == 0.0 ? 0.0 : h * cg * apply_pow(In, alpha) * std::exp(-tg.exponent(vv, In));
        }
    }
    const double gtot = add_uniform_floor(gvals);
    if (!(gtot > 0.0)) return out;
    AliasTable cells;
    cells.build(gvals, gtot);
    const std::vector<CellRef> refs = build_cell_refs(grid, gvals);
    RRProposal rr;
    rr.build(alpha);
    const double l1prop = grid.cell_weight() * gtot;

    const int mc = quad.mc_samples;
    const double hv = grid.hv(), hI = grid.hI();
    const double negL = -grid.Lv;
    const double pref_const = l1prop * kTwoPi * coeff_fg;
    std::vector<long long> rejected(grid.size(), 0);

    parallel_for(grid.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n) {
            std::size_t rest = n;
            const int l = static_cast<int>(rest % grid.NI);
            rest /= grid.NI;
            const int k = static_cast<int>(rest % grid.Nv);
            rest /= grid.Nv;
            const int j = static_cast<int>(rest % grid.Nv);
            const int i = static_cast<int>(rest / grid.Nv);
            const Vec3 v{grid.v_node(i), grid.v_node(j), grid.v_node(k)};
            const double I = grid.I_node(l);
            const double pref = pref_const * apply_pow(I, alpha);
            double sumw = 0.0, sumw2 = 0.0;
            long long rej = 0;
            for (int s = 0; s < mc; ++s) {
                CounterRng rng(quad.seed + kStreamRemainder + axis, n,
                               static_cast<std::uint64_t>(s));
                const std::uint32_t cell = cells.sample(rng.next_unit());
                const CellRef ref = refs[cell];
                const Vec3 vs{
                    negL + (static_cast<double>(ref.ijkl >> 48) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((ref.ijkl >> 32) & 0xffff) + rng.next_unit()) * hv,
                    negL + (static_cast<double>((ref.ijkl >> 16) & 0xffff) + rng.next_unit()) * hv};
                const double Is = (static_cast<double>(ref.ijkl & 0xffff) + rng.next_unit()) * hI;
                double r, R;
                const double wd = rr.draw_rR(rng, r, R);
                double z = rng.next_unit();
                if (z == 0.0) z = 0x1.0p-55;
                if (Is < floor_I) {
                    ++rej;
                    continue;
                }
                const Vec3 u{v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]};
                const double u2 = dot3(u, u);
                const double Em = 0.25 * u2 + (I + Is) * inv_m;
                const double E = m * Em;
                Vec3 uh{1.0, 0.0, 0.0};
                if (u2 > 0.0) {
                    const double inv = 1.0 / std::sqrt(u2);
                    uh = {u[0] * inv, u[1] * inv, u[2] * inv};
                }
                Vec3 e1, e2;
                unit_frame(uh, e1, e2);
                double cp, sp;
                polar_unit(rng, cp, sp);
                const double sq = std::sqrt(1.0 - z * z);
                const Vec3 sg{z * uh[0] + sq * (cp * e1[0] + sp * e2[0]),
                              z * uh[1] + sq * (cp * e1[1] + sp * e2[1]),
                              z * uh[2] + sq * (cp * e1[2] + sp * e2[2])};
                const double rho = std::sqrt(R * Em);
                const Vec3 vc{0.5 * (v[0] + vs[0]), 0.5 * (v[1] + vs[1]), 0.5 * (v[2] + vs[2])};
                const Vec3 vp{vc[0] + rho * sg[0], vc[1] + rho * sg[1], vc[2] + rho * sg[2]};
                const Vec3 vps{vc[0] - rho * sg[0], vc[1] - rho * sg[1], vc[2] - rho * sg[2]};
                const Vec3 wv{v[0] - vps[0], v[1] - vps[1], v[2] - vps[2]};
                const double w2 = dot3(wv, wv);
                if (w2 < floor_w * floor_w) {
                    ++rej;
                    continue;
                }
                const double Ip = r * (1.0 - R) * E;
                const double Ips = (1.0 - r) * (1.0 - R) * E;
                const double hf = tf.h_factor(vp, Ip);
                const double hg = tg.h_factor(vps, Ips);
                if (hf == 0.0 || hg == 0.0) continue;
                const double beta = (2.0 * wv[axis] / w2) *
                                    (alpha * (R * E - 0.25 * m * u2) / Is + 1.5 - beta_R_coef * R);
                const double S = af * ((vp[0] - uf[0]) * (vp[0] - uf[0]) +
                                       (vp[1] - uf[1]) * (vp[1] - uf[1]) +
                                       (vp[2] - uf[2]) * (vp[2] - uf[2])) +
                                 Ip * tfT +
                                 ag * ((vps[0] - ug[0]) * (vps[0] - ug[0]) +
                                       (vps[1] - ug[1]) * (vps[1] - ug[1]) +
                                       (vps[2] - ug[2]) * (vps[2] - ug[2])) +
                                 Ips * tgT;
                const double w = pref * beval(z) * apply_pow(Em, gexp) * wd * apply_pow(Is, alpha) *
                                 hf * hg * std::exp(-S) * ref.inv_weight * beta;
                sumw += w;
                sumw2 += w * w;
            }
            double mean, se;
            finish_mean_se(sumw, sumw2, mc, mean, se);
            out.value[n] = mean;
            out.se[n] = se;
            rejected[n] = rej;
        }
    });
    out.samples = static_cast<long long>(grid.size()) * mc;
    for (long long rj : rejected) out.rejected += rj;
    return out;
}

} // namespace polyboltz
