#pragma once

// Eight-lane AVX-512 helpers for the Monte-Carlo sampler hot loops. Internal
// to the library; every entry point mirrors a scalar routine lane for lane so
// the vector path consumes identical per-sample random streams.

#if defined(__AVX512F__) && defined(__AVX512DQ__)
#define POLYBOLTZ_SIMD512 1

#include <immintrin.h>

#include <cstdint>

namespace polyboltz {
namespace simd {

inline __m512i mix64(__m512i z) {
    z = _mm512_xor_si512(z, _mm512_srli_epi64(z, 30));
    z = _mm512_mullo_epi64(z, _mm512_set1_epi64(0xbf58476d1ce4e5b9ULL));
    z = _mm512_xor_si512(z, _mm512_srli_epi64(z, 27));
    z = _mm512_mullo_epi64(z, _mm512_set1_epi64(0x94d049bb133111ebULL));
    z = _mm512_xor_si512(z, _mm512_srli_epi64(z, 31));
    return z;
}

/// Eight CounterRng streams advanced in lockstep; lane L matches the scalar
/// CounterRng(seed, key_a, s0 + L) sequence exactly.
struct Rng8 {
    __m512i state;

    /// prefix = the state after the seed and key_a mixes (lane independent)
    static std::uint64_t prefix(std::uint64_t seed, std::uint64_t key_a) {
        std::uint64_t z = seed ^ 0x8a5cd789635d2dffULL;
        z = scalar_mix(z);
        z = scalar_mix(z + 0x9e3779b97f4a7c15ULL * (key_a + 1));
        return z;
    }

    void init(std::uint64_t prefixed, std::uint64_t s0) {
        const __m512i keys = _mm512_add_epi64(_mm512_set1_epi64(static_cast<long long>(s0 + 1)),
                                              _mm512_setr_epi64(0, 1, 2, 3, 4, 5, 6, 7));
        state = mix64(_mm512_add_epi64(
            _mm512_set1_epi64(static_cast<long long>(prefixed)),
            _mm512_mullo_epi64(_mm512_set1_epi64(0xbf58476d1ce4e5b9ULL), keys)));
    }

    __m512i next_u64() {
        state = _mm512_add_epi64(state, _mm512_set1_epi64(0x9e3779b97f4a7c15ULL));
        return mix64(state);
    }

    /// Advance only the lanes in `m`, giving per-lane draw counts that match
    /// scalar rejection loops.
    __m512i next_u64_masked(__mmask8 m) {
        state = _mm512_mask_add_epi64(state, m, state,
                                      _mm512_set1_epi64(0x9e3779b97f4a7c15ULL));
        return mix64(state);
    }

    __m512d next_unit() {
        const __m512i bits = _mm512_srli_epi64(next_u64(), 11);
        return _mm512_mul_pd(_mm512_cvtepu64_pd(bits), _mm512_set1_pd(0x1.0p-53));
    }

    __m512d next_unit_masked(__mmask8 m) {
        const __m512i bits = _mm512_srli_epi64(next_u64_masked(m), 11);
        return _mm512_mul_pd(_mm512_cvtepu64_pd(bits), _mm512_set1_pd(0x1.0p-53));
    }

  private:
    static std::uint64_t scalar_mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }
};

/// exp(x) for x <= 0, accurate to ~1 ulp on the reduced range (Cephes
/// rational minimax), with hardware scalef handling the binade including
/// gradual underflow.
inline __m512d exp_nonpos(__m512d x) {
    const __m512d log2e = _mm512_set1_pd(1.4426950408889634074);
    const __m512d ln2_hi = _mm512_set1_pd(6.93145751953125e-1);
    const __m512d ln2_lo = _mm512_set1_pd(1.42860682030941723212e-6);
    // clamp far below the denormal range; scalef flushes the rest correctly
    x = _mm512_max_pd(x, _mm512_set1_pd(-760.0));
    const __m512d n = _mm512_roundscale_pd(_mm512_mul_pd(x, log2e),
                                           _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m512d r = _mm512_fnmadd_pd(n, ln2_hi, x);
    r = _mm512_fnmadd_pd(n, ln2_lo, r);
    const __m512d r2 = _mm512_mul_pd(r, r);
    __m512d p = _mm512_set1_pd(1.26177193074810590878e-4);
    p = _mm512_fmadd_pd(p, r2, _mm512_set1_pd(3.02994407707441961300e-2));
    p = _mm512_fmadd_pd(p, r2, _mm512_set1_pd(9.99999999999999999910e-1));
    __m512d q = _mm512_set1_pd(3.00198505138664455042e-6);
    q = _mm512_fmadd_pd(q, r2, _mm512_set1_pd(2.52448340349684104192e-3));
    q = _mm512_fmadd_pd(q, r2, _mm512_set1_pd(2.27265548208155028766e-1));
    q = _mm512_fmadd_pd(q, r2, _mm512_set1_pd(2.00000000000000000005e0));
    const __m512d rp = _mm512_mul_pd(r, p);
    const __m512d y = _mm512_add_pd(
        _mm512_set1_pd(1.0),
        _mm512_div_pd(_mm512_add_pd(rp, rp), _mm512_sub_pd(q, rp)));
    return _mm512_scalef_pd(y, n);
}

/// x^e for the half-integer exponents the sampler fast paths support.
/// `code` = 2 * e, one of {0, 1, 2, 3, 4}; callers validate with pow_code.
inline __m512d pow_half(__m512d x, int code) {
    switch (code) {
        case 0: return _mm512_set1_pd(1.0);
        case 1: return _mm512_sqrt_pd(x);
        case 2: return x;
        case 3: return _mm512_mul_pd(x, _mm512_sqrt_pd(x));
        default: return _mm512_mul_pd(x, x);
    }
}

/// 2*e when e is in {0, 0.5, 1, 1.5, 2}, otherwise -1.
inline int pow_code(double e) {
    if (e == 0.0) return 0;
    if (e == 0.5) return 1;
    if (e == 1.0) return 2;
    if (e == 1.5) return 3;
    if (e == 2.0) return 4;
    return -1;
}

/// Split eight gathered qwords into the float pair they hold, widened.
inline void split_pair(__m512i qw, __m512d& lo, __m512d& hi) {
    lo = _mm512_cvtps_pd(_mm256_castsi256_ps(_mm512_cvtepi64_epi32(qw)));
    hi = _mm512_cvtps_pd(
        _mm256_castsi256_ps(_mm512_cvtepi64_epi32(_mm512_srli_epi64(qw, 32))));
}

} // namespace simd
} // namespace polyboltz

#else
#define POLYBOLTZ_SIMD512 0
#endif
