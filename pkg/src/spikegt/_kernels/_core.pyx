# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

The heavy inner loops live in verbatim C below so the compiler sees
restrict-qualified pointers and can vectorize. FP contraction is disabled
at build time, so results are bit-identical to the numpy fallback.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    #include <stdint.h>

    /* Tiled over (j, k) so the b tile stays cache-resident; per output
       element the k-ascending accumulation order is unchanged, keeping
       results bit-identical to the naive triple loop. */
    static void sgt_matmul_f32(const float* restrict a, const float* restrict b,
                               float* restrict out, long m, long k, long p) {
        const long JB = 512, KB = 128;
        for (long j0 = 0; j0 < p; j0 += JB) {
            const long j1 = (j0 + JB < p) ? j0 + JB : p;
            for (long k0 = 0; k0 < k; k0 += KB) {
                const long k1 = (k0 + KB < k) ? k0 + KB : k;
                for (long i = 0; i < m; i++) {
                    float* orow = out + (long)i * p;
                    const float* arow = a + (long)i * k;
                    for (long kk = k0; kk < k1; kk++) {
                        const float aik = arow[kk];
                        const float* brow = b + (long)kk * p;
                        for (long j = j0; j < j1; j++) {
                            orow[j] += aik * brow[j];
                        }
                    }
                }
            }
        }
    }

    static long sgt_spike_linear_f32(const uint64_t* restrict words, long rows, long w,
                                     const float* restrict weight, long d_out,
                                     float* restrict out) {
        long total = 0;
        for (long r = 0; r < rows; r++) {
            float* orow = out + r * d_out;
            const uint64_t* wrow = words + r * w;
            for (long ww = 0; ww < w; ww++) {
                uint64_t x = wrow[ww];
                while (x) {
                    const long j = ww * 64 + __builtin_ctzll(x);
                    const float* wj = weight + j * d_out;
                    for (long c = 0; c < d_out; c++) {
                        orow[c] += wj[c];
                    }
                    total += 1;
                    x &= x - 1;
                }
            }
        }
        return total;
    }

    static void sgt_colcount(const uint64_t* restrict words, long t, long n, long w,
                             int64_t* restrict counts) {
        for (long tt = 0; tt < t; tt++) {
            int64_t* crow = counts + tt * w * 64;
            const uint64_t* base = words + tt * n * w;
            for (long nn = 0; nn < n; nn++) {
                const uint64_t* row = base + nn * w;
                for (long ww = 0; ww < w; ww++) {
                    uint64_t x = row[ww];
                    while (x) {
                        crow[ww * 64 + __builtin_ctzll(x)] += 1;
                        x &= x - 1;
                    }
                }
            }
        }
    }

    static void sgt_and_colcount(const uint64_t* restrict kw, const uint64_t* restrict vw,
                                 long t, long n, long w, int64_t* restrict counts) {
        for (long tt = 0; tt < t; tt++) {
            int64_t* crow = counts + tt * w * 64;
            const uint64_t* kbase = kw + tt * n * w;
            const uint64_t* vbase = vw + tt * n * w;
            for (long nn = 0; nn < n; nn++) {
                const uint64_t* krow = kbase + nn * w;
                const uint64_t* vrow = vbase + nn * w;
                for (long ww = 0; ww < w; ww++) {
                    uint64_t x = krow[ww] & vrow[ww];
                    while (x) {
                        crow[ww * 64 + __builtin_ctzll(x)] += 1;
                        x &= x - 1;
                    }
                }
            }
        }
    }

    static void sgt_spmm_f32(const int64_t* restrict indptr, const int64_t* restrict indices,
                             const float* restrict vals, const float* restrict x,
                             long n, long d, float* restrict out) {
        for (long u = 0; u < n; u++) {
            float* orow = out + u * d;
            for (int64_t e = indptr[u]; e < indptr[u + 1]; e++) {
                const float wv = vals[e];
                const float* xrow = x + indices[e] * d;
                for (long c = 0; c < d; c++) {
                    orow[c] += wv * xrow[c];
                }
            }
        }
    }
    """
    void sgt_matmul_f32(const float* a, const float* b, float* out, long m, long k, long p) nogil
    long sgt_spike_linear_f32(const unsigned long long* words, long rows, long w,
                              const float* weight, long d_out, float* out) nogil
    void sgt_colcount(const unsigned long long* words, long t, long n, long w,
                      long long* counts) nogil
    void sgt_and_colcount(const unsigned long long* kw, const unsigned long long* vw,
                          long t, long n, long w, long long* counts) nogil
    void sgt_spmm_f32(const long long* indptr, const long long* indices, const float* vals,
                      const float* x, long n, long d, float* out) nogil


def matmul_f32(cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] a not None,
               cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] b not None):
    cdef long m = a.shape[0], k = a.shape[1], p = b.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] out = np.zeros((m, p), dtype=np.float32)
    if m and k and p:
        with nogil:
            sgt_matmul_f32(<const float*> a.data, <const float*> b.data,
                           <float*> out.data, m, k, p)
    return out


def spike_linear_f32(cnp.ndarray[cnp.uint64_t, ndim=2, mode="c"] words not None,
                     long d_in,
                     cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] weight not None):
    cdef long rows = words.shape[0], w = words.shape[1], d_out = weight.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] out = np.zeros((rows, d_out), dtype=np.float32)
    cdef long bits = 0
    if rows and w:
        with nogil:
            bits = sgt_spike_linear_f32(<const unsigned long long*> words.data, rows, w,
                                        <const float*> weight.data, d_out,
                                        <float*> out.data)
    return out, bits


def colwise_popcount(cnp.ndarray[cnp.uint64_t, ndim=3, mode="c"] words3 not None, long d):
    cdef long t = words3.shape[0], n = words3.shape[1], w = words3.shape[2]
    cdef cnp.ndarray[cnp.int64_t, ndim=2, mode="c"] counts = np.zeros((t, w * 64), dtype=np.int64)
    if t and n and w:
        with nogil:
            sgt_colcount(<const unsigned long long*> words3.data, t, n, w,
                         <long long*> counts.data)
    return counts[:, :d]


def and_colwise_popcount(cnp.ndarray[cnp.uint64_t, ndim=3, mode="c"] kw not None,
                         cnp.ndarray[cnp.uint64_t, ndim=3, mode="c"] vw not None, long d):
    cdef long t = kw.shape[0], n = kw.shape[1], w = kw.shape[2]
    cdef cnp.ndarray[cnp.int64_t, ndim=2, mode="c"] counts = np.zeros((t, w * 64), dtype=np.int64)
    if t and n and w:
        with nogil:
            sgt_and_colcount(<const unsigned long long*> kw.data,
                             <const unsigned long long*> vw.data, t, n, w,
                             <long long*> counts.data)
    return counts[:, :d]


def spmm_csr_f32(cnp.ndarray[cnp.int64_t, ndim=1, mode="c"] indptr not None,
                 cnp.ndarray[cnp.int64_t, ndim=1, mode="c"] indices not None,
                 cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] weights not None,
                 cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] x not None):
    cdef long n = indptr.shape[0] - 1, d = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] out = np.zeros((n, d), dtype=np.float32)
    if n and d:
        with nogil:
            sgt_spmm_f32(<const long long*> indptr.data, <const long long*> indices.data,
                         <const float*> weights.data, <const float*> x.data, n, d,
                         <float*> out.data)
    return out
