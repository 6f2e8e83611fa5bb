"""Pure-numpy kernels, used when the compiled extension is unavailable.

Accumulation orders are chosen to match the compiled kernels bit for bit
(float32, no fused multiply-add): matrix products and spike projections
accumulate along the inner axis in ascending order for every output
element, exactly like a scalar triple loop.
"""

from __future__ import annotations

import numpy as np

_ONE = np.uint64(1)

# Row block sizing keeps the per-step temporary in matmul_f32 around 16 MB.
_BLOCK_ELEMS = 4 << 20


def matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p), dtype=np.float32)
    if k == 0:
        return out
    step = max(1, _BLOCK_ELEMS // max(p, 1))
    for i0 in range(0, m, step):
        ablk = a[i0 : i0 + step]
        oblk = out[i0 : i0 + step]
        for kk in range(k):
            oblk += ablk[:, kk : kk + 1] * b[kk]
    return out


def spike_linear_f32(words: np.ndarray, d_in: int, weight: np.ndarray) -> tuple[np.ndarray, int]:
    """Rows of `weight` gathered and added where spike bits are set.

    `words` is uint64 [rows, n_words], bit j of the row = channel
    64*word + j. Returns (out [rows, d_out], total set bits).
    """
    rows = words.shape[0]
    d_out = weight.shape[1]
    out = np.zeros((rows, d_out), dtype=np.float32)
    total_bits = int(np.bitwise_count(words).sum())
    for j in range(d_in):
        col = words[:, j >> 6]
        hit = (col >> np.uint64(j & 63)) & _ONE
        idx = np.nonzero(hit)[0]
        if idx.size:
            out[idx] += weight[j]
    return out, total_bits


def colwise_popcount(words3: np.ndarray, d: int) -> np.ndarray:
    """Per-channel set-bit counts over the node axis of uint64 [T, N, W]."""
    t, _, w = words3.shape
    counts = np.zeros((t, w * 64), dtype=np.int64)
    for b in range(64):
        counts[:, b::64] = ((words3 >> np.uint64(b)) & _ONE).sum(axis=1)
    return counts[:, :d]


def and_colwise_popcount(kw: np.ndarray, vw: np.ndarray, d: int) -> np.ndarray:
    return colwise_popcount(np.bitwise_and(kw, vw), d)


def spmm_csr_f32(
    indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray, x: np.ndarray
) -> np.ndarray:
    n = indptr.shape[0] - 1
    out = np.zeros((n, x.shape[1]), dtype=np.float32)
    if indices.size == 0:
        return out
    rows = np.repeat(np.arange(n), np.diff(indptr))
    np.add.at(out, rows, weights[:, None] * x[indices])
    return out
