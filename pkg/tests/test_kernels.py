"""Compiled and fallback kernels must agree bit for bit."""

import numpy as np
import pytest

from spikegt import _kernels
from spikegt._kernels import _fallback as fb
from spikegt.tensor import pack_bits

compiled = pytest.importorskip("spikegt._kernels._core")


@pytest.mark.parametrize(
    "m,k,p",
    [(1, 1, 1), (7, 5, 3), (64, 64, 64), (130, 200, 515), (600, 3, 1030), (33, 700, 5)],
)
def test_matmul_bitwise_equal(rng, m, k, p):
    a = rng.standard_normal((m, k)).astype(np.float32)
    b = rng.standard_normal((k, p)).astype(np.float32)
    assert np.array_equal(compiled.matmul_f32(a, b), fb.matmul_f32(a, b))


def test_matmul_matches_scalar_triple_loop(rng):
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    ref = np.zeros((7, 3), dtype=np.float32)
    for i in range(7):
        for j in range(3):
            acc = np.float32(0.0)
            for kk in range(5):
                acc += a[i, kk] * b[kk, j]
            ref[i, j] = acc
    assert np.array_equal(compiled.matmul_f32(a, b), ref)
    assert np.array_equal(fb.matmul_f32(a, b), ref)


@pytest.mark.parametrize("d", [1, 63, 64, 65, 130])
def test_spike_linear_bitwise_equal(rng, d):
    bits = (rng.random((3, 9, d)) < 0.4).astype(np.float32)
    words = pack_bits(bits).reshape(27, -1)
    w = rng.standard_normal((d, 17)).astype(np.float32)
    oc, bc = compiled.spike_linear_f32(words, d, w)
    of, bf = fb.spike_linear_f32(words, d, w)
    assert bc == bf == int(bits.sum())
    assert np.array_equal(oc, of)


@pytest.mark.parametrize("d", [1, 64, 100])
def test_colwise_popcounts_equal(rng, d):
    a = (rng.random((2, 11, d)) < 0.5).astype(np.float32)
    b = (rng.random((2, 11, d)) < 0.5).astype(np.float32)
    aw, bw = pack_bits(a), pack_bits(b)
    assert np.array_equal(compiled.colwise_popcount(aw, d), fb.colwise_popcount(aw, d))
    assert np.array_equal(
        compiled.and_colwise_popcount(aw, bw, d), fb.and_colwise_popcount(aw, bw, d)
    )
    assert np.array_equal(compiled.colwise_popcount(aw, d), a.sum(axis=1).astype(np.int64))
    assert np.array_equal(
        compiled.and_colwise_popcount(aw, bw, d), (a * b).sum(axis=1).astype(np.int64)
    )


def test_spmm_equal(rng):
    n, d = 23, 6
    indptr = np.sort(rng.integers(0, 40, n + 1)).astype(np.int64)
    indptr[0] = 0
    indptr[-1] = 40
    indices = rng.integers(0, n, 40).astype(np.int64)
    weights = rng.standard_normal(40).astype(np.float32)
    x = rng.standard_normal((n, d)).astype(np.float32)
    out_c = compiled.spmm_csr_f32(indptr, indices, weights, x)
    out_f = fb.spmm_csr_f32(indptr, indices, weights, x)
    assert np.allclose(out_c, out_f, rtol=1e-6, atol=1e-6)


def test_backend_name_reports():
    assert _kernels.backend_name() in ("compiled", "fallback")
