"""Sparse GCN branch: symmetric-normalized CSR aggregation, O(E) per layer."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .counters import OpCounters, global_counters
from .errors import ShapeError
from .tensor import DenseTensor, LinearLayer, _as_f32, linear_apply, linear_backward


class CsrGraph:
    """Compressed-row adjacency with normalized edge weights."""

    def __init__(self, n: int, row_ptr, col_idx, weights):
        self.n = int(n)
        self.row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(col_idx, dtype=np.int64)
        self.weights = _as_f32(weights)
        if self.row_ptr.shape != (self.n + 1,):
            raise ShapeError("row_ptr must have n+1 entries")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.col_idx.shape[0]:
            raise ShapeError("row_ptr must start at 0 and end at E")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ShapeError("row_ptr must be nondecreasing")
        if self.col_idx.size and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n):
            raise ShapeError("col_idx entries out of range")
        if self.weights.shape != self.col_idx.shape:
            raise ShapeError("weights must align with col_idx")

    @property
    def num_edges(self) -> int:
        return int(self.col_idx.shape[0])


def normalize_adjacency(edges, n: int, add_self_loops: bool = True) -> CsrGraph:
    """Build sym-normalized CSR from an undirected edge list.

    Input pairs are symmetrized and deduplicated; weights become
    1/sqrt(d_u * d_v) with degrees counted after self-loop insertion.
    Isolated nodes without self-loops simply get empty rows.
    """
    if n <= 0:
        raise ValueError("graph needs at least one node")
    pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
        raise ShapeError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0) if pairs.size else pairs
    if add_self_loops:
        loops = np.stack([np.arange(n, dtype=np.int64)] * 2, axis=1)
        both = np.concatenate([both, loops], axis=0) if both.size else loops
    if both.size == 0:
        return CsrGraph(n, np.zeros(n + 1, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float32))
    both = np.unique(both, axis=0)
    u, v = both[:, 0], both[:, 1]
    deg = np.bincount(u, minlength=n).astype(np.float64)
    inv_sqrt = np.zeros(n, dtype=np.float64)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    w = (inv_sqrt[u] * inv_sqrt[v]).astype(np.float32)
    order = np.lexsort((v, u))
    u, v, w = u[order], v[order], w[order]
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(u, minlength=n), out=row_ptr[1:])
    return CsrGraph(n, row_ptr, v, w)


def spmm(g: CsrGraph, x: DenseTensor, counters: OpCounters | None = None) -> DenseTensor:
    """Sparse aggregation: out[u] = sum over edges (u,v) of w * x[v]."""
    if x.ndim != 2:
        raise ShapeError("spmm expects [N, D]")
    if g.n != x.shape[0]:
        raise ShapeError(f"graph has {g.n} nodes but x has {x.shape[0]} rows")
    c = counters or global_counters()
    c.muls += g.num_edges * x.shape[1]
    c.adds += g.num_edges * x.shape[1]
    if x.data.dtype == np.float64:
        out = np.zeros_like(x.data)
        if g.num_edges:
            rows = np.repeat(np.arange(g.n), np.diff(g.row_ptr))
            np.add.at(out, rows, g.weights.astype(np.float64)[:, None] * x.data[g.col_idx])
        return DenseTensor(out)
    return DenseTensor(_kernels.spmm_csr_f32(g.row_ptr, g.col_idx, g.weights, x.data))


class GcnLayer:
    def __init__(self, weight, bias=None, activation: bool = True, dropout_rate: float = 0.0):
        self.linear = LinearLayer(weight, bias)
        self.activation = bool(activation)
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0,1)")
        self.dropout_rate = float(dropout_rate)

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: bool = True,
        dropout_rate: float = 0.0,
    ) -> "GcnLayer":
        lin = LinearLayer.glorot(d_in, d_out, rng, bias=True)
        return cls(lin.weight, lin.bias, activation=activation, dropout_rate=dropout_rate)

    def zero_grad(self) -> None:
        self.linear.zero_grad()


def gcn_forward(
    g: CsrGraph,
    x: DenseTensor,
    layers: list[GcnLayer],
    training: bool = False,
    rng: np.random.Generator | None = None,
    cache: list | None = None,
    counters: OpCounters | None = None,
) -> DenseTensor:
    """Stack of dropout -> aggregate -> linear -> ReLU (no ReLU on last)."""
    h = x
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        d_in = layer.linear.weight.shape[0]
        if h.shape[1] != d_in:
            raise ShapeError(f"layer {i} expects width {d_in}, got {h.shape[1]}")
        step: dict = {}
        arr = h.data
        if training and layer.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            keep = 1.0 - layer.dropout_rate
            mask = (rng.random(arr.shape) < keep).astype(arr.dtype) / arr.dtype.type(keep)
            arr = arr * mask
            step["drop_mask"] = mask
        agg = spmm(g, DenseTensor(arr, check=False), counters)
        pre = linear_apply(agg.data, layer.linear, counters)
        relu_on = layer.activation and i != last
        out = np.maximum(pre, np.float32(0.0)) if relu_on else pre
        step.update(x_in=arr, agg=agg, pre=pre, relu=relu_on)
        if cache is not None:
            cache.append(step)
        h = DenseTensor(out, check=False)
    return h


def gcn_backward(
    grad_out: np.ndarray,
    g: CsrGraph,
    layers: list[GcnLayer],
    cache: list,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Reverse of gcn_forward; accumulates layer gradients, returns dx.

    Uses the same graph for the transposed aggregation because symmetric
    normalization makes the weight matrix symmetric.
    """
    dh = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        step = cache[i]
        if step["relu"]:
            dh = dh * (step["pre"] > 0.0)
        dagg = linear_backward(dh, step["agg"].data, layer.linear, counters)
        dx = spmm(g, DenseTensor(dagg, check=False), counters).data
        if "drop_mask" in step:
            dx = dx * step["drop_mask"]
        dh = dx
    return dh
