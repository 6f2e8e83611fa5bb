"""Spiking graph attention: additions and masks only, linear in node count.

Per layer: the input runs through a spiking neuron, the resulting spikes
through per-branch linear+batchnorm+spiking stages giving binary Q, K, V.
The attention itself reduces K AND V by a per-channel popcount over the
node axis, thresholds that count sequence through a spiking neuron into a
binary per-channel mask, and applies the mask to Q broadcast over nodes.
No N x N object is ever formed; transient state beyond inputs and outputs
is O(T * D).

With `heads` below the channel count, contiguous groups of D/heads
channels share one mask scalar (their counts are summed before the
threshold neuron).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .counters import OpCounters, global_counters
from .errors import ShapeError
from .neuron import LifParams, lif_backward, lif_forward
from .tensor import (
    BatchNormLayer,
    DenseTensor,
    LinearLayer,
    SpikeTensor,
    batchnorm_backward,
    batchnorm_forward,
    linear_apply,
    linear_backward,
    pack_bits,
    spike_linear,
)


@dataclass
class AttnCounters:
    additions: int = 0
    spike_density_q: float = 0.0
    spike_density_k: float = 0.0
    spike_density_v: float = 0.0
    mask_fire_rate: float = 0.0


class SgaLayer:
    """Parameters of one spiking attention layer (projections D -> D)."""

    def __init__(
        self,
        lin_q: LinearLayer,
        lin_k: LinearLayer,
        lin_v: LinearLayer,
        bn_q: BatchNormLayer,
        bn_k: BatchNormLayer,
        bn_v: BatchNormLayer,
        lif: LifParams | None = None,
        heads: int | None = None,
    ):
        d = lin_q.weight.shape[1]
        for lin in (lin_q, lin_k, lin_v):
            if lin.weight.shape != (d, d):
                raise ShapeError("q/k/v projections must share square dimensions")
        self.lin_q, self.lin_k, self.lin_v = lin_q, lin_k, lin_v
        self.bn_q, self.bn_k, self.bn_v = bn_q, bn_k, bn_v
        lif = lif or LifParams()
        self.lif_in = lif
        self.lif_q = lif
        self.lif_k = lif
        self.lif_v = lif
        self.lif_attn = lif
        self.heads = d if heads is None else int(heads)
        if self.heads < 1 or d % self.heads != 0:
            raise ShapeError(f"heads={self.heads} must divide channel count {d}")
        self.d = d

    @classmethod
    def create(
        cls, d: int, rng: np.random.Generator, heads: int | None = None, lif: LifParams | None = None
    ) -> "SgaLayer":
        def lin():
            return LinearLayer.glorot(d, d, rng, bias=False)

        return cls(lin(), lin(), lin(), BatchNormLayer(d), BatchNormLayer(d), BatchNormLayer(d), lif=lif, heads=heads)

    def parameters(self, prefix: str = "sga"):
        for name, lin in (("q", self.lin_q), ("k", self.lin_k), ("v", self.lin_v)):
            yield f"{prefix}.lin_{name}.weight", lin.weight, lin.gw
            bn = getattr(self, f"bn_{name}")
            yield f"{prefix}.bn_{name}.gamma", bn.gamma, bn.ggamma
            yield f"{prefix}.bn_{name}.beta", bn.beta, bn.gbeta


def _expand_heads(arr: np.ndarray, heads: int, d: int) -> np.ndarray:
    if heads == d:
        return arr
    return np.repeat(arr, d // heads, axis=-1)


def _to_dense_input(u) -> DenseTensor:
    if isinstance(u, SpikeTensor):
        return u.to_dense()
    if isinstance(u, DenseTensor):
        return u
    return DenseTensor(u)


def project_branch(
    s_in: SpikeTensor,
    lin: LinearLayer,
    bn: BatchNormLayer,
    lif: LifParams,
    counters: OpCounters | None = None,
) -> SpikeTensor:
    """Inference-mode spike projection: linear, batch norm, threshold."""
    pre = spike_linear(s_in, lin, counters)
    h = batchnorm_forward(pre, bn, training=False)
    out, _ = lif_forward(h, lif, want_trace=False)
    return out


def sga_qkv(
    u,
    layer: SgaLayer,
    training: bool = False,
    relaxed: bool = False,
    cache: dict | None = None,
    counters: OpCounters | None = None,
):
    """Produce binary Q, K, V from the block input (spikes or potentials)."""
    x = _to_dense_input(u)
    if x.ndim != 3:
        raise ShapeError("sga_qkv expects [T, N, D]")
    want = cache is not None
    s, s_trace = lif_forward(x, layer.lif_in, relaxed=relaxed, want_trace=want)
    outs = {}
    for name in ("q", "k", "v"):
        lin: LinearLayer = getattr(layer, f"lin_{name}")
        bn: BatchNormLayer = getattr(layer, f"bn_{name}")
        if relaxed:
            pre = DenseTensor(linear_apply(s.data, lin, counters), check=False)
        else:
            pre = spike_linear(s, lin, counters)
        bn_cache: dict | None = {} if cache is not None else None
        h = batchnorm_forward(pre, bn, training=training, cache=bn_cache)
        out, trace = lif_forward(h, getattr(layer, f"lif_{name}"), relaxed=relaxed, want_trace=want)
        outs[name] = out
        if cache is not None:
            cache[name] = {"bn": bn_cache, "lif_trace": trace}
    if cache is not None:
        cache["s_float"] = s.data if relaxed else s.unpack()
        cache["s_trace"] = s_trace
        cache["relaxed"] = relaxed
    return outs["q"], outs["k"], outs["v"]


def sga_attend(
    q,
    k,
    v,
    lif_attn: LifParams,
    heads: int | None = None,
    relaxed: bool = False,
    cache: dict | None = None,
    counters: OpCounters | None = None,
):
    """Column-sum K AND V per channel, threshold into a mask, apply to Q.

    Returns (out, AttnCounters). The count sequence runs through the
    threshold neuron along the time axis, so the mask at step t depends on
    counts up to t.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    if len(q.shape) != 3:
        raise ShapeError("sga_attend expects [T, N, D]")
    t_steps, n, d = q.shape
    h = d if heads is None else int(heads)
    if h < 1 or d % h != 0:
        raise ShapeError(f"heads={h} must divide channel count {d}")
    c = counters or global_counters()

    if relaxed:
        for name, x in (("q", q), ("k", k), ("v", v)):
            if not isinstance(x, DenseTensor):
                raise ShapeError(f"relaxed attend expects dense {name}")
        counts = (k.data * v.data).sum(axis=1)  # [T, D]
        c_head = counts.reshape(t_steps, h, d // h).sum(axis=-1) if h != d else counts
        m, m_trace = lif_forward(DenseTensor(c_head[:, None, :], check=False), lif_attn, relaxed=True)
        m_full = _expand_heads(m.data, h, d)  # [T, 1, D]
        out = DenseTensor(q.data * m_full, check=False)
        stats = AttnCounters(
            additions=0,
            spike_density_q=float(q.data.mean()),
            spike_density_k=float(k.data.mean()),
            spike_density_v=float(v.data.mean()),
            mask_fire_rate=float(m.data.mean()),
        )
        if cache is not None:
            cache.update(
                q_float=q.data, k_float=k.data, v_float=v.data,
                m_full=m_full, m_trace=m_trace, heads=h, relaxed=True,
            )
        return out, stats

    for name, x in (("q", q), ("k", k), ("v", v)):
        if not isinstance(x, SpikeTensor):
            raise ShapeError(f"sga_attend expects binary {name}")
    counts = _kernels.and_colwise_popcount(k.words, v.words, d)  # int64 [T, D]
    popcount_work = int(counts.sum())
    c_head = counts.reshape(t_steps, h, d // h).sum(axis=-1) if h != d else counts
    m, m_trace = lif_forward(
        DenseTensor(c_head.astype(np.float32)[:, None, :], check=False), lif_attn
    )
    m_bits = _expand_heads(m.unpack(), h, d)  # [T, 1, D]
    mask_words = pack_bits(m_bits)  # [T, 1, W]
    out_words = np.bitwise_and(q.words, mask_words)
    out = SpikeTensor(out_words, q.shape)
    c.adds += popcount_work + t_steps * h
    stats = AttnCounters(
        additions=popcount_work + t_steps * h,
        spike_density_q=q.density(),
        spike_density_k=k.density(),
        spike_density_v=v.density(),
        mask_fire_rate=float(m_bits.mean()),
    )
    if cache is not None:
        cache.update(
            q_float=q.unpack(), k_float=k.unpack(), v_float=v.unpack(),
            m_full=m_bits, m_trace=m_trace, heads=h, relaxed=False,
        )
    return out, stats


def sga_forward(
    u,
    layer: SgaLayer,
    training: bool = False,
    relaxed: bool = False,
    cache: dict | None = None,
    counters: OpCounters | None = None,
):
    """Full attention block: projections then masked attention."""
    qkv_cache: dict | None = {} if cache is not None else None
    q, k, v = sga_qkv(u, layer, training=training, relaxed=relaxed, cache=qkv_cache, counters=counters)
    attn_cache: dict | None = {} if cache is not None else None
    out, stats = sga_attend(
        q, k, v, layer.lif_attn, heads=layer.heads, relaxed=relaxed,
        cache=attn_cache, counters=counters,
    )
    if cache is not None:
        cache["qkv"] = qkv_cache
        cache["attn"] = attn_cache
        cache["stats"] = stats
    return out, stats


def sga_backward(
    grad_out: np.ndarray,
    cache: dict,
    layer: SgaLayer,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Reverse of sga_forward; accumulates projection and BN gradients.

    The broadcast mask sends gradient into both the Q path and, through
    the count reduction, the K and V paths.
    """
    if "attn" not in cache or "qkv" not in cache:
        raise KeyError("sga_backward needs the cache filled by sga_forward")
    attn = cache["attn"]
    qkv = cache["qkv"]
    relaxed = attn["relaxed"]
    heads = attn["heads"]
    q_f, k_f, v_f = attn["q_float"], attn["k_float"], attn["v_float"]
    t_steps, _, d = q_f.shape

    m_full = attn["m_full"]
    dq = grad_out * m_full
    dm_full = (grad_out * q_f).sum(axis=1, keepdims=True)  # [T, 1, D]
    if heads != d:
        dm_head = dm_full.reshape(t_steps, 1, heads, d // heads).sum(axis=-1)
    else:
        dm_head = dm_full
    dc_head = lif_backward(np.ascontiguousarray(dm_head), attn["m_trace"], layer.lif_attn, relaxed=relaxed)
    dc_full = _expand_heads(dc_head, heads, d)  # [T, 1, D]
    dk = dc_full * v_f
    dv = dc_full * k_f

    s_float = qkv["s_float"]
    ds_total = np.zeros_like(s_float)
    for name, dbranch in (("q", dq), ("k", dk), ("v", dv)):
        branch = qkv[name]
        dh = lif_backward(
            np.ascontiguousarray(dbranch), branch["lif_trace"], getattr(layer, f"lif_{name}"),
            relaxed=relaxed,
        )
        bn: BatchNormLayer = getattr(layer, f"bn_{name}")
        dpre = batchnorm_backward(dh, bn, branch["bn"])
        ds_total += linear_backward(dpre, s_float, getattr(layer, f"lin_{name}"), counters)
    dx = lif_backward(ds_total, qkv["s_trace"], layer.lif_in, relaxed=relaxed)
    return dx
