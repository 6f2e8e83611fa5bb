"""Efficiency harness: spiking attention vs a dense softmax baseline.

The baseline mirrors the spiking encoder's block structure (input
projection with batch norm, attention and MLP residuals, linear
classifier) but uses standard softmax attention with an explicit N x N
score matrix and GELU activations. Timings are wall-clock medians over
repeats after one warm-up; memory is the live-tensor byte accountant's
peak over one training step. Timed sections run single-threaded.

Counter scope: matrix products and spike projections (see counters.py).
The spiking path's attention core performs no multiplications; the
baseline's multiplication count grows with N^2.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from . import memory
from .counters import global_counters
from .errors import MemoryCapExceeded, ShapeError
from .model import SpikeGraphTransformer, encode, forward, streaming_logits
from .tensor import (
    BatchNormLayer,
    DenseTensor,
    LinearLayer,
    _mm,
    batchnorm_backward,
    batchnorm_forward,
    linear_apply,
    linear_backward,
)
from .train import AdamState, adam_step, loss_and_grad, nll_loss

REPORT_HEADER = "method,n,d,t,forward_ms,train_step_ms,mem_bytes,adds,muls,spike_density"

_BENCH_CLASSES = 8
_BLOCK_ELEMS = 4 << 20


class VanillaAttention:
    """Plain softmax attention, quadratic in the node count."""

    def __init__(self, lin_q: LinearLayer, lin_k: LinearLayer, lin_v: LinearLayer):
        d = lin_q.weight.shape[1]
        for lin in (lin_q, lin_k, lin_v):
            if lin.weight.shape != (d, d):
                raise ShapeError("projections must be square")
        self.lin_q, self.lin_k, self.lin_v = lin_q, lin_k, lin_v
        self.scale = 1.0 / np.sqrt(d)

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "VanillaAttention":
        return cls(
            LinearLayer.glorot(d, d, rng, bias=False),
            LinearLayer.glorot(d, d, rng, bias=False),
            LinearLayer.glorot(d, d, rng, bias=False),
        )


def vanilla_attend(x: DenseTensor, layer: VanillaAttention, cache: dict | None = None) -> DenseTensor:
    """softmax(Q K^T / sqrt(D)) V with row-wise max subtraction."""
    if x.ndim != 2:
        raise ShapeError("vanilla_attend expects [N, D]")
    n = x.shape[0]
    c = global_counters()
    q = linear_apply(x.data, layer.lin_q)
    k = linear_apply(x.data, layer.lin_k)
    v = linear_apply(x.data, layer.lin_v)
    scores = _mm(q, np.ascontiguousarray(k.T))
    scores *= np.float32(layer.scale)
    c.muls += n * n
    probs = DenseTensor(scores, check=False)  # softmax happens in place below
    arr = probs.data
    arr -= arr.max(axis=1, keepdims=True)
    np.exp(arr, out=arr)
    arr /= arr.sum(axis=1, keepdims=True)
    out = _mm(arr, v)
    if cache is not None:
        cache.update(q=q, k=k, v=v, probs=probs, x=x.data)
    return DenseTensor(out, check=False)


def vanilla_attend_backward(dout: np.ndarray, cache: dict, layer: VanillaAttention) -> np.ndarray:
    """Backward of vanilla_attend; score gradients run in row blocks so the
    transient stays bounded while the saved probability matrix dominates."""
    q, k, v, probs = cache["q"], cache["k"], cache["v"], cache["probs"].data
    n, d = q.shape
    scale = np.float32(layer.scale)
    dv = np.ascontiguousarray(_mm(np.ascontiguousarray(dout.T), probs).T)
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    v_t = np.ascontiguousarray(v.T)
    step = max(1, _BLOCK_ELEMS // max(n, 1))
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        dprobs = _mm(dout[lo:hi], v_t)
        p_blk = probs[lo:hi]
        dot = (dprobs * p_blk).sum(axis=1, keepdims=True)
        dscores = p_blk * (dprobs - dot)
        dscores *= scale
        dq[lo:hi] = _mm(dscores, k)
        dk += _mm(np.ascontiguousarray(dscores.T), q[lo:hi])
    dx = linear_backward(dq, cache["x"], layer.lin_q)
    dx += linear_backward(dk, cache["x"], layer.lin_k)
    dx += linear_backward(dv, cache["x"], layer.lin_v)
    return dx


def _gelu(x: np.ndarray) -> np.ndarray:
    u = np.float32(0.7978845608) * (x + np.float32(0.044715) * x * x * x)
    return np.float32(0.5) * x * (1.0 + np.tanh(u))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    c = np.float32(0.7978845608)
    a = np.float32(0.044715)
    u = c * (x + a * x * x * x)
    t = np.tanh(u)
    sech2 = 1.0 - t * t
    return np.float32(0.5) * (1.0 + t) + np.float32(0.5) * x * sech2 * c * (1.0 + 3.0 * a * x * x)


class VanillaBlock:
    def __init__(self, d: int, rng: np.random.Generator):
        self.attn = VanillaAttention.create(d, rng)
        self.mlp_lin1 = LinearLayer.glorot(d, d, rng, bias=False)
        self.mlp_bn1 = BatchNormLayer(d)
        self.mlp_lin2 = LinearLayer.glorot(d, d, rng, bias=False)
        self.mlp_bn2 = BatchNormLayer(d)


class VanillaTransformer:
    """Dense twin of the spiking encoder, for the scaling comparison."""

    def __init__(self, d_in: int, d: int, n_classes: int, n_blocks: int = 1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_in, self.d, self.n_classes = d_in, d, n_classes
        self.in_proj = LinearLayer.glorot(d_in, d, rng, bias=False)
        self.in_bn = BatchNormLayer(d)
        self.blocks = [VanillaBlock(d, rng) for _ in range(n_blocks)]
        self.classifier = LinearLayer.glorot(d, n_classes, rng, bias=True)

    def named_parameters(self):
        yield "in_proj.weight", self.in_proj.weight, self.in_proj.gw
        yield "in_bn.gamma", self.in_bn.gamma, self.in_bn.ggamma
        yield "in_bn.beta", self.in_bn.beta, self.in_bn.gbeta
        for i, blk in enumerate(self.blocks):
            for nm, lin in (("q", blk.attn.lin_q), ("k", blk.attn.lin_k), ("v", blk.attn.lin_v)):
                yield f"blocks.{i}.attn.lin_{nm}.weight", lin.weight, lin.gw
            yield f"blocks.{i}.mlp_lin1.weight", blk.mlp_lin1.weight, blk.mlp_lin1.gw
            yield f"blocks.{i}.mlp_bn1.gamma", blk.mlp_bn1.gamma, blk.mlp_bn1.ggamma
            yield f"blocks.{i}.mlp_bn1.beta", blk.mlp_bn1.beta, blk.mlp_bn1.gbeta
            yield f"blocks.{i}.mlp_lin2.weight", blk.mlp_lin2.weight, blk.mlp_lin2.gw
            yield f"blocks.{i}.mlp_bn2.gamma", blk.mlp_bn2.gamma, blk.mlp_bn2.ggamma
            yield f"blocks.{i}.mlp_bn2.beta", blk.mlp_bn2.beta, blk.mlp_bn2.gbeta
        yield "classifier.weight", self.classifier.weight, self.classifier.gw
        yield "classifier.bias", self.classifier.bias, self.classifier.gb

    def zero_grad(self) -> None:
        for _, _, grad in self.named_parameters():
            grad[...] = 0.0

    def forward(self, x: DenseTensor, training: bool = False, cache: dict | None = None) -> DenseTensor:
        in_bn_cache: dict | None = {} if cache is not None else None
        h = batchnorm_forward(
            DenseTensor(linear_apply(x.data, self.in_proj), check=False),
            self.in_bn,
            training=training,
            cache=in_bn_cache,
        ).data
        block_caches = []
        for blk in self.blocks:
            bc: dict = {}
            attn_cache: dict | None = {} if cache is not None else None
            a = vanilla_attend(DenseTensor(h, check=False), blk.attn, cache=attn_cache).data + h
            m1 = linear_apply(a, blk.mlp_lin1)
            bn1_cache: dict | None = {} if cache is not None else None
            m1_bn = batchnorm_forward(
                DenseTensor(m1, check=False), blk.mlp_bn1, training=training, cache=bn1_cache
            ).data
            gelu_out = _gelu(m1_bn)
            m2 = linear_apply(gelu_out, blk.mlp_lin2)
            bn2_cache: dict | None = {} if cache is not None else None
            m2_bn = batchnorm_forward(
                DenseTensor(m2, check=False), blk.mlp_bn2, training=training, cache=bn2_cache
            ).data
            h_new = m2_bn + a
            if cache is not None:
                bc.update(
                    x_in=h, attn=attn_cache, a=a, bn1=bn1_cache, m1_bn=m1_bn,
                    gelu_out=gelu_out, bn2=bn2_cache,
                )
                block_caches.append(bc)
            h = h_new
        if cache is not None:
            cache["in_bn"] = in_bn_cache
            cache["x"] = x.data
            cache["blocks"] = block_caches
            cache["z_in"] = h
        return DenseTensor(linear_apply(h, self.classifier), check=False)

    def backward(self, dlogits: np.ndarray, cache: dict) -> None:
        dh = linear_backward(dlogits, cache["z_in"], self.classifier)
        for blk, bc in zip(reversed(self.blocks), reversed(cache["blocks"])):
            da = dh.copy()
            dm2_bn = dh
            dgelu_out = linear_backward(
                batchnorm_backward(dm2_bn, blk.mlp_bn2, bc["bn2"]), bc["gelu_out"], blk.mlp_lin2
            )
            dm1_bn = dgelu_out * _gelu_grad(bc["m1_bn"])
            da += linear_backward(
                batchnorm_backward(dm1_bn, blk.mlp_bn1, bc["bn1"]), bc["a"], blk.mlp_lin1
            )
            dh = da + vanilla_attend_backward(da, bc["attn"], blk.attn)
        dpre = batchnorm_backward(dh, self.in_bn, cache["in_bn"])
        linear_backward(dpre, cache["x"], self.in_proj)


# ---------------------------------------------------------------------------
# harness


@dataclass
class BenchRow:
    method: str
    n: int
    d: int
    t: int
    forward_ms: float
    train_step_ms: float
    mem_bytes: int
    adds: int
    muls: int
    spike_density: float
    oom: bool = False

    def csv(self) -> str:
        fwd = "OOM" if self.oom else f"{self.forward_ms:.3f}"
        trn = "OOM" if self.oom else f"{self.train_step_ms:.3f}"
        return (
            f"{self.method},{self.n},{self.d},{self.t},{fwd},{trn},"
            f"{self.mem_bytes},{self.adds},{self.muls},{self.spike_density:.4f}"
        )


class BenchReport:
    def __init__(self, rows: list[BenchRow] | None = None):
        self.rows: list[BenchRow] = rows or []

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(REPORT_HEADER + "\n")
            for row in self.rows:
                fh.write(row.csv() + "\n")

    def loglog_slope(self, method: str, column: str = "forward_ms") -> float:
        """Least-squares slope of log(time) against log(n) for one method."""
        pts = [(r.n, getattr(r, column)) for r in self.rows if r.method == method and not r.oom]
        if len(pts) < 2:
            raise ValueError(f"need at least two rows for {method!r}")
        xs = np.log([p[0] for p in pts])
        ys = np.log([p[1] for p in pts])
        return float(np.polyfit(xs, ys, 1)[0])


def _median_ms(fn, repeats: int) -> float:
    """Median wall time over `repeats` runs after warm-up, with the cyclic
    collector paused so its pauses do not land inside a timing.

    Warm-up repeats until two consecutive runs agree within 30% (at most
    five), which flushes allocator and cache cold-start effects."""
    prev = None
    for _ in range(5):
        t0 = time.perf_counter()
        fn()
        t = time.perf_counter() - t0
        if prev is not None and abs(t - prev) <= 0.3 * prev:
            break
        prev = t
    times = []
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
    finally:
        if was_enabled:
            gc.enable()
    return float(np.median(times))


_SGA_CHUNK = 2048


def _bench_sga(n: int, d: int, t_steps: int, seed: int):
    model = SpikeGraphTransformer(
        d_in=d, d=d, n_classes=_BENCH_CLASSES, t_steps=t_steps,
        n_blocks=1, n_gnn_layers=0, alpha=0.0, seed=seed,
    )

    def fwd(x):
        # inference runs the chunked full-graph path (linear memory keeps
        # the working set cache-resident at any n); identical logits
        return streaming_logits(model, x, None, chunk_size=_SGA_CHUNK)

    def train_step(x, y, adam, lr=1e-3):
        loss_and_grad(model, x, y, np.arange(x.shape[0]), "nll", None, None)
        adam_step(model.named_parameters(), adam, lr)

    return model, fwd, train_step


def _bench_vanilla(n: int, d: int, t_steps: int, seed: int):
    model = VanillaTransformer(d_in=d, d=d, n_classes=_BENCH_CLASSES, n_blocks=1, seed=seed)

    def fwd(x):
        return model.forward(x, training=False)

    def train_step(x, y, adam, lr=1e-3):
        model.zero_grad()
        cache: dict = {}
        logits = model.forward(x, training=True, cache=cache)
        _, dlogits = nll_loss(logits.data, y)
        model.backward(dlogits, cache)
        adam_step(model.named_parameters(), adam, lr)

    return model, fwd, train_step


_METHODS = {"sga": _bench_sga, "vanilla": _bench_vanilla}


def run_scaling(
    methods: list[str],
    n_list: list[int],
    d: int = 64,
    t_steps: int = 1,
    repeats: int = 5,
    seed: int = 0,
    mem_cap: int | None = None,
) -> BenchReport:
    """Forward and train-step timings across graph sizes, one row per
    (method, n). A method whose train step exceeds mem_cap live bytes is
    recorded as an OOM row instead of failing the sweep."""
    for m in methods:
        if m not in _METHODS:
            raise ValueError(f"unknown method {m!r}; know {sorted(_METHODS)}")
    if sorted(n_list) != list(n_list):
        raise ValueError("n_list must be ascending")
    memory.tune_allocator()
    report = BenchReport()
    acct = memory.default_accountant()
    # throwaway warm-up cell: exercises every code path once so the first
    # measured cell does not pay interpreter and allocator cold starts
    warm_rng = np.random.default_rng(seed)
    warm_x = DenseTensor(warm_rng.standard_normal((512, d)).astype(np.float32))
    warm_y = warm_rng.integers(0, _BENCH_CLASSES, size=512).astype(np.int64)
    for method in methods:
        _, wf, wt = _METHODS[method](512, d, t_steps, seed)
        wf(warm_x)
        wt(warm_x, warm_y, AdamState())
    for n in n_list:
        rng = np.random.default_rng(seed + n)
        x = DenseTensor(rng.standard_normal((n, d)).astype(np.float32))
        y = rng.integers(0, _BENCH_CLASSES, size=n).astype(np.int64)
        for method in methods:
            model, fwd, train_step = _METHODS[method](n, d, t_steps, seed)
            adam = AdamState()
            # memory probe: one training step under the cap
            acct.cap_bytes = mem_cap
            oom = False
            try:
                with memory.region(acct) as reg:
                    train_step(x, y, adam)
            except MemoryCapExceeded:
                oom = True
            finally:
                acct.cap_bytes = None
            mem_bytes = acct.peak_bytes - reg.baseline if not oom else (mem_cap or 0)
            if oom:
                report.rows.append(
                    BenchRow(method, n, d, t_steps, float("nan"), float("nan"),
                             mem_bytes, 0, 0, 0.0, oom=True)
                )
                continue
            counters = global_counters()
            counters.reset()
            fwd(x)
            adds, muls = counters.snapshot()
            density = 0.0
            if method == "sga":
                probe = sparsity_probe(model, x)
                density = float(np.mean(list(probe.values())))
            forward_ms = _median_ms(lambda: fwd(x), repeats)
            train_ms = _median_ms(lambda: train_step(x, y, adam), repeats)
            report.rows.append(
                BenchRow(method, n, d, t_steps, forward_ms, train_ms,
                         mem_bytes, adds, muls, density)
            )
    return report


def sparsity_probe(model: SpikeGraphTransformer, x: DenseTensor) -> dict[str, float]:
    """One instrumented forward pass; fraction of 1-bits per spike site."""
    cache: dict = {}
    encode(model, x, training=False, cache=cache)
    u_th = model.lif.u_th
    sites: dict[str, float] = {}
    sites["s0"] = float((cache["s0_trace"].data >= u_th).mean())
    for i, bc in enumerate(cache["blocks"]):
        qkv = bc["sga"]["qkv"]
        attn = bc["sga"]["attn"]
        sites[f"block{i}.s_in"] = float(qkv["s_float"].mean())
        sites[f"block{i}.q"] = float(attn["q_float"].mean())
        sites[f"block{i}.k"] = float(attn["k_float"].mean())
        sites[f"block{i}.v"] = float(attn["v_float"].mean())
        sites[f"block{i}.mask"] = float(attn["m_full"].mean())
        sites[f"block{i}.s_mid"] = float(bc["s_mid_float"].mean())
        sites[f"block{i}.s_mlp"] = float(bc["s_mlp_float"].mean())
        sites[f"block{i}.s_out"] = float((bc["out_trace"].data >= u_th).mean())
    return sites
