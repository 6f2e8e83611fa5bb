"""Dense and binary tensor types plus the kernels everything else builds on.

Values are float32 throughout. Spike tensors pack their bits 64 per uint64
word along the channel axis, so column-wise reductions are word-level
popcounts and the spike projection is a gather-and-add over weight rows,
with no multiplications on the spike path.

All public operations accumulate in a fixed order (ascending inner index
per output element), so results are bit-reproducible and identical across
the compiled and fallback kernel backends.
"""

from __future__ import annotations

import sys

import numpy as np

from . import _kernels, memory
from .counters import OpCounters, global_counters
from .errors import DegenerateBatchError, NonFiniteError, ShapeError

if sys.byteorder != "little":
    raise RuntimeError("spike bit packing assumes a little-endian platform")


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.base is not None:
        arr = arr.copy()
    return arr


def _as_float(data) -> np.ndarray:
    """float32 by default; float64 passes through for the relaxed oracle mode."""
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.base is not None:
        arr = arr.copy()
    return arr


class DenseTensor:
    """Real-valued tensor of up to 3 extents, row-major, finite by contract.

    Values are float32; float64 is preserved when given explicitly, which
    the gradient-checking (relaxed) mode uses to keep finite differences
    above rounding noise.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, check: bool = True):
        arr = _as_float(data)
        if arr.ndim < 1 or arr.ndim > 3:
            raise ShapeError(f"DenseTensor supports 1..3 extents, got shape {arr.shape}")
        if check and not np.isfinite(arr).all():
            raise NonFiniteError("DenseTensor contains NaN or Inf")
        memory.track(arr)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


def pack_bits(arr: np.ndarray) -> np.ndarray:
    """Pack a 0/1 array into uint64 words along the last axis, LSB first."""
    d = arr.shape[-1]
    n_words = (d + 63) // 64
    bits = np.ascontiguousarray(arr).astype(np.uint8)
    pad = n_words * 64 - d
    if pad:
        bits = np.concatenate(
            [bits, np.zeros(arr.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8")


def unpack_bits(words: np.ndarray, d: int) -> np.ndarray:
    """Inverse of pack_bits; returns float32 zeros and ones."""
    as_bytes = np.ascontiguousarray(words).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return np.ascontiguousarray(bits[..., :d]).astype(np.float32)


class SpikeTensor:
    """Binary tensor stored as packed uint64 words along the channel axis."""

    __slots__ = ("shape", "words", "__weakref__")

    def __init__(self, words: np.ndarray, shape: tuple[int, ...]):
        if words.dtype != np.uint64:
            raise ShapeError("SpikeTensor words must be uint64")
        expected = shape[:-1] + ((shape[-1] + 63) // 64,)
        if words.shape != expected:
            raise ShapeError(f"words shape {words.shape} does not match logical {shape}")
        words = np.ascontiguousarray(words)
        memory.track(words)
        self.words = words
        self.shape = tuple(shape)

    @classmethod
    def from_dense(cls, data, validate: bool = True) -> "SpikeTensor":
        arr = data.data if isinstance(data, DenseTensor) else np.asarray(data, dtype=np.float32)
        if arr.ndim < 1 or arr.ndim > 3:
            raise ShapeError(f"SpikeTensor supports 1..3 extents, got shape {arr.shape}")
        if validate and not ((arr == 0.0) | (arr == 1.0)).all():
            raise ShapeError("spike values must be exactly 0 or 1")
        return cls(pack_bits(arr), arr.shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nbytes(self) -> int:
        return int(self.words.nbytes)

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.words, self.shape[-1])

    def to_dense(self) -> DenseTensor:
        return DenseTensor(self.unpack(), check=False)

    def count(self) -> int:
        """Number of set bits."""
        return int(np.bitwise_count(self.words).sum())

    def density(self) -> float:
        total = int(np.prod(self.shape))
        return self.count() / total if total else 0.0

    def __repr__(self) -> str:
        return f"SpikeTensor(shape={self.shape}, density={self.density():.4f})"


class LinearLayer:
    """Affine map with weight [d_in, d_out] and optional bias [d_out]."""

    def __init__(self, weight, bias=None):
        self.weight = _as_f32(weight)
        if self.weight.ndim != 2:
            raise ShapeError("weight must be 2-D")
        if not np.isfinite(self.weight).all():
            raise NonFiniteError("weight contains NaN or Inf")
        self.bias = None if bias is None else _as_f32(bias)
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias extent must match d_out")
        self.gw = np.zeros_like(self.weight)
        self.gb = None if self.bias is None else np.zeros_like(self.bias)

    @classmethod
    def glorot(cls, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-limit, limit, size=(d_in, d_out)).astype(np.float32)
        b = np.zeros(d_out, dtype=np.float32) if bias else None
        return cls(w, b)

    def zero_grad(self) -> None:
        self.gw[...] = 0.0
        if self.gb is not None:
            self.gb[...] = 0.0


class BatchNormLayer:
    """Per-channel batch normalization state."""

    def __init__(self, d: int, eps: float = 1e-5, momentum: float = 0.1):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must be in (0,1)")
        self.gamma = np.ones(d, dtype=np.float32)
        self.beta = np.zeros(d, dtype=np.float32)
        self.running_mean = np.zeros(d, dtype=np.float32)
        self.running_var = np.ones(d, dtype=np.float32)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def zero_grad(self) -> None:
        self.ggamma[...] = 0.0
        self.gbeta[...] = 0.0


# ---------------------------------------------------------------------------
# operations


def matmul(a: DenseTensor, b: DenseTensor, counters: OpCounters | None = None) -> DenseTensor:
    """Matrix product with row-major, left-to-right accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    m, k = a.shape
    k2, p = b.shape
    if k != k2:
        raise ShapeError(f"inner extents differ: {k} vs {k2}")
    out = _kernels.matmul_f32(a.data, b.data)
    c = counters or global_counters()
    c.muls += m * k * p
    c.adds += m * k * p
    return DenseTensor(out)


def _mm(a: np.ndarray, b: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    """Raw-array matmul for internal layer code; same kernel and counting.

    float64 operands (relaxed mode) go through numpy instead of the
    float32 kernel.
    """
    m, k = a.shape
    p = b.shape[1]
    c = counters or global_counters()
    c.muls += m * k * p
    c.adds += m * k * p
    if a.dtype == np.float64 or b.dtype == np.float64:
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return _kernels.matmul_f32(np.ascontiguousarray(a), np.ascontiguousarray(b))


def spike_linear(
    s: SpikeTensor, layer: LinearLayer, counters: OpCounters | None = None
) -> DenseTensor:
    """Project spikes through a linear layer by gathering and adding weight rows.

    Exactly equal to matmul on the unpacked 0/1 matrix; performs no
    multiplications. Bumps the addition counter by
    set_bits * d_out (+ rows * d_out when a bias is added).
    """
    d_in, d_out = layer.weight.shape
    if s.shape[-1] != d_in:
        raise ShapeError(f"channel extent {s.shape[-1]} does not match weight d_in {d_in}")
    lead = s.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    words2 = s.words.reshape(rows, -1)
    out, bits = _kernels.spike_linear_f32(words2, d_in, layer.weight)
    c = counters or global_counters()
    c.adds += bits * d_out
    if layer.bias is not None:
        out += layer.bias
        c.adds += rows * d_out
    return DenseTensor(out.reshape(lead + (d_out,)))


def batchnorm_forward(
    x: DenseTensor,
    layer: BatchNormLayer,
    training: bool = False,
    cache: dict | None = None,
) -> DenseTensor:
    """Normalize per channel; batch axis is every axis except the last.

    Training mode uses batch statistics and updates the running estimates;
    inference mode applies the running estimates.
    """
    arr = x.data
    d = arr.shape[-1]
    if layer.gamma.shape[0] != d:
        raise ShapeError(f"channel extent {d} does not match layer width {layer.gamma.shape[0]}")
    flat = arr.reshape(-1, d)
    b = flat.shape[0]
    if training:
        if b < 2:
            raise DegenerateBatchError(f"training-mode batch norm needs batch >= 2, got {b}")
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        xhat = (flat - mu) * inv_std
        m = layer.momentum
        layer.running_mean[...] = (1.0 - m) * layer.running_mean + m * mu
        unbiased = var * (b / (b - 1.0))
        layer.running_var[...] = (1.0 - m) * layer.running_var + m * unbiased
    else:
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        if cache is None:
            # fused inference path: out = x*scale + shift, two passes
            scale = layer.gamma * inv_std
            shift = layer.beta - layer.running_mean * scale
            out = flat * scale
            out += shift
            return DenseTensor(out.reshape(arr.shape).astype(arr.dtype, copy=False))
        xhat = (flat - layer.running_mean) * inv_std
    out = layer.gamma * xhat + layer.beta
    if cache is not None:
        cache["xhat"] = xhat
        cache["inv_std"] = inv_std
        cache["training"] = training
    return DenseTensor(out.reshape(arr.shape).astype(arr.dtype, copy=False))


def batchnorm_backward(dy: np.ndarray, layer: BatchNormLayer, cache: dict) -> np.ndarray:
    """Gradient through batchnorm_forward; accumulates ggamma/gbeta."""
    d = dy.shape[-1]
    dflat = dy.reshape(-1, d)
    xhat = cache["xhat"]
    inv_std = cache["inv_std"]
    layer.ggamma += (dflat * xhat).sum(axis=0)
    layer.gbeta += dflat.sum(axis=0)
    if cache["training"]:
        g = layer.gamma * inv_std
        dx = g * (dflat - dflat.mean(axis=0) - xhat * (dflat * xhat).mean(axis=0))
    else:
        dx = dflat * (layer.gamma * inv_std)
    return dx.reshape(dy.shape).astype(dy.dtype, copy=False)


def colwise_sum(x, counters: OpCounters | None = None) -> DenseTensor:
    """Sum over the node axis of a [T, N, D] tensor, keeping a unit axis.

    For spike input this is pure popcounting (additions only).
    """
    c = counters or global_counters()
    if isinstance(x, SpikeTensor):
        if x.ndim != 3:
            raise ShapeError("colwise_sum expects [T, N, D]")
        counts = _kernels.colwise_popcount(x.words, x.shape[-1])
        c.adds += int(counts.sum())
        return DenseTensor(counts.astype(np.float32)[:, None, :])
    if x.ndim != 3:
        raise ShapeError("colwise_sum expects [T, N, D]")
    t, n, d = x.shape
    c.adds += t * n * d
    return DenseTensor(x.data.sum(axis=1, keepdims=True))


def _broadcastable(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    """Equal shapes, or broadcast along the node axis only (1 vs N)."""
    if sa == sb:
        return True
    if len(sa) != len(sb) or len(sa) < 2:
        return False
    if sa[:-2] != sb[:-2] or sa[-1] != sb[-1]:
        return False
    return sa[-2] == 1 or sb[-2] == 1


def elementwise(a, b, op: str):
    """Elementwise add/mul/mask with node-axis broadcasting.

    mask multiplies a dense tensor by spikes, implemented as a select
    (no multiply). mask of two spike tensors is a packed AND.
    """
    if op == "mask":
        if isinstance(a, SpikeTensor) and isinstance(b, SpikeTensor):
            if not _broadcastable(a.shape, b.shape):
                raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
            wa, wb = a.words, b.words
            if a.shape[-2] == 1 and b.shape[-2] != 1:
                wa = np.broadcast_to(wa, wb.shape)
            elif b.shape[-2] == 1 and a.shape[-2] != 1:
                wb = np.broadcast_to(wb, wa.shape)
            out_shape = a.shape if a.shape[-2] != 1 else b.shape
            return SpikeTensor(np.bitwise_and(wa, wb), out_shape)
        if not (isinstance(a, DenseTensor) and isinstance(b, SpikeTensor)):
            raise ShapeError("mask expects (dense, spikes) or (spikes, spikes)")
        if not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
        keep = unpack_bits(b.words, b.shape[-1]) != 0.0
        out = np.where(keep, a.data, np.float32(0.0))
        return DenseTensor(np.ascontiguousarray(out))
    da = a.to_dense() if isinstance(a, SpikeTensor) else a
    db = b.to_dense() if isinstance(b, SpikeTensor) else b
    if not _broadcastable(da.shape, db.shape):
        raise ShapeError(f"incompatible shapes {da.shape} and {db.shape}")
    if op == "add":
        return DenseTensor(da.data + db.data)
    if op == "mul":
        return DenseTensor(da.data * db.data)
    raise ValueError(f"unknown op {op!r}")


def linear_apply(
    x: np.ndarray, layer: LinearLayer, counters: OpCounters | None = None
) -> np.ndarray:
    """Dense affine map on raw arrays; folds leading axes."""
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    out = _mm(flat, layer.weight, counters)
    if layer.bias is not None:
        out += layer.bias
    return out.reshape(lead + (layer.weight.shape[1],))


def linear_backward(
    dy: np.ndarray, x: np.ndarray, layer: LinearLayer, counters: OpCounters | None = None
) -> np.ndarray:
    """Backward of linear_apply; accumulates gw/gb, returns dx."""
    d_in, d_out = layer.weight.shape
    dflat = dy.reshape(-1, d_out)
    xflat = x.reshape(-1, d_in)
    layer.gw += _mm(np.ascontiguousarray(xflat.T), dflat, counters)
    if layer.gb is not None:
        layer.gb += dflat.sum(axis=0)
    dx = _mm(dflat, np.ascontiguousarray(layer.weight.T), counters)
    return dx.reshape(x.shape)
