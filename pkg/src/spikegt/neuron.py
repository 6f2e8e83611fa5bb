"""Leaky integrate-and-fire layer with a surrogate-gradient backward pass.

Forward dynamics per time step, elementwise over [N, D]:

    U[t] = H[t-1] + X[t]
    S[t] = step(U[t] - u_th)            (1 if U >= u_th else 0)
    H[t] = v_reset * S[t] + beta * U[t] * (1 - S[t]),   H[-1] = v_reset

The backward pass replaces the step function's derivative with a
rectangular window of width `surrogate_width` around the threshold and
differentiates the recurrence exactly. In relaxed mode the step is
replaced by its piecewise-linear integral (a ramp from 0 to 1 across the
window), which makes the same backward formulas the exact gradient; the
finite-difference tests rely on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import DenseTensor, SpikeTensor


@dataclass(frozen=True)
class LifParams:
    u_th: float = 1.0
    v_reset: float = 0.0
    beta: float = 0.5
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must be in (0,1)")
        if not self.u_th > self.v_reset:
            raise ValueError("u_th must exceed v_reset")
        if not self.surrogate_width > 0.0:
            raise ValueError("surrogate_width must be positive")


def _fire(u: np.ndarray, p: LifParams, relaxed: bool) -> np.ndarray:
    if relaxed:
        return np.clip((u - p.u_th) / p.surrogate_width + 0.5, 0.0, 1.0).astype(
            u.dtype, copy=False
        )
    return (u >= p.u_th).astype(np.float32)


def surrogate_grad(u: np.ndarray, p: LifParams) -> np.ndarray:
    """Rectangular window: 1/a inside |u - u_th| < a/2, else 0."""
    a = p.surrogate_width
    inside = np.abs(u - p.u_th) < (a / 2.0)
    return inside.astype(u.dtype) / u.dtype.type(a)


def lif_forward(
    x: DenseTensor, p: LifParams, relaxed: bool = False, want_trace: bool = True
) -> tuple[SpikeTensor | DenseTensor, DenseTensor | None]:
    """Run the membrane dynamics over the leading time axis of [T, N, D].

    Returns (spikes, membrane_trace). The trace stores U[t] and is what the
    backward pass consumes; inference callers pass want_trace=False to skip
    it. State starts at v_reset and never leaks across calls. In relaxed
    mode the spike output is a DenseTensor of soft values.
    """
    arr = x.data
    if arr.ndim != 3:
        raise ShapeError("lif_forward expects [T, N, D]")
    if not np.isfinite(arr).all():
        raise NonFiniteError("lif_forward input contains NaN or Inf")
    t_steps = arr.shape[0]
    u_trace = np.empty_like(arr) if want_trace else None
    s_out = np.empty_like(arr)
    dt = arr.dtype.type
    h = np.full(arr.shape[1:], dt(p.v_reset), dtype=arr.dtype)
    scratch = np.empty_like(h)
    u_buf = None if want_trace else np.empty_like(h)
    fired = np.empty(arr.shape[1:], dtype=bool)
    for t in range(t_steps):
        u = u_trace[t] if want_trace else u_buf
        np.add(h, arr[t], out=u)
        s = s_out[t]
        if relaxed:
            # same arithmetic as _fire: clip((u - u_th)/a + 0.5, 0, 1)
            np.subtract(u, dt(p.u_th), out=s)
            np.divide(s, dt(p.surrogate_width), out=s)
            np.add(s, dt(0.5), out=s)
            np.clip(s, 0.0, 1.0, out=s)
        else:
            np.greater_equal(u, dt(p.u_th), out=fired)
            np.copyto(s, fired, casting="unsafe")
        # h = v_reset*s + (beta*u)*(1-s), in place
        np.multiply(u, dt(p.beta), out=scratch)
        np.subtract(dt(1.0), s, out=h)
        np.multiply(scratch, h, out=h)
        if p.v_reset != 0.0:
            np.multiply(s, dt(p.v_reset), out=scratch)
            np.add(h, scratch, out=h)
    trace = DenseTensor(u_trace, check=False) if want_trace else None
    if relaxed:
        return DenseTensor(s_out, check=False), trace
    return SpikeTensor.from_dense(s_out, validate=False), trace


def lif_backward(
    grad_out: np.ndarray | DenseTensor,
    membrane_trace: DenseTensor,
    p: LifParams,
    relaxed: bool = False,
) -> np.ndarray:
    """Backpropagate through time; returns dLoss/dX as a raw float32 array.

    `grad_out` is the gradient with respect to the spike outputs. The final
    H carries no loss by construction (nothing downstream reads it).
    """
    g = grad_out.data if isinstance(grad_out, DenseTensor) else np.asarray(grad_out)
    u = membrane_trace.data
    if g.shape != u.shape:
        raise ShapeError(f"grad shape {g.shape} does not match trace {u.shape}")
    t_steps = u.shape[0]
    beta = u.dtype.type(p.beta)
    v_reset = u.dtype.type(p.v_reset)
    dx = np.empty_like(u)
    gh = np.zeros(u.shape[1:], dtype=u.dtype)
    for t in range(t_steps - 1, -1, -1):
        ut = u[t]
        s = _fire(ut, p, relaxed)
        sur = surrogate_grad(ut, p)
        # dH/dU = beta*(1-S) + (v_reset - beta*U) * dS/dU
        du = g[t] * sur + gh * (beta * (1.0 - s) + (v_reset - beta * ut) * sur)
        dx[t] = du
        gh = du  # dL/dH[t-1] equals dL/dU[t]
    return dx


def repeat_time(x: DenseTensor, t_steps: int) -> DenseTensor:
    """Stack T identical copies of [N, D] into [T, N, D]."""
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    if x.ndim != 2:
        raise ShapeError("repeat_time expects [N, D]")
    out = np.ascontiguousarray(np.broadcast_to(x.data, (t_steps,) + x.shape))
    return DenseTensor(out, check=False)
