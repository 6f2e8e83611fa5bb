"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is bit-compatible.
Set SPIKEGT_KERNELS=fallback (or =compiled) before import to force one.
"""

from __future__ import annotations

import os

from . import _fallback

_choice = os.environ.get("SPIKEGT_KERNELS", "auto")
if _choice not in ("auto", "compiled", "fallback"):
    raise ValueError(f"SPIKEGT_KERNELS must be auto|compiled|fallback, got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _impl
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = None
if _impl is None:
    _impl = _fallback

BACKEND = "fallback" if _impl is _fallback else "compiled"

matmul_f32 = _impl.matmul_f32
spike_linear_f32 = _impl.spike_linear_f32
colwise_popcount = _impl.colwise_popcount
and_colwise_popcount = _impl.and_colwise_popcount
spmm_csr_f32 = _impl.spmm_csr_f32


def backend_name() -> str:
    return BACKEND
