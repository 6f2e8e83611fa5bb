"""Arithmetic-operation counters for the energy proxy.

Counts cover the attention cores and the projection paths: spike-form
projections and attention reductions bump `adds` only, while the dense
baseline's matrix products bump `muls` (one fused multiply-add is counted
as one multiplication plus one addition). Per-neuron state updates
(batch norm, membrane dynamics) are outside the counted scope.

Counting is single-threaded; parallel workers should keep private
counters and merge them.
"""

from __future__ import annotations


class OpCounters:
    __slots__ = ("adds", "muls")

    def __init__(self) -> None:
        self.adds = 0
        self.muls = 0

    def reset(self) -> None:
        self.adds = 0
        self.muls = 0

    def merge(self, other: "OpCounters") -> None:
        self.adds += other.adds
        self.muls += other.muls

    def snapshot(self) -> tuple[int, int]:
        return self.adds, self.muls


_GLOBAL = OpCounters()


def global_counters() -> OpCounters:
    return _GLOBAL
