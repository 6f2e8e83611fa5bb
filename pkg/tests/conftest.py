import os

import numpy as np
import pytest

from spikegt.neuron import LifParams

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny3_dir():
    return os.path.join(FIXTURES, "tiny3")


def random_spikes(rng, shape, density=0.3):
    return (rng.random(shape) < density).astype(np.float32)


def sga_attend_oracle(q, k, v, p: LifParams, heads: int) -> np.ndarray:
    """Explicit-loop reference for the column-sum-mask attention.

    Per head: sum K AND V over nodes and channels of the head, run the
    scalar threshold-neuron recurrence over time, and mask Q with the
    resulting binary scalar.
    """
    t_steps, n, d = q.shape
    group = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        mem = p.v_reset
        for t in range(t_steps):
            c = 0.0
            for i in range(h * group, (h + 1) * group):
                for node in range(n):
                    c += k[t, node, i] * v[t, node, i]
            u = mem + c
            fired = 1.0 if u >= p.u_th else 0.0
            mem = p.v_reset * fired + p.beta * u * (1.0 - fired)
            for i in range(h * group, (h + 1) * group):
                for node in range(n):
                    out[t, node, i] = q[t, node, i] * fired
    return out
