import numpy as np
import pytest

from spikegt.errors import NonFiniteError, ShapeError
from spikegt.neuron import LifParams, lif_backward, lif_forward, repeat_time
from spikegt.tensor import DenseTensor, SpikeTensor


def scalar_lif_oracle(xs, p):
    """Step-by-step scalar iteration of the membrane recurrence."""
    h = p.v_reset
    us, ss, hs = [], [], []
    for x in xs:
        u = h + x
        s = 1.0 if u >= p.u_th else 0.0
        h = p.v_reset * s + p.beta * u * (1.0 - s)
        us.append(u)
        ss.append(s)
        hs.append(h)
    return us, ss, hs


class TestLifParams:
    def test_beta_bounds(self):
        with pytest.raises(ValueError):
            LifParams(beta=1.0)

    def test_threshold_above_reset(self):
        with pytest.raises(ValueError):
            LifParams(u_th=0.0, v_reset=0.0)


class TestLifForward:
    def test_silent_neuron(self):
        x = DenseTensor(np.zeros((4, 2, 3), np.float32))
        s, trace = lif_forward(x, LifParams(u_th=1.0, v_reset=0.0))
        assert s.count() == 0
        assert np.array_equal(trace.data, np.zeros((4, 2, 3)))

    def test_suprathreshold_step(self):
        p = LifParams(u_th=1.0, v_reset=0.0)
        x = DenseTensor(np.full((1, 3, 2), 2.0, np.float32))
        s, _ = lif_forward(x, p)
        assert np.array_equal(s.unpack(), np.ones((1, 3, 2)))

    def test_hand_iterated_trace(self):
        p = LifParams(u_th=1.0, v_reset=0.0, beta=0.5)
        x = DenseTensor(np.array([0.6, 0.6, 0.6], np.float32).reshape(3, 1, 1))
        s, trace = lif_forward(x, p)
        assert np.allclose(trace.data.ravel(), [0.6, 0.9, 1.05], atol=1e-6)
        assert list(s.unpack().ravel()) == [0.0, 0.0, 1.0]

    def test_matches_scalar_oracle(self, rng):
        p = LifParams(u_th=1.0, v_reset=-0.25, beta=0.7)
        xs = rng.uniform(-0.5, 1.5, 7)
        us, ss, _ = scalar_lif_oracle(xs, p)
        s, trace = lif_forward(DenseTensor(xs.reshape(7, 1, 1).astype(np.float32)), p)
        assert np.allclose(trace.data.ravel(), us, atol=1e-5)
        assert np.array_equal(s.unpack().ravel(), ss)

    def test_outputs_binary_for_any_input(self, rng):
        x = DenseTensor(rng.normal(0, 3, (3, 8, 5)).astype(np.float32))
        s, _ = lif_forward(x, LifParams())
        assert isinstance(s, SpikeTensor)
        u = s.unpack()
        assert np.isin(u, (0.0, 1.0)).all()

    def test_monotone_at_t1(self, rng):
        p = LifParams()
        x = rng.normal(0.8, 0.5, (1, 6, 4)).astype(np.float32)
        base, _ = lif_forward(DenseTensor(x), p)
        base_bits = base.unpack()
        for _ in range(20):
            i = tuple(rng.integers(0, s) for s in x.shape)
            bumped = x.copy()
            bumped[i] += float(rng.uniform(0, 2))
            out, _ = lif_forward(DenseTensor(bumped), p)
            assert (out.unpack() >= base_bits).all()

    def test_saturation_invariant(self, rng):
        p = LifParams(u_th=1.0, v_reset=0.0, beta=0.5)
        x = rng.uniform(1.0, 3.0, (5, 4, 3)).astype(np.float32)
        s, trace = lif_forward(DenseTensor(x), p)
        assert s.count() == x.size
        # with every step firing, the carried state is v_reset, so U[t] = x[t]
        assert np.allclose(trace.data, x, atol=1e-6)

    def test_rejects_nonfinite(self):
        arr = np.zeros((1, 2, 2), np.float32)
        t = DenseTensor(arr)
        t.data[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            lif_forward(t, LifParams())

    def test_want_trace_false(self):
        s, trace = lif_forward(DenseTensor(np.zeros((2, 2, 2), np.float32)), LifParams(), want_trace=False)
        assert trace is None
        assert s.count() == 0


class TestLifBackward:
    def test_zero_grad_gives_zero(self, rng):
        p = LifParams()
        x = DenseTensor(rng.standard_normal((3, 2, 2)).astype(np.float32))
        _, trace = lif_forward(x, p)
        dx = lif_backward(np.zeros((3, 2, 2), np.float32), trace, p)
        assert np.array_equal(dx, np.zeros((3, 2, 2)))

    def test_dead_zone_outside_window(self):
        p = LifParams(u_th=1.0, v_reset=0.0, beta=0.5, surrogate_width=1.0)
        x = DenseTensor(np.full((1, 1, 1), -5.0, np.float32))
        _, trace = lif_forward(x, p)
        dx = lif_backward(np.ones((1, 1, 1), np.float32), trace, p)
        assert dx[0, 0, 0] == 0.0

    def test_shape_mismatch(self, rng):
        p = LifParams()
        _, trace = lif_forward(DenseTensor(np.zeros((2, 2, 2), np.float32)), p)
        with pytest.raises(ShapeError):
            lif_backward(np.zeros((2, 2, 3), np.float32), trace, p)

    def test_finite_differences_t2_scalar(self, rng):
        p = LifParams()
        for trial in range(20):
            x = rng.uniform(0.2, 1.6, (2, 1, 1))
            g = rng.standard_normal((2, 1, 1))

            def loss(arr):
                s, _ = lif_forward(DenseTensor(arr), p, relaxed=True)
                return float((s.data * g).sum())

            _, trace = lif_forward(DenseTensor(x), p, relaxed=True)
            ana = lif_backward(g, trace, p, relaxed=True)
            h = 1e-5
            for idx in np.ndindex(x.shape):
                xp = x.copy()
                xp[idx] += h
                xm = x.copy()
                xm[idx] -= h
                num = (loss(xp) - loss(xm)) / (2 * h)
                assert abs(ana[idx] - num) <= 1e-3 * max(1.0, abs(num)), (trial, idx)

    def test_grad_check_relaxed_network(self, rng):
        """Analytic grads of the relaxed forward match finite differences on
        at least 95% of coordinates of a random [T,N,D] instance."""
        p = LifParams(beta=0.6)
        x = rng.uniform(0.0, 2.0, (3, 4, 3))
        g = rng.standard_normal((3, 4, 3))

        def loss(arr):
            s, _ = lif_forward(DenseTensor(arr), p, relaxed=True)
            return float((s.data * g).sum())

        _, trace = lif_forward(DenseTensor(x), p, relaxed=True)
        ana = lif_backward(g, trace, p, relaxed=True)
        h = 1e-5
        ok = 0
        total = 0
        for idx in np.ndindex(x.shape):
            xp = x.copy()
            xp[idx] += h
            xm = x.copy()
            xm[idx] -= h
            num = (loss(xp) - loss(xm)) / (2 * h)
            total += 1
            rel = abs(ana[idx] - num) / max(1e-4, abs(ana[idx]) + abs(num))
            ok += rel < 1e-3
        assert ok / total >= 0.95


class TestRepeatTime:
    def test_t1_adds_axis(self, rng):
        x = DenseTensor(rng.standard_normal((3, 2)).astype(np.float32))
        out = repeat_time(x, 1)
        assert out.shape == (1, 3, 2)
        assert np.array_equal(out.data[0], x.data)

    def test_slices_identical(self, rng):
        x = DenseTensor(rng.standard_normal((4, 3)).astype(np.float32))
        out = repeat_time(x, 3)
        for t in range(3):
            assert np.array_equal(out.data[t], x.data)

    def test_rejects_t0(self):
        with pytest.raises(ValueError):
            repeat_time(DenseTensor(np.zeros((2, 2))), 0)
