import numpy as np
import pytest

from spikegt.counters import OpCounters
from spikegt.errors import DegenerateBatchError, NonFiniteError, ShapeError
from spikegt.tensor import (
    BatchNormLayer,
    DenseTensor,
    LinearLayer,
    SpikeTensor,
    batchnorm_forward,
    colwise_sum,
    elementwise,
    linear_apply,
    matmul,
    spike_linear,
)

from conftest import random_spikes


class TestDenseTensor:
    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            DenseTensor(np.array([1.0, np.nan]))

    def test_rejects_inf(self):
        with pytest.raises(NonFiniteError):
            DenseTensor(np.array([np.inf, 1.0]))

    def test_rejects_bad_rank(self):
        with pytest.raises(ShapeError):
            DenseTensor(np.zeros((2, 2, 2, 2)))

    def test_float32_by_default(self):
        assert DenseTensor([[1, 2]]).data.dtype == np.float32

    def test_float64_preserved_for_relaxed_mode(self):
        assert DenseTensor(np.zeros((2, 2), np.float64)).data.dtype == np.float64


class TestSpikeTensor:
    @pytest.mark.parametrize("shape", [(5,), (3, 7), (2, 4, 6), (1, 3, 64), (2, 2, 130)])
    def test_pack_unpack_round_trip(self, rng, shape):
        bits = random_spikes(rng, shape, 0.5)
        st = SpikeTensor.from_dense(bits)
        assert np.array_equal(st.unpack(), bits)

    def test_rejects_non_binary(self):
        with pytest.raises(ShapeError):
            SpikeTensor.from_dense(np.array([0.0, 0.5, 1.0]))

    def test_count_and_density(self, rng):
        bits = random_spikes(rng, (2, 5, 9), 0.4)
        st = SpikeTensor.from_dense(bits)
        assert st.count() == int(bits.sum())
        assert st.density() == pytest.approx(bits.mean())


class TestMatmul:
    def test_identity(self):
        out = matmul(DenseTensor([[1, 0], [0, 1]]), DenseTensor([[3, 4], [5, 6]]))
        assert np.array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_case_1x2_2x1(self):
        out = matmul(DenseTensor([[1, 2]]), DenseTensor([[3], [4]]))
        assert np.array_equal(out.data, [[11]])

    def test_matches_triple_loop_oracle_exactly(self, rng):
        a = rng.standard_normal((7, 5)).astype(np.float32)
        b = rng.standard_normal((5, 3)).astype(np.float32)
        ref = np.zeros((7, 3), dtype=np.float32)
        for i in range(7):
            for j in range(3):
                acc = np.float32(0.0)
                for k in range(5):
                    acc += a[i, k] * b[k, j]
                ref[i, j] = acc
        assert np.array_equal(matmul(DenseTensor(a), DenseTensor(b)).data, ref)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(DenseTensor(np.zeros((2, 3))), DenseTensor(np.zeros((4, 2))))

    def test_associativity_within_tolerance(self, rng):
        a = DenseTensor(rng.uniform(-1, 1, (6, 5)).astype(np.float32))
        b = DenseTensor(rng.uniform(-1, 1, (5, 7)).astype(np.float32))
        c = DenseTensor(rng.uniform(-1, 1, (7, 4)).astype(np.float32))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        assert np.allclose(left, right, rtol=1e-4, atol=1e-5)

    def test_counts_multiplications(self):
        counters = OpCounters()
        matmul(DenseTensor(np.ones((3, 4))), DenseTensor(np.ones((4, 5))), counters)
        assert counters.muls == 3 * 4 * 5


class TestSpikeLinear:
    def test_zero_spikes_give_bias(self, rng):
        layer = LinearLayer(rng.standard_normal((6, 4)).astype(np.float32), np.arange(4.0))
        s = SpikeTensor.from_dense(np.zeros((2, 3, 6), np.float32))
        out = spike_linear(s, layer)
        assert np.array_equal(out.data, np.broadcast_to(np.arange(4.0, dtype=np.float32), (2, 3, 4)))

    def test_one_hot_selects_weight_row(self, rng):
        w = rng.standard_normal((6, 4)).astype(np.float32)
        bias = rng.standard_normal(4).astype(np.float32)
        layer = LinearLayer(w, bias)
        bits = np.zeros((1, 1, 6), np.float32)
        bits[0, 0, 3] = 1.0
        out = spike_linear(SpikeTensor.from_dense(bits), layer)
        assert np.array_equal(out.data[0, 0], w[3] + bias)

    def test_equals_dense_matmul_exactly(self, rng):
        w = rng.standard_normal((6, 5)).astype(np.float32)
        bias = rng.standard_normal(5).astype(np.float32)
        layer = LinearLayer(w, bias)
        bits = random_spikes(rng, (2, 4, 6), 0.5)
        out = spike_linear(SpikeTensor.from_dense(bits), layer)
        ref = bits.reshape(-1, 6) @ w + bias
        assert np.array_equal(out.data.reshape(-1, 5), ref.astype(np.float32))

    def test_property_equals_matmul_100_cases(self, rng):
        for _ in range(100):
            t = int(rng.integers(1, 4))
            n = int(rng.integers(1, 8))
            d_in = int(rng.integers(1, 80))
            d_out = int(rng.integers(1, 12))
            w = rng.standard_normal((d_in, d_out)).astype(np.float32)
            layer = LinearLayer(w, None)
            bits = random_spikes(rng, (t, n, d_in), float(rng.uniform(0, 1)))
            out = spike_linear(SpikeTensor.from_dense(bits), layer)
            ref = (bits.reshape(-1, d_in) @ w).astype(np.float32)
            assert np.array_equal(out.data.reshape(-1, d_out), ref)

    def test_addition_counter_formula(self, rng):
        w = rng.standard_normal((9, 5)).astype(np.float32)
        bias = np.zeros(5, np.float32)
        bits = random_spikes(rng, (2, 3, 9), 0.5)
        counters = OpCounters()
        spike_linear(SpikeTensor.from_dense(bits), LinearLayer(w, bias), counters)
        expected = int(bits.sum()) * 5 + 2 * 3 * 5
        assert counters.adds == expected
        counters = OpCounters()
        spike_linear(SpikeTensor.from_dense(bits), LinearLayer(w, None), counters)
        assert counters.adds == int(bits.sum()) * 5

    def test_channel_mismatch(self, rng):
        layer = LinearLayer(np.zeros((4, 4), np.float32))
        with pytest.raises(ShapeError):
            spike_linear(SpikeTensor.from_dense(np.zeros((1, 2, 6), np.float32)), layer)


class TestBatchNorm:
    def test_inference_centering_gives_zeros(self):
        layer = BatchNormLayer(3, eps=0.0)
        layer.running_mean[...] = [2.0, -1.0, 0.5]
        x = DenseTensor(np.tile([2.0, -1.0, 0.5], (4, 1)))
        out = batchnorm_forward(x, layer, training=False)
        assert np.array_equal(out.data, np.zeros((4, 3), np.float32))

    def test_zero_gamma_gives_beta(self, rng):
        layer = BatchNormLayer(3)
        layer.gamma[...] = 0.0
        layer.beta[...] = [1.0, 2.0, 3.0]
        out = batchnorm_forward(DenseTensor(rng.standard_normal((5, 3))), layer, training=True)
        assert np.allclose(out.data, np.tile([1.0, 2.0, 3.0], (5, 1)))

    def test_training_stats_match_two_pass_oracle(self, rng):
        x = rng.standard_normal((8, 3)).astype(np.float32)
        layer = BatchNormLayer(3)
        out = batchnorm_forward(DenseTensor(x), layer, training=True).data
        mu = x.mean(axis=0)
        var = ((x - mu) ** 2).mean(axis=0)
        ref = (x - mu) / np.sqrt(var + layer.eps)
        assert np.allclose(out, ref, atol=1e-5)
        assert np.abs(out.mean(axis=0)).max() < 1e-5
        assert np.abs(out.var(axis=0) - 1.0).max() < 1e-3

    def test_training_updates_running_stats(self, rng):
        x = rng.standard_normal((16, 2)).astype(np.float32) + 3.0
        layer = BatchNormLayer(2, momentum=0.5)
        batchnorm_forward(DenseTensor(x), layer, training=True)
        assert np.allclose(layer.running_mean, 0.5 * x.mean(axis=0), atol=1e-5)

    def test_degenerate_batch_error(self):
        with pytest.raises(DegenerateBatchError):
            batchnorm_forward(DenseTensor(np.ones((1, 3))), BatchNormLayer(3), training=True)

    def test_folds_time_axis(self, rng):
        x = rng.standard_normal((2, 4, 3)).astype(np.float32)
        layer = BatchNormLayer(3)
        out = batchnorm_forward(DenseTensor(x), layer, training=True).data
        flat = out.reshape(-1, 3)
        assert np.abs(flat.mean(axis=0)).max() < 1e-5


class TestColwiseSum:
    def test_all_ones(self):
        s = SpikeTensor.from_dense(np.ones((1, 4, 2), np.float32))
        assert np.array_equal(colwise_sum(s).data, [[[4.0, 4.0]]])

    def test_all_zeros(self):
        s = SpikeTensor.from_dense(np.zeros((2, 3, 5), np.float32))
        assert np.array_equal(colwise_sum(s).data, np.zeros((2, 1, 5)))

    def test_matches_unpack_then_sum(self, rng):
        bits = random_spikes(rng, (3, 5, 4), 0.5)
        out = colwise_sum(SpikeTensor.from_dense(bits))
        assert np.array_equal(out.data, bits.sum(axis=1, keepdims=True))

    def test_dense_input(self, rng):
        x = rng.standard_normal((3, 5, 4)).astype(np.float32)
        out = colwise_sum(DenseTensor(x))
        assert np.allclose(out.data, x.sum(axis=1, keepdims=True), atol=1e-5)


class TestElementwise:
    def test_mask_all_ones_is_identity(self, rng):
        x = DenseTensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
        ones = SpikeTensor.from_dense(np.ones((2, 3, 4), np.float32))
        assert np.array_equal(elementwise(x, ones, "mask").data, x.data)

    def test_mask_all_zeros(self, rng):
        x = DenseTensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
        zeros = SpikeTensor.from_dense(np.zeros((2, 3, 4), np.float32))
        assert np.array_equal(elementwise(x, zeros, "mask").data, np.zeros((2, 3, 4)))

    def test_add_commutes(self, rng):
        a = DenseTensor(rng.standard_normal((3, 4)).astype(np.float32))
        b = DenseTensor(rng.standard_normal((3, 4)).astype(np.float32))
        assert np.array_equal(elementwise(a, b, "add").data, elementwise(b, a, "add").data)

    def test_node_axis_broadcast(self, rng):
        x = DenseTensor(rng.standard_normal((2, 5, 3)).astype(np.float32))
        row = DenseTensor(rng.standard_normal((2, 1, 3)).astype(np.float32))
        out = elementwise(x, row, "mul")
        assert out.shape == (2, 5, 3)
        assert np.array_equal(out.data, x.data * row.data)

    def test_rejects_general_broadcast(self):
        a = DenseTensor(np.zeros((2, 5, 3)))
        b = DenseTensor(np.zeros((2, 5, 1)))
        with pytest.raises(ShapeError):
            elementwise(a, b, "add")

    def test_spike_spike_mask_is_and(self, rng):
        a = random_spikes(rng, (1, 6, 70), 0.5)
        b = random_spikes(rng, (1, 1, 70), 0.5)
        out = elementwise(SpikeTensor.from_dense(a), SpikeTensor.from_dense(b), "mask")
        assert isinstance(out, SpikeTensor)
        assert np.array_equal(out.unpack(), a * b)


class TestLinearLayer:
    def test_one_hot_returns_weight_row(self, rng):
        w = rng.standard_normal((5, 3)).astype(np.float32)
        bias = rng.standard_normal(3).astype(np.float32)
        layer = LinearLayer(w, bias)
        one_hot = np.zeros((1, 5), np.float32)
        one_hot[0, 2] = 1.0
        assert np.allclose(linear_apply(one_hot, layer)[0], w[2] + bias, atol=1e-6)

    def test_rejects_nonfinite_weight(self):
        with pytest.raises(NonFiniteError):
            LinearLayer(np.array([[np.nan]], dtype=np.float32))
