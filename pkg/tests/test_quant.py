"""Quantization primitive laws: parameter derivation, rounding, round trips,
fake-quant projection with straight-through gradients, fixed-point multipliers."""

import numpy as np
import pytest

from qatie.errors import ConfigError
from qatie.quant import (Observer, QuantParams, RequantMultiplier, dequantize,
                         fake_quant, fixedpoint_mul, qparams_from_minmax,
                         qparams_per_channel_symmetric, quantize, round_half_away)
from qatie.tensor import Tape, Tensor, backward
import qatie.functional as F


class TestRounding:
    def test_half_away_from_zero(self):
        x = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.4, -0.4, 127.5])
        np.testing.assert_array_equal(round_half_away(x),
                                      [1.0, 2.0, 3.0, -1.0, -2.0, 0.0, -0.0, 128.0])


class TestQparams:
    def test_symmetric_unit_range(self):
        qp = qparams_from_minmax(-1.0, 1.0, signed=True, symmetric=True)
        assert abs(float(qp.scale) - 1.0 / 127.0) < 1e-15
        assert int(qp.zero_point) == 0
        assert (qp.qmin, qp.qmax) == (-127, 127)

    def test_affine_01(self):
        qp = qparams_from_minmax(0.0, 1.0, signed=False, symmetric=False)
        assert abs(float(qp.scale) - 1.0 / 255.0) < 1e-15
        assert int(qp.zero_point) == 0
        assert (qp.qmin, qp.qmax) == (0, 255)

    def test_affine_symmetric_range_rounds_away(self):
        qp = qparams_from_minmax(-1.0, 1.0, signed=False, symmetric=False)
        assert abs(float(qp.scale) - 2.0 / 255.0) < 1e-15
        assert int(qp.zero_point) == 128  # round(127.5) away from zero

    def test_range_widened_to_include_zero(self):
        qp = qparams_from_minmax(0.5, 1.0, signed=False, symmetric=False)
        assert abs(float(qp.scale) - 1.0 / 255.0) < 1e-15
        assert int(qp.zero_point) == 0

    def test_degenerate_range_floor(self):
        qp = qparams_from_minmax(0.0, 0.0, signed=False, symmetric=False)
        assert float(qp.scale) == 1e-8

    def test_per_channel(self, rng):
        w = rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32)
        qp = qparams_per_channel_symmetric(w, axis=0)
        assert qp.scale.shape == (4,)
        for c in range(4):
            assert abs(qp.scale[c] - np.abs(w[c]).max() / 127.0) < 1e-9


class TestQuantizeDequantize:
    def test_zero_round_trip(self):
        qp = qparams_from_minmax(-1, 1, signed=False, symmetric=False)
        q = quantize(np.zeros((1, 1, 1, 1), np.float32), qp)
        assert q.values[0, 0, 0, 0] == 128
        assert dequantize(q)[0, 0, 0, 0] == 0.0

    def test_clamping(self):
        qp = qparams_from_minmax(0, 1, signed=False, symmetric=False)
        q = quantize(np.array([[[[1.0, 2.0]]]], np.float32), qp)
        np.testing.assert_array_equal(q.values.ravel(), [255, 255])

    def test_rounding_example(self):
        qp = QuantParams(scale=np.float64(0.1), zero_point=np.int32(0), signed=True)
        q = quantize(np.array([[[[0.34]]]], np.float32), qp)
        assert q.values[0, 0, 0, 0] == 3
        assert abs(dequantize(q)[0, 0, 0, 0] - 0.3) < 1e-7

    def test_lattice_exact_round_trip(self, rng):
        qp = qparams_from_minmax(-0.7, 1.3, signed=False, symmetric=False)
        ints = rng.integers(0, 256, size=(1, 2, 4, 4))
        from qatie.quant import IntTensor
        x = dequantize(IntTensor(ints.astype(np.uint8), qp))
        q2 = quantize(x, qp)
        np.testing.assert_array_equal(q2.values, ints)

    def test_per_channel_error_bound(self, rng):
        w = rng.uniform(-0.8, 0.8, (6, 4, 3, 3)).astype(np.float32)
        qp = qparams_per_channel_symmetric(w)
        err = np.abs(dequantize(quantize(w, qp)) - w)
        bound = (qp.scale / 2.0).reshape(-1, 1, 1, 1) + 1e-9
        assert np.all(err <= bound)


class TestFakeQuant:
    def _qp(self):
        return qparams_from_minmax(-1.0, 1.0, signed=False, symmetric=False)

    def test_idempotent_bit_exact(self, rng):
        qp = self._qp()
        x = Tensor(rng.uniform(-1.5, 1.5, (1, 1, 10, 10)).astype(np.float32))
        y1 = fake_quant(x, qp)
        y2 = fake_quant(y1, qp)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_projection_error_bound(self, rng):
        qp = self._qp()
        x = Tensor(rng.uniform(-1.0, 0.996, (1, 1, 10, 10)).astype(np.float32))
        y = fake_quant(x, qp)
        assert np.abs(y.data - x.data).max() <= float(qp.scale) / 2 + 1e-7

    def test_ste_mask_matches_clamp_mask(self, rng):
        qp = self._qp()
        x = Tensor(rng.uniform(-3, 3, (1, 1, 100, 100)).astype(np.float32),
                   requires_grad=True)
        tape = Tape()
        backward(tape, F.sum_all(fake_quant(x, qp, tape), tape))
        scale, zp = float(qp.scale), int(qp.zero_point)
        q_unclamped = round_half_away(x.data.astype(np.float64) / scale) + zp
        in_range = (q_unclamped >= 0) & (q_unclamped <= 255)
        np.testing.assert_array_equal(x.grad, in_range.astype(np.float32))

    def test_gradient_flows_only_in_range(self):
        qp = self._qp()
        x = Tensor(np.array([-2.0, 0.0, 0.5, 2.0], np.float32).reshape(1, 1, 1, 4),
                   requires_grad=True)
        tape = Tape()
        backward(tape, F.sum_all(fake_quant(x, qp, tape), tape))
        np.testing.assert_array_equal(x.grad.ravel(), [0.0, 1.0, 1.0, 0.0])

    def test_widened_params_refine_limit(self, rng):
        x = Tensor(rng.uniform(-0.9, 0.9, (1, 1, 8, 8)).astype(np.float32))
        qp = self._qp()
        err8 = np.abs(fake_quant(x, qp).data - x.data).max()
        err16 = np.abs(fake_quant(x, qp.widened(8)).data - x.data).max()
        assert err16 < err8 / 64  # 256x finer lattice


class TestObserver:
    def test_first_update_adopts_batch(self):
        obs = Observer(0.9)
        obs.update(np.array([-1.0, 2.0], np.float32))
        assert (obs.running_min, obs.running_max) == (-1.0, 2.0)

    def test_moving_average_step(self):
        obs = Observer(0.9)
        obs.update(np.array([0.0, 1.0], np.float32))
        obs.update(np.array([0.0, 2.0], np.float32))
        assert abs(obs.running_max - 1.1) < 1e-6
        assert obs.running_min == 0.0

    def test_constant_stream_fixed_point(self):
        obs = Observer(0.9)
        for _ in range(200):
            obs.update(np.array([0.25, 0.75], np.float32))
        assert abs(obs.running_min - 0.25) < 1e-6
        assert abs(obs.running_max - 0.75) < 1e-6

    def test_exact_recurrence(self, rng):
        obs = Observer(0.99)
        lo, hi = np.float32(0.0), np.float32(0.0)
        first = True
        for _ in range(20):
            batch = rng.uniform(-2, 2, size=16).astype(np.float32)
            obs.update(batch)
            bmin, bmax = np.float32(batch.min()), np.float32(batch.max())
            if first:
                lo, hi, first = bmin, bmax, False
            else:
                m = np.float32(0.99)
                lo = np.float32(m * lo + (np.float32(1) - m) * bmin)
                hi = np.float32(m * hi + (np.float32(1) - m) * bmax)
            assert obs.running_min == lo and obs.running_max == hi

    def test_uninitialized_rejected(self):
        with pytest.raises(ConfigError, match="statistics"):
            Observer(0.9).qparams()

    def test_state_round_trip(self):
        obs = Observer(0.95)
        obs.update(np.array([-0.5, 0.5], np.float32))
        obs2 = Observer.from_state(obs.state())
        assert obs2.running_min == obs.running_min
        assert obs2.running_max == obs.running_max
        assert obs2.momentum == obs.momentum
        assert obs2.initialized


class TestRequantMultiplier:
    def test_accuracy_bound(self, rng):
        for m in rng.uniform(1e-6, 0.9, size=200):
            rq = RequantMultiplier.from_real(m)
            assert abs(float(rq.real()) - m) / m < 2 ** -29

    def test_mantissa_normalized(self, rng):
        for m in (1e-5, 0.3, 0.9999, 2.5):
            rq = RequantMultiplier.from_real(m)
            assert 2 ** 30 <= int(rq.m0) < 2 ** 31

    def test_gains_above_one_supported(self):
        rq = RequantMultiplier.from_real(4.0)
        assert abs(float(rq.real()) - 4.0) < 1e-8
        v = np.array([3, -7], dtype=np.int64)
        np.testing.assert_array_equal(fixedpoint_mul(v, rq), [12, -28])

    def test_fixedpoint_mul_rounds_half_away(self):
        rq = RequantMultiplier.from_real(0.5)
        v = np.array([1, 3, -1, -3], dtype=np.int64)
        np.testing.assert_array_equal(fixedpoint_mul(v, rq), [1, 2, -1, -2])

    def test_fixedpoint_mul_matches_float_reference(self, rng):
        for _ in range(20):
            m = float(rng.uniform(1e-4, 0.99))
            rq = RequantMultiplier.from_real(m)
            acc = rng.integers(-(2 ** 24), 2 ** 24, size=1000)
            got = fixedpoint_mul(acc, rq)
            want = round_half_away(acc * float(rq.real()))
            # identical real multiplier, so at most boundary ties can differ
            assert np.abs(got - want).max() <= 1

    def test_rejects_nonpositive(self):
        with pytest.raises(ConfigError):
            RequantMultiplier.from_real(0.0)
