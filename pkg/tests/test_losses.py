"""Loss formulas against hand-computed values, plus metric identities."""

import math

import numpy as np
import pytest

from qatie.errors import ShapeError
from qatie.losses import (LossWeights, PsnrConfig, cosine_loss, compute_losses,
                          outlier_loss, psnr, psnr_loss, psnr_value, rmse, ssim,
                          total_loss)
from qatie.tensor import Tape, Tensor, backward
from conftest import rand_tensor


def t(values, shape):
    return Tensor(np.asarray(values, dtype=np.float32).reshape(shape))


class TestRmse:
    def test_zero_for_equal(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4))
        assert rmse(x, x).item() == 0.0

    def test_constant_offset(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4), 0, 0.5)
        y = Tensor(x.data + 0.1)
        assert abs(rmse(y, x).item() - 0.1) < 1e-6

    def test_hand_value(self):
        pred = t([0.0, 1.0], (1, 1, 1, 2))
        target = t([1.0, 1.0], (1, 1, 1, 2))
        assert abs(rmse(pred, target).item() - math.sqrt(0.5)) < 1e-7

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            rmse(rand_tensor(rng, (1, 1, 2, 2)), rand_tensor(rng, (1, 1, 2, 3)))


class TestPsnr:
    def test_rmse_point_one_gives_20db(self):
        pred = t([0.1, 0.1], (1, 1, 1, 2))
        target = t([0.0, 0.0], (1, 1, 1, 2))
        assert abs(psnr(pred, target).item() - 20.0) < 1e-5

    def test_rmse_point_01_gives_40db(self):
        pred = t([0.01], (1, 1, 1, 1))
        target = t([0.0], (1, 1, 1, 1))
        assert abs(psnr(pred, target).item() - 40.0) < 1e-4

    def test_identical_capped_at_160db(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4), 0, 1)
        assert abs(psnr(x, x).item() - 160.0) < 1e-4

    def test_symmetric(self, rng):
        a = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        b = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        assert abs(psnr_value(a, b) - psnr_value(b, a)) < 1e-6


class TestPsnrLoss:
    def test_20db_gives_0_3(self):
        pred = t([0.1, 0.1], (1, 1, 1, 2))
        target = t([0.0, 0.0], (1, 1, 1, 2))
        assert abs(psnr_loss(pred, target).item() - 0.3) < 1e-6

    def test_50db_is_zero_baseline(self):
        # rmse for exactly 50 dB: 10^(-50/20)
        r = 10 ** (-2.5)
        pred = t([r], (1, 1, 1, 1))
        target = t([0.0], (1, 1, 1, 1))
        assert abs(psnr_loss(pred, target).item()) < 1e-6

    def test_past_baseline_goes_negative(self):
        r = 10 ** (-3.0)  # 60 dB
        pred = t([r], (1, 1, 1, 1))
        target = t([0.0], (1, 1, 1, 1))
        assert abs(psnr_loss(pred, target).item() - (-0.1)) < 1e-6

    def test_strictly_decreasing_in_quality(self, rng):
        target = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        losses = []
        for noise in (0.2, 0.1, 0.05, 0.01):
            pred = Tensor(np.clip(target.data + noise, 0, 1))
            losses.append(psnr_loss(pred, target).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))


class TestCosineLoss:
    def test_equal_is_zero(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4), 0.1, 1)
        assert abs(cosine_loss(x, x).item()) < 1e-6

    def test_scale_invariant(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4), 0.1, 1)
        y = Tensor(2.0 * x.data)
        assert abs(cosine_loss(y, x).item()) < 1e-6

    def test_orthogonal_is_one(self):
        a = t([1.0, 0.0], (1, 1, 1, 2))
        b = t([0.0, 1.0], (1, 1, 1, 2))
        assert abs(cosine_loss(a, b).item() - 1.0) < 1e-6

    def test_zero_vector_guarded(self, rng):
        z = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        x = rand_tensor(rng, (1, 1, 2, 2), 0.1, 1)
        assert abs(cosine_loss(z, x).item() - 1.0) < 1e-5


class TestOutlierLoss:
    def test_equal_is_zero(self, rng):
        x = rand_tensor(rng, (1, 3, 4, 4))
        assert outlier_loss(x, x).item() == 0.0

    def test_uniform_error_unweighted(self, rng):
        # dyadic values keep the error field exactly uniform in float32,
        # so sigma is exactly zero and every weight is exp(0) = 1
        x = Tensor((rng.integers(0, 128, size=(1, 3, 4, 4)) / 256.0).astype(np.float32))
        y = Tensor(x.data + np.float32(0.0625))
        assert abs(outlier_loss(y, x).item() - 0.0625) < 1e-7

    def test_outlier_downweighted(self):
        # hand computation on e = (0.01, 0.01, 0.01, 1.0)
        e = np.array([0.01, 0.01, 0.01, 1.0])
        pred = t(e, (1, 1, 1, 4))
        target = t([0.0] * 4, (1, 1, 1, 4))
        mu, sigma = e.mean(), e.std()
        w_big = math.exp(-(1.0 - mu) / (sigma + 1e-8))
        expected = (0.01 * 3 + w_big * 1.0) / 4
        got = outlier_loss(pred, target).item()
        assert abs(got - expected) < 1e-6
        assert got < e.mean()  # strictly below plain MAE

    def test_never_exceeds_mae(self, rng):
        for _ in range(5):
            a = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
            b = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
            mae = np.abs(a.data - b.data).mean()
            assert outlier_loss(a, b).item() <= mae + 1e-7


class TestTotalLoss:
    def test_weighted_sum_arithmetic(self, rng):
        pred = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        target = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        parts = compute_losses(pred, target, LossWeights(2.0, 1.0, 1.0))
        expected = (2.0 * parts["psnr"].item() + parts["cosine"].item()
                    + parts["outlier"].item())
        assert abs(parts["total"].item() - expected) < 1e-6

    def test_component_example(self):
        # components (0.3, 0.1, 0.05) with weights (2,1,1) -> 0.75
        assert abs(2.0 * 0.3 + 1.0 * 0.1 + 1.0 * 0.05 - 0.75) < 1e-12

    def test_gamma_zero_removes_outlier(self, rng):
        pred = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        target = rand_tensor(rng, (1, 3, 8, 8), 0, 1)
        w0 = total_loss(pred, target, LossWeights(2.0, 1.0, 0.0)).item()
        parts = compute_losses(pred, target, LossWeights(2.0, 1.0, 1.0))
        assert abs(w0 - (parts["total"].item() - parts["outlier"].item())) < 1e-6

    def test_gradient_matches_finite_differences(self, rng):
        from qatie.losses import outlier_weights

        pred = rand_tensor(rng, (1, 3, 8, 8), 0.1, 0.9, dtype=np.float64,
                           requires_grad=True)
        target = rand_tensor(rng, (1, 3, 8, 8), 0.1, 0.9, dtype=np.float64)
        # keep |pred - target| away from the abs() kink
        close = np.abs(pred.data - target.data) < 1e-3
        target.data[close] += 0.01
        w0 = outlier_weights(pred, target)

        tape = Tape()
        backward(tape, total_loss(pred, target, tape=tape, frozen_outlier_weights=w0))
        analytic = pred.grad.copy()

        h = 1e-6
        flat = pred.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = total_loss(pred, target, frozen_outlier_weights=w0).item()
            flat[i] = orig - h
            lm = total_loss(pred, target, frozen_outlier_weights=w0).item()
            flat[i] = orig
            fd[i] = (lp - lm) / (2 * h)
        rel = np.abs(analytic.reshape(-1) - fd).max() / np.abs(fd).max()
        assert rel < 1e-3


class TestSsim:
    def test_identical_images(self, rng):
        x = rand_tensor(rng, (1, 3, 16, 16), 0, 1)
        assert abs(ssim(x, x) - 1.0) < 1e-6

    def test_symmetry(self, rng):
        a = rand_tensor(rng, (1, 1, 16, 16), 0, 1)
        b = rand_tensor(rng, (1, 1, 16, 16), 0, 1)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-6

    def test_anticorrelated_negative(self, rng):
        binary = (rng.uniform(size=(1, 1, 16, 16)) < 0.5).astype(np.float32)
        a = Tensor(binary)
        b = Tensor(1.0 - binary)
        assert ssim(a, b) < 0.0

    def test_constant_images_closed_form(self):
        a = Tensor(np.full((1, 1, 12, 12), 0.5, dtype=np.float32))
        b = Tensor(np.full((1, 1, 12, 12), 0.6, dtype=np.float32))
        c1 = 1e-4
        expected = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
        assert abs(ssim(a, b) - expected) < 1e-4

    def test_too_small_rejected(self, rng):
        with pytest.raises(ShapeError, match="window"):
            ssim(rand_tensor(rng, (1, 1, 8, 8)), rand_tensor(rng, (1, 1, 8, 8)))
