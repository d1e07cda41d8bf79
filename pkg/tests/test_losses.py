import math

import numpy as np
import pytest
import torch

from conftest import finite_diff_grad, max_relative_error
from treenet.errors import ShapeMismatchError
from treenet.losses import (boundary_weights, composite_loss, euclidean_loss,
                            weighted_bce, weighted_iou_loss)


def rand(shape, seed=0, lo=0.05, hi=0.95, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.uniform(lo, hi, size=shape), dtype=dtype)


class TestEuclidean:
    def test_zero_at_equality(self):
        x = rand((1, 4, 4))
        assert float(euclidean_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = rand((2, 5, 5), seed=1, lo=0.1, hi=0.8)
        assert float(euclidean_loss(x + 0.1, x)) == pytest.approx(0.01, rel=1e-9)

    def test_symmetric(self):
        a, b = rand((1, 6, 6), seed=2), rand((1, 6, 6), seed=3)
        assert float(euclidean_loss(a, b)) == float(euclidean_loss(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            euclidean_loss(torch.zeros(1, 4, 4), torch.zeros(1, 5, 5))


class TestBoundaryWeights:
    def test_constant_zero_gives_ones(self):
        w = boundary_weights(torch.zeros(1, 40, 40))
        assert torch.equal(w, torch.ones(1, 40, 40))

    def test_constant_one_gives_ones(self):
        w = boundary_weights(torch.ones(1, 40, 40))
        assert torch.allclose(w, torch.ones(1, 40, 40), atol=1e-6)

    def test_single_pixel_center_value(self):
        gt = torch.zeros(1, 33, 33)
        gt[0, 16, 16] = 1.0
        w = boundary_weights(gt, kernel=31, amplification=5.0)
        expected = 1.0 + 5.0 * (1.0 - 1.0 / 961.0)
        assert float(w[0, 16, 16]) == pytest.approx(expected, rel=1e-6)

    def test_weights_at_least_one(self):
        rng = np.random.default_rng(4)
        gt = torch.tensor((rng.random((1, 25, 25)) > 0.5).astype(np.float32))
        w = boundary_weights(gt)
        assert float(w.min()) >= 1.0

    def test_batched_matches_single(self):
        gt = torch.tensor(
            (np.random.default_rng(5).random((2, 1, 20, 20)) > 0.5).astype(np.float32))
        w = boundary_weights(gt)
        assert torch.allclose(w[0], boundary_weights(gt[0]))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            boundary_weights(torch.zeros(1, 8, 8), kernel=4)


class TestWeightedBCE:
    def test_perfect_binary_prediction(self):
        t = torch.tensor((np.random.default_rng(0).random((1, 8, 8)) > 0.5)
                         .astype(np.float64))
        w = torch.ones_like(t)
        assert float(weighted_bce(t, t, w)) < 1e-5

    def test_half_prediction_is_ln2(self):
        t = torch.tensor((np.random.default_rng(1).random((1, 10, 10)) > 0.3)
                         .astype(np.float64))
        p = torch.full_like(t, 0.5)
        w = torch.ones_like(t)
        assert float(weighted_bce(p, t, w)) == pytest.approx(math.log(2), rel=1e-9)

    def test_soft_targets_accepted(self):
        t = rand((1, 6, 6), seed=2)
        p = rand((1, 6, 6), seed=3)
        w = 1.0 + rand((1, 6, 6), seed=4)
        loss = float(weighted_bce(p, t, w))
        assert math.isfinite(loss) and loss >= 0.0

    def test_extreme_predictions_stay_finite(self):
        t = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=torch.float64)
        p = torch.tensor([[[1.0, 0.0], [1.0, 0.0]]], dtype=torch.float64)
        assert math.isfinite(float(weighted_bce(p, t, torch.ones_like(t))))

    def test_gradient_matches_finite_differences(self):
        p = rand((1, 4, 4), seed=5).requires_grad_(True)
        t = rand((1, 4, 4), seed=6)
        w = 1.0 + 4.0 * rand((1, 4, 4), seed=7)
        weighted_bce(p, t, w).backward()
        x = p.detach().clone()
        numeric = finite_diff_grad(lambda: weighted_bce(x, t, w), x)
        assert max_relative_error(p.grad, numeric) < 1e-3


class TestWeightedIoU:
    def test_zero_at_all_ones(self):
        t = torch.ones(1, 8, 8, dtype=torch.float64)
        assert float(weighted_iou_loss(t, t, torch.ones_like(t))) < 1e-6

    def test_complement_near_one(self):
        t = torch.tensor((np.random.default_rng(2).random((1, 10, 10)) > 0.5)
                         .astype(np.float64))
        p = 1.0 - t
        loss = float(weighted_iou_loss(p, t, torch.ones_like(t)))
        assert loss >= 0.9

    def test_monotone_along_interpolation(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            t = torch.tensor((rng.random((1, 12, 12)) > 0.5).astype(np.float64))
            p0 = torch.tensor(rng.uniform(0, 1, size=(1, 12, 12)))
            w = torch.tensor(1.0 + 4.0 * rng.random((1, 12, 12)))
            losses = [float(weighted_iou_loss((1 - a) * p0 + a * t, t, w))
                      for a in np.linspace(0, 1, 11)]
            assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_in_unit_interval(self):
        p, t = rand((1, 6, 6), seed=8), rand((1, 6, 6), seed=9)
        w = 1.0 + rand((1, 6, 6), seed=10)
        loss = float(weighted_iou_loss(p, t, w))
        assert 0.0 <= loss <= 1.0

    def test_gradient_matches_finite_differences(self):
        p = rand((1, 4, 4), seed=11).requires_grad_(True)
        t = rand((1, 4, 4), seed=12)
        w = 1.0 + 4.0 * rand((1, 4, 4), seed=13)
        weighted_iou_loss(p, t, w).backward()
        x = p.detach().clone()
        numeric = finite_diff_grad(lambda: weighted_iou_loss(x, t, w), x)
        assert max_relative_error(p.grad, numeric) < 1e-3


class TestComposite:
    def test_is_sum_of_parts(self):
        p, t = rand((1, 5, 5), seed=14), rand((1, 5, 5), seed=15)
        w = 1.0 + rand((1, 5, 5), seed=16)
        loss = composite_loss(p, t, w)
        expected = float(weighted_iou_loss(p, t, w)) + float(weighted_bce(p, t, w))
        assert float(loss.total) == pytest.approx(expected, rel=1e-12)

    def test_near_zero_on_perfect_binary(self):
        t = torch.tensor((np.random.default_rng(4).random((1, 16, 16)) > 0.5)
                         .astype(np.float64))
        w = boundary_weights(t)
        assert float(composite_loss(t, t, w).total) < 1e-4

    def test_finite_on_domain_extremes(self):
        t = torch.tensor([[[0.0, 1.0], [0.5, 1.0]]], dtype=torch.float64)
        p = torch.tensor([[[0.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
        assert math.isfinite(float(composite_loss(p, t, torch.ones_like(t)).total))


def test_euclidean_gradient_matches_finite_differences():
    p = rand((1, 4, 4), seed=17).requires_grad_(True)
    t = rand((1, 4, 4), seed=18)
    euclidean_loss(p, t).backward()
    x = p.detach().clone()
    numeric = finite_diff_grad(lambda: euclidean_loss(x, t), x)
    assert max_relative_error(p.grad, numeric) < 1e-3
