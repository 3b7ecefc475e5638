
import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from bracket_restore.core import ShapeError
from bracket_restore.objective import (
    PSNR_CAP,
    TonemapParams,
    count_negative,
    mu_tonemap,
    mu_tonemap_inverse,
    psnr_tonemapped,
    ssim,
    ssim_tonemapped,
    tonemapped_l1,
)
from gradcheck_util import fd_grad, rel_err


def tonemap_oracle(x, mu=5000):
    mpmath.mp.dps = 40
    return float(mpmath.log(1 + mu * mpmath.mpf(x)) / mpmath.log(1 + mpmath.mpf(mu)))


def test_tonemap_fixed_points():
    assert mu_tonemap(np.array(0.0)) == 0
    assert mu_tonemap(np.array(1.0)) == pytest.approx(1.0, abs=1e-15)
    assert mu_tonemap(torch.tensor(1.0, dtype=torch.float64)).item() == pytest.approx(1.0, abs=1e-15)


def test_tonemap_at_point_one():
    expected = tonemap_oracle("0.1")
    assert abs(expected - 0.72988) < 1e-5
    assert abs(float(mu_tonemap(np.array(0.1))) - expected) < 1e-12
    assert abs(mu_tonemap(torch.tensor(0.1, dtype=torch.float64)).item() - expected) < 1e-12


def test_tonemap_clamps_negative():
    x = np.array([-1.0, -0.5, 0.2])
    assert count_negative(x) == 2
    out = mu_tonemap(x)
    assert out[0] == 0 and out[1] == 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(1e-6, 100))
def test_tonemap_strictly_monotone(x, dx):
    assert mu_tonemap(np.array(x + dx)) > mu_tonemap(np.array(x))


def test_tonemap_inverse():
    x = np.linspace(0, 20, 50)
    assert np.allclose(mu_tonemap_inverse(mu_tonemap(x)), x, atol=1e-9)


def test_mu_must_be_positive():
    with pytest.raises(ValueError):
        TonemapParams(0)


def test_loss_zero_on_equal_and_unit_on_extremes():
    gt = torch.rand(4, 5, 5)
    assert tonemapped_l1(gt, gt).item() == 0
    loss = tonemapped_l1(torch.ones(4, 5, 5, dtype=torch.float64), torch.zeros(4, 5, 5, dtype=torch.float64))
    assert loss.item() == pytest.approx(1.0, abs=1e-15)


def test_loss_symmetric_numpy_and_torch_agree():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 4, 6, 6)) * 3
    assert tonemapped_l1(a, b) == pytest.approx(tonemapped_l1(b, a))
    assert tonemapped_l1(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(tonemapped_l1(a, b), rel=1e-12)


def test_loss_gradient_fd():
    g = torch.Generator().manual_seed(3)
    pred = (torch.rand(4, 4, 4, generator=g, dtype=torch.float64) + 0.05).requires_grad_(True)
    gt = torch.rand(4, 4, 4, generator=g, dtype=torch.float64) + 0.05

    def loss():
        return tonemapped_l1(pred, gt)

    loss().backward()
    with torch.no_grad():
        assert rel_err(pred.grad, fd_grad(loss, pred, eps=1e-7)) < 1e-3


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        tonemapped_l1(torch.zeros(4, 2, 2), torch.zeros(4, 2, 3))


def _pair_with_tonemapped_gap(gap, shape=(4, 16, 16), seed=0):
    t = np.random.default_rng(seed).uniform(0, 0.85, shape)
    return mu_tonemap_inverse(t + gap), mu_tonemap_inverse(t)


def test_psnr_values():
    assert psnr_tonemapped(np.ones((4, 3, 3)), np.ones((4, 3, 3))) == PSNR_CAP
    pred, gt = _pair_with_tonemapped_gap(0.1)
    assert abs(psnr_tonemapped(pred, gt) - 20.0) < 1e-6
    pred, gt = _pair_with_tonemapped_gap(0.01)
    assert abs(psnr_tonemapped(pred, gt) - 40.0) < 1e-6


def test_psnr_matches_skimage():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b = rng.random((2, 4, 20, 20)) * 2
        ref = peak_signal_noise_ratio(mu_tonemap(b), mu_tonemap(a), data_range=1.0)
        assert abs(psnr_tonemapped(a, b) - ref) < 1e-6


def test_ssim_matches_skimage():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.random((2, 4, 24, 24))
        ref = np.mean([
            structural_similarity(a[c], b[c], data_range=1.0, gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False)
            for c in range(4)
        ])
        assert abs(ssim(a, b) - ref) < 1e-4


def test_ssim_self_is_one():
    a = np.random.default_rng(3).random((4, 16, 16)) * 4
    assert ssim_tonemapped(a, a) == 1.0


def test_ssim_inverted_binary_is_low():
    rng = np.random.default_rng(4)
    gt = (rng.random((16, 16)) > 0.5).astype(float)
    value = ssim_tonemapped(1 - gt, gt)
    ref = structural_similarity(1 - gt, gt, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert value < 0.2
    assert abs(value - ref) < 1e-4


def test_ssim_constant_closed_form():
    a_val, b_val = 0.3, 0.7
    c1 = 0.01**2
    expected = (2 * a_val * b_val + c1) / (a_val**2 + b_val**2 + c1)
    got = ssim(np.full((12, 12), a_val), np.full((12, 12), b_val))
    assert abs(got - expected) < 1e-12


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
