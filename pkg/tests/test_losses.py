import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dehaze.losses import (
    ADVERSARIAL_WEIGHT,
    SsimConfig,
    adversarial_losses,
    d_total,
    mse_loss,
    rf_content,
    rf_total,
    ssim_loss,
    ssim_map,
    tp_total,
)
from dehaze.numerics import relative_error
from oracles import numeric_grad, ssim_sliding_window


def test_mse_value_and_gradient():
    p = np.array([[[[0.2, 0.4]]]])
    t = np.array([[[[0.0, 0.0]]]])
    value, grad = mse_loss(p, t)
    assert value == pytest.approx(0.1)
    np.testing.assert_allclose(grad, [[[[0.2, 0.4]]]])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_ssim_map_matches_sliding_window(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(2, 1, 2, 15, 18))
    ref = np.stack([ssim_sliding_window(x[0, c], y[0, c]) for c in range(2)])
    np.testing.assert_allclose(ssim_map(x, y)[0], ref, atol=1e-12)


def test_ssim_identity_symmetry_and_constant_value():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(2, 1, 3, 16, 16))
    np.testing.assert_allclose(ssim_map(x, x), 1.0, atol=1e-12)
    np.testing.assert_allclose(ssim_map(x, y), ssim_map(y, x), atol=1e-12)
    zero, one = np.zeros((1, 1, 13, 13)), np.ones((1, 1, 13, 13))
    # luminance term only: C1 / (1 + C1)
    np.testing.assert_allclose(ssim_map(zero, one), 0.02 / 1.02)


def test_ssim_loss_gradient():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(2, 2, 2, 14, 15))
    value, grad = ssim_loss(x, y)
    assert value == pytest.approx(1 - ssim_map(x, y).mean())
    num = numeric_grad(lambda v: ssim_loss(v, y)[0], x.copy(), h=1e-6)
    assert relative_error(grad, num).max() < 1e-4


def test_ssim_config_variants():
    assert SsimConfig(constants="k_params", c1=0.01).C1 == pytest.approx(1e-4)
    classical = SsimConfig.classical()
    assert classical.patch_size == 11 and classical.window == "gaussian"
    x = np.random.default_rng(2).uniform(size=(1, 1, 12, 12))
    np.testing.assert_allclose(ssim_map(x, x, classical), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        ssim_map(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        SsimConfig(patch_size=12)


def test_adversarial_values_and_gradients():
    d_real = np.array([0.9, 0.6, 0.7])
    d_fake = np.array([0.2, 0.4, 0.1])
    d_loss, g_loss, grads = adversarial_losses(d_real, d_fake)
    assert d_loss == pytest.approx(-np.mean(np.log(d_real)) - np.mean(np.log(1 - d_fake)))
    assert g_loss == pytest.approx(-np.mean(np.log(d_fake)))
    num = numeric_grad(lambda v: adversarial_losses(d_real, v)[0], d_fake.copy())
    np.testing.assert_allclose(grads["d_fake"], num, rtol=1e-6)
    num = numeric_grad(lambda v: adversarial_losses(v, d_fake)[0], d_real.copy())
    np.testing.assert_allclose(grads["d_real"], num, rtol=1e-6)
    num = numeric_grad(lambda v: adversarial_losses(None, v)[1], d_fake.copy())
    np.testing.assert_allclose(grads["g_fake"], num, rtol=1e-6)


def test_adversarial_clamps_and_validates():
    d_loss, g_loss, _ = adversarial_losses(np.array([1.0]), np.array([0.0]))
    assert np.isfinite(d_loss) and np.isfinite(g_loss)
    with pytest.raises(ValueError):
        adversarial_losses(None, np.array([1.2]))


def _check_report(report):
    total = sum(report.weights[k] * report.components[k] for k in report.components)
    assert report.total == pytest.approx(total, rel=1e-12)


def test_totals_gradients():
    rng = np.random.default_rng(3)
    t_true = rng.uniform(0.2, 1, size=(2, 1, 14, 14))
    cs, fs = rng.uniform(0.2, 1, size=(2, 2, 1, 14, 14))
    rep = tp_total(cs, fs, t_true, weights=(0.5, 1.0, 2.0))
    _check_report(rep)
    num = numeric_grad(lambda v: tp_total(cs, v, t_true, weights=(0.5, 1.0, 2.0)).total, fs.copy(), h=1e-6)
    assert relative_error(rep.grads["fs_pred"], num).max() < 1e-4
    num = numeric_grad(lambda v: tp_total(v, fs, t_true, weights=(0.5, 1.0, 2.0)).total, cs.copy(), h=1e-6)
    assert relative_error(rep.grads["cs_pred"], num).max() < 1e-4

    hazy, clear = rng.uniform(size=(2, 1, 3, 14, 14))
    res = rng.normal(0, 0.1, size=hazy.shape)
    rep = d_total(res, hazy, clear)
    _check_report(rep)
    num = numeric_grad(lambda v: d_total(v, hazy, clear).total, res.copy(), h=1e-6)
    assert relative_error(rep.grads["residual"], num).max() < 1e-4

    refined = rng.uniform(size=hazy.shape)
    rep = rf_content(refined, hazy)
    _check_report(rep)
    num = numeric_grad(lambda v: rf_content(v, hazy).total, refined.copy(), h=1e-6)
    assert relative_error(rep.grads["refined"], num).max() < 1e-4


def test_rf_total_adversarial_weight():
    rng = np.random.default_rng(4)
    refined, x = rng.uniform(size=(2, 1, 3, 13, 13))
    d_fake = np.array([0.3])
    rep = rf_total(refined, x, d_fake)
    assert rep.weights["gan"] == ADVERSARIAL_WEIGHT == 1e-3
    _check_report(rep)
    content = rf_content(refined, x).total
    assert rep.total == pytest.approx(content - 1e-3 * np.log(0.3))
    np.testing.assert_allclose(rep.grads["d_fake"], 1e-3 * -1 / 0.3)


def test_identical_inputs_give_zero_content_loss():
    x = np.random.default_rng(5).uniform(size=(1, 3, 13, 13))
    rep = rf_content(x, x)
    assert rep.total == pytest.approx(0.0, abs=1e-12)
