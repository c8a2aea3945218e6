"""Loss functions with analytic gradients.

Every loss returns its value together with the gradient wrt its prediction
argument(s). The three weighted totals return a :class:`LossReport`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ADVERSARIAL_WEIGHT = 1e-3
LOG_CLAMP = 1e-7


@dataclass(frozen=True)
class SsimConfig:
    """Window and stabilizing constants for SSIM.

    ``constants="literal"`` uses ``c1``/``c2`` as given. ``"k_params"`` reads
    them as K1/K2 and uses (K*L)^2 with dynamic range L = 1.
    ``window="gaussian"`` swaps the box window for a Gaussian (sigma 1.5).
    """

    patch_size: int = 13
    c1: float = 0.02
    c2: float = 0.03
    constants: str = "literal"
    window: str = "uniform"

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        if self.constants not in ("literal", "k_params"):
            raise ValueError(f"unknown constants mode {self.constants!r}")
        if self.window not in ("uniform", "gaussian"):
            raise ValueError(f"unknown window {self.window!r}")

    @classmethod
    def classical(cls) -> "SsimConfig":
        return cls(patch_size=11, c1=0.01, c2=0.03, constants="k_params", window="gaussian")

    @property
    def C1(self) -> float:
        return self.c1 if self.constants == "literal" else self.c1**2

    @property
    def C2(self) -> float:
        return self.c2 if self.constants == "literal" else self.c2**2


@dataclass
class LossReport:
    components: dict[str, float]
    weights: dict[str, float]
    total: float
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def as_record(self) -> dict[str, float]:
        return {**self.components, "total": self.total}


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _check_same(pred, target, "mse_loss")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- SSIM


@lru_cache(maxsize=64)
def _window_matrix(n: int, patch: int, window: str) -> np.ndarray:
    """(n, n) matrix applying a 1-D window with mirror (reflect) borders."""
    r = patch // 2
    if window == "uniform":
        weights = np.full(patch, 1.0 / patch)
    else:
        offs = np.arange(-r, r + 1)
        weights = np.exp(-(offs**2) / (2 * 1.5**2))
        weights /= weights.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for off in range(-r, r + 1):
            j = i + off
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * (n - 1) - j
            m[i, j] += weights[off + r]
    m.setflags(write=False)
    return m


def _filters(shape: tuple[int, ...], cfg: SsimConfig, dtype) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape[-2:]
    if h < cfg.patch_size or w < cfg.patch_size:
        raise ValueError(f"image {h}x{w} is smaller than the {cfg.patch_size}x{cfg.patch_size} SSIM patch")
    return (
        _window_matrix(h, cfg.patch_size, cfg.window).astype(dtype),
        _window_matrix(w, cfg.patch_size, cfg.window).astype(dtype),
    )


def _ssim_terms(x, y, cfg):
    mh, mw = _filters(x.shape, cfg, x.dtype)
    blur = lambda a: mh @ a @ mw.T  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    C1, C2 = cfg.C1, cfg.C2
    a1, b1 = 2 * mx * my + C1, mx * mx + my * my + C1
    a2, b2 = 2 * sxy + C2, sxx + syy + C2
    return (mh, mw), (mx, my), (a1, b1, a2, b2)


def ssim_map(x: np.ndarray, y: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-pixel SSIM, computed independently for every (batch, channel) plane."""
    _check_same(x, y, "ssim_map")
    _, _, (a1, b1, a2, b2) = _ssim_terms(x, y, cfg)
    return (a1 / b1) * (a2 / b2)


def ssim_loss(x: np.ndarray, y: np.ndarray, cfg: SsimConfig = SsimConfig()) -> tuple[float, np.ndarray]:
    """1 - mean SSIM over all pixels, channels and batch items; gradient wrt x."""
    _check_same(x, y, "ssim_loss")
    (mh, mw), (mx, my), (a1, b1, a2, b2) = _ssim_terms(x, y, cfg)
    lum, con = a1 / b1, a2 / b2
    value = 1.0 - float(np.mean(lum * con))

    dS = -1.0 / lum.size
    # partials of S = lum * con wrt the windowed statistics of x
    d_lum_dmx = (2 * my - lum * 2 * mx) / b1
    d_con_dsxx = -con / b2
    d_con_dsxy = 2.0 / b2
    g_exx = dS * lum * d_con_dsxx
    g_exy = dS * lum * d_con_dsxy
    g_mx = dS * (d_lum_dmx * con) - 2 * mx * g_exx - my * g_exy
    blur_t = lambda a: mh.T @ a @ mw  # noqa: E731
    grad = blur_t(g_mx) + 2 * x * blur_t(g_exx) + y * blur_t(g_exy)
    return value, grad


# ---------------------------------------------------------------- adversarial


def _check_prob(d: np.ndarray, name: str) -> None:
    if np.any(~np.isfinite(d)) or np.any(d < 0) or np.any(d > 1):
        raise ValueError(f"{name} must contain discriminator probabilities in [0, 1]")


def adversarial_losses(d_real: np.ndarray | None, d_fake: np.ndarray) -> tuple[float, float, dict[str, np.ndarray]]:
    """Discriminator and (non-saturating) generator losses.

    Returns ``(d_loss, g_loss, grads)`` with ``grads`` holding
    ``d_real``/``d_fake`` for the discriminator loss and ``g_fake`` for the
    generator loss. ``d_real`` may be None when only the generator side is needed.
    """
    _check_prob(d_fake, "d_fake")
    n_fake = d_fake.size
    fake_c = np.maximum(1 - d_fake, LOG_CLAMP)
    g_in = np.maximum(d_fake, LOG_CLAMP)
    g_loss = float(-np.mean(np.log(g_in)))
    grads = {
        "d_fake": np.where(1 - d_fake > LOG_CLAMP, 1.0 / (n_fake * fake_c), 0.0),
        "g_fake": np.where(d_fake > LOG_CLAMP, -1.0 / (n_fake * g_in), 0.0),
    }
    d_loss = float(-np.mean(np.log(fake_c)))
    if d_real is not None:
        _check_prob(d_real, "d_real")
        real_c = np.maximum(d_real, LOG_CLAMP)
        d_loss += float(-np.mean(np.log(real_c)))
        grads["d_real"] = np.where(d_real > LOG_CLAMP, -1.0 / (d_real.size * real_c), 0.0)
    return d_loss, g_loss, grads


# ---------------------------------------------------------------- totals


def tp_total(cs_pred, fs_pred, t_true, cfg: SsimConfig = SsimConfig(), weights=(1.0, 1.0, 1.0)) -> LossReport:
    """Transmission objective: coarse MSE + fine MSE + fine SSIM."""
    _check_same(cs_pred, t_true, "tp_total coarse")
    _check_same(fs_pred, t_true, "tp_total fine")
    w_cs, w_fs, w_ss = weights
    cs, g_cs = mse_loss(cs_pred, t_true)
    fs, g_fs = mse_loss(fs_pred, t_true)
    ss, g_ss = ssim_loss(fs_pred, t_true, cfg)
    comps = {"cs_mse": cs, "fs_mse": fs, "fs_ssim": ss}
    w = {"cs_mse": w_cs, "fs_mse": w_fs, "fs_ssim": w_ss}
    total = w_cs * cs + w_fs * fs + w_ss * ss
    grads = {"cs_pred": w_cs * g_cs, "fs_pred": w_fs * g_fs + w_ss * g_ss}
    return LossReport(comps, w, total, grads)


def d_total(residual_out, hazy_in, clear_true, cfg: SsimConfig = SsimConfig(), weights=(1.0, 1.0)) -> LossReport:
    """Haze-removal objective on (residual + hazy) against the clear image."""
    _check_same(residual_out, hazy_in, "d_total")
    _check_same(residual_out, clear_true, "d_total")
    w_m, w_s = weights
    pred = residual_out + hazy_in
    m, g_m = mse_loss(pred, clear_true)
    s, g_s = ssim_loss(pred, clear_true, cfg)
    total = w_m * m + w_s * s
    return LossReport(
        {"d_mse": m, "d_ssim": s},
        {"d_mse": w_m, "d_ssim": w_s},
        total,
        {"residual": w_m * g_m + w_s * g_s},
    )


def rf_content(refined, dehazed_input, cfg: SsimConfig = SsimConfig(), weights=(1.0, 1.0)) -> LossReport:
    """Content-preservation part of the refinement objective."""
    _check_same(refined, dehazed_input, "rf_total")
    w_m, w_s = weights
    m, g_m = mse_loss(refined, dehazed_input)
    s, g_s = ssim_loss(refined, dehazed_input, cfg)
    return LossReport(
        {"rf_mse": m, "rf_ssim": s},
        {"rf_mse": w_m, "rf_ssim": w_s},
        w_m * m + w_s * s,
        {"refined": w_m * g_m + w_s * g_s},
    )


def rf_total(
    refined,
    dehazed_input,
    d_fake,
    cfg: SsimConfig = SsimConfig(),
    weights=(1.0, 1.0),
    adversarial_weight: float = ADVERSARIAL_WEIGHT,
) -> LossReport:
    """Content losses against the generator input plus the weighted GAN term."""
    report = rf_content(refined, dehazed_input, cfg, weights)
    _, g_loss, adv = adversarial_losses(None, d_fake)
    report.components["gan"] = g_loss
    report.weights["gan"] = adversarial_weight
    report.total = report.total + adversarial_weight * g_loss
    report.grads["d_fake"] = adversarial_weight * adv["g_fake"]
    return report
