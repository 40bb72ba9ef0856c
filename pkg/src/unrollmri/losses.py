"""Training losses built on the autodiff graph: windowed SSIM, the combined
SSIM + l1 content loss on foreground-masked magnitudes, and the least-squares
adversarial objective pair.

Magnitude inputs are real [H, W] images (channel combination happens upstream
via rss); everything here returns scalar Tensors so gradients flow back into
the reconstruction network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .networks import discriminator_forward


@dataclass(frozen=True)
class LossConfig:
    """Weights of the loss terms.

    ``gamma_l1`` balances the l1 term against the percent-scale SSIM term,
    ``gamma_base`` the content loss against the adversarial score,
    ``gamma_prior``/``gamma_th`` the test-time adaptation hinge (similarity to
    the supervised reconstruction may drop to ``gamma_th`` before the hinge
    activates).
    """

    gamma_l1: float = 1e-3
    gamma_base: float = 0.1
    gamma_prior: float = 1.0
    gamma_th: float = 0.8
    ssim_window: int = 7

    def __post_init__(self):
        for name in ("gamma_l1", "gamma_base", "gamma_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.gamma_th <= 1.0:
            raise ValueError(f"gamma_th must lie in [0, 1], got {self.gamma_th}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 1, got {self.ssim_window}")


@dataclass(frozen=True)
class ForegroundMask:
    """Binary image-domain mask selecting the anatomy for masked losses."""

    mask: np.ndarray  # [H, W] of {0.0, 1.0}

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        object.__setattr__(self, "mask", m)
        if m.ndim != 2:
            raise ValueError(f"foreground mask must be 2-d, got shape {m.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("foreground mask entries must be exactly 0 or 1")
        if m.sum() == 0:
            raise ValueError("empty foreground mask")

    @classmethod
    def all_ones(cls, shape) -> "ForegroundMask":
        return cls(np.ones(shape, dtype=np.float64))


def foreground_array(m, shape) -> np.ndarray:
    """Validate a foreground mask (binary, nonempty) against an image shape."""
    fg = m if isinstance(m, ForegroundMask) else ForegroundMask(m)
    if fg.mask.shape != tuple(shape):
        raise ValueError(f"foreground shape {fg.mask.shape} does not match image {tuple(shape)}")
    return fg.mask


def _as_real_image(x, what: str) -> ad.Tensor:
    t = ad.as_tensor(x)
    if t.is_complex:
        raise TypeError(f"{what} must be a real magnitude image")
    if len(t.shape) != 2:
        raise ValueError(f"{what} must be 2-d, got shape {t.shape}")
    return t


def ssim(a, b, window: int = 7, data_range: float | None = None) -> ad.Tensor:
    """Mean structural similarity over all fully-interior uniform windows.

    Local moments come from a valid-mode box-filter convolution, so the result
    is differentiable in both images. Stabilizers are the standard
    ``(0.01 L)^2`` and ``(0.03 L)^2`` with L = ``data_range`` (maximum of the
    second input when omitted). Identical inputs give exactly 1.
    """
    a = _as_real_image(a, "ssim input a")
    b = _as_real_image(b, "ssim input b")
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape
    if window % 2 == 0 or window < 1:
        raise ValueError(f"ssim window must be odd and >= 1, got {window}")
    if window > min(h, w):
        raise ValueError(f"ssim window {window} larger than image {h}x{w}")
    dr = float(np.max(np.abs(b.value))) if data_range is None else float(data_range)
    if dr <= 0:
        raise ValueError(f"data_range must be positive, got {dr}")
    c1 = (0.01 * dr) ** 2
    c2 = (0.03 * dr) ** 2

    box = ad.constant(np.full((1, 1, window, window), 1.0 / window**2), name="ssim_box")

    def local_mean(t: ad.Tensor) -> ad.Tensor:
        out = ad.conv2d(ad.reshape(t, (1, h, w)), box, stride=1, padding="valid")
        return ad.reshape(out, out.shape[1:])

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = ad.sub(local_mean(ad.mul(a, a)), ad.mul(mu_a, mu_a))
    var_b = ad.sub(local_mean(ad.mul(b, b)), ad.mul(mu_b, mu_b))
    cov = ad.sub(local_mean(ad.mul(a, b)), ad.mul(mu_a, mu_b))

    num = ad.mul(ad.add(ad.mul(2.0, ad.mul(mu_a, mu_b)), c1),
                 ad.add(ad.mul(2.0, cov), c2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), c1),
                 ad.add(ad.add(var_a, var_b), c2))
    return ad.mean(ad.div(num, den))


def loss_base(mag_rec, mag_ref, foreground, cfg: LossConfig = LossConfig(),
              data_range: float | None = None) -> ad.Tensor:
    """Content loss on foreground-masked magnitudes:

        100 - 100 * ssim(m * rec, m * ref) + gamma_l1 * sum |m * rec - m * ref|

    Percent-scale SSIM keeps the two terms at comparable magnitude. Exactly
    zero when the masked magnitudes coincide. ``data_range`` defaults to the
    maximum of the masked reference.
    """
    rec = _as_real_image(mag_rec, "reconstruction magnitude")
    ref = _as_real_image(mag_ref, "reference magnitude")
    if rec.shape != ref.shape:
        raise ValueError(f"loss_base shape mismatch: {rec.shape} vs {ref.shape}")
    m = ad.constant(foreground_array(foreground, rec.shape), name="foreground")
    masked_rec = ad.mul(rec, m)
    masked_ref = ad.mul(ref, m)
    dr = float(np.max(masked_ref.value)) if data_range is None else float(data_range)
    s = ssim(masked_rec, masked_ref, window=cfg.ssim_window, data_range=dr)
    l1 = ad.summ(ad.abs_exact(ad.sub(masked_rec, masked_ref)))
    return ad.add(ad.sub(100.0, ad.mul(100.0, s)), ad.mul(cfg.gamma_l1, l1))


def lsgan_objectives(score_real, score_fake_d, score_fake_g, base_loss,
                     gamma_base: float) -> tuple[ad.Tensor, ad.Tensor]:
    """Least-squares adversarial pair from precomputed critic scores.

    The critic drives its score to 1 on references and 0 on reconstructions;
    the generator drives its score to 1 and adds the weighted content loss.
    Scores are single-sample estimates of the expectations.
    """
    score_real = ad.as_tensor(score_real)
    score_fake_d = ad.as_tensor(score_fake_d)
    score_fake_g = ad.as_tensor(score_fake_g)
    d_real = ad.sub(score_real, 1.0)
    d_loss = ad.add(ad.mul(0.5, ad.mul(d_real, d_real)),
                    ad.mul(0.5, ad.mul(score_fake_d, score_fake_d)))
    g_adv = ad.sub(score_fake_g, 1.0)
    g_loss = ad.add(ad.mul(0.5, ad.mul(g_adv, g_adv)),
                    ad.mul(gamma_base, ad.as_tensor(base_loss)))
    return d_loss, g_loss


def lsgan_losses(mag_rec, mag_ref, foreground, disc_params,
                 cfg: LossConfig = LossConfig(),
                 data_range: float | None = None) -> tuple[ad.Tensor, ad.Tensor]:
    """Critic and generator losses on foreground-masked magnitudes.

    The critic loss sees the reconstruction as a constant, so its backward
    pass touches only critic parameters; the generator loss flows through the
    live reconstruction graph and adds ``gamma_base`` times the content loss.
    """
    rec = _as_real_image(mag_rec, "reconstruction magnitude")
    ref = _as_real_image(mag_ref, "reference magnitude")
    if rec.shape != ref.shape:
        raise ValueError(f"lsgan shape mismatch: {rec.shape} vs {ref.shape}")
    m = ad.constant(foreground_array(foreground, rec.shape), name="foreground")
    masked_rec = ad.mul(rec, m)
    masked_ref = ad.constant(ref.value * m.value, name="masked_ref")

    score_real = discriminator_forward(masked_ref, disc_params)
    score_fake_d = discriminator_forward(
        ad.constant(masked_rec.value, name="masked_rec_detached"), disc_params)
    score_fake_g = discriminator_forward(masked_rec, disc_params)
    base = loss_base(mag_rec, mag_ref, foreground, cfg, data_range)
    return lsgan_objectives(score_real, score_fake_d, score_fake_g, base,
                            cfg.gamma_base)
