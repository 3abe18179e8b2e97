"""Photometric, depth-correlation and distillation losses.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the *rendered* buffer (the second argument).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PEARSON_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    depth: float = 0.05

    def __post_init__(self):
        if min(self.l1, self.ssim, self.depth) < 0:
            raise ValueError("loss weights must be non-negative")


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def l1_loss(target, rendered):
    target = np.asarray(target, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    _check_same(target, rendered)
    diff = rendered - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


_TAPS = _gaussian_taps()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padded "same" filtering; the symmetric kernel makes this self-adjoint
    out = correlate1d(img, _TAPS, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _TAPS, axis=1, mode="constant", cval=0.0)


def ssim(target, rendered, with_grad: bool = True):
    """Mean SSIM over pixels and channels, 11x11 Gaussian window (sigma 1.5).

    Returns ``(ssim, d ssim / d rendered)``; the training term is ``1 - ssim``.
    """
    x = np.asarray(target, dtype=np.float64)
    y = np.asarray(rendered, dtype=np.float64)
    _check_same(x, y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x ** 2
    syy = _blur(y * y) - mu_y ** 2
    sxy = _blur(x * y) - mu_x * mu_y
    A1 = 2 * mu_x * mu_y + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not with_grad:
        return value, None
    n = smap.size
    # partials of the SSIM map w.r.t. the local statistics of y
    d_mu_y = (2 * mu_x * A2) / (B1 * B2) - (2 * mu_y * smap) / B1
    d_syy = -smap / B2
    d_sxy = 2 * A1 / (B1 * B2)
    # mu_y, syy = blur(y^2) - mu_y^2, sxy = blur(xy) - mu_x mu_y
    g_mu = d_mu_y - 2 * mu_y * d_syy - mu_x * d_sxy
    grad = (_blur(g_mu) + 2 * y * _blur(d_syy) + x * _blur(d_sxy)) / n
    return value, grad


def ssim_loss(target, rendered):
    value, grad = ssim(target, rendered)
    return 1.0 - value, -grad


def pearson_depth_loss(rendered_depth, estimated_depth, mask=None):
    """``1 - corr(rendered, estimated)`` over the masked pixels.

    Affine-invariant in either argument (positive slope).  When either map
    has (near) zero variance the loss is 0 with a zero gradient.
    """
    a_full = np.asarray(rendered_depth, dtype=np.float64)
    b_full = np.asarray(estimated_depth, dtype=np.float64)
    _check_same(a_full, b_full)
    grad = np.zeros_like(a_full)
    sel = np.ones(a_full.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if sel.sum() < 2:
        return 0.0, grad
    a = a_full[sel] - a_full[sel].mean()
    b = b_full[sel] - b_full[sel].mean()
    saa, sbb = np.dot(a, a), np.dot(b, b)
    m = a.size
    if saa / m <= PEARSON_EPS or sbb / m <= PEARSON_EPS:
        return 0.0, grad
    denom = np.sqrt(saa * sbb)
    rho = np.dot(a, b) / denom
    rho = min(1.0, max(-1.0, rho))
    # centering drops out of the derivative because sum(a) = sum(b) = 0
    grad[sel] = -(b / denom - rho * a / saa)
    return float(1.0 - rho), grad


def pearson_correlation(x, y) -> float:
    return 1.0 - pearson_depth_loss(x, y)[0]


def total_loss(target, rendered, rendered_depth, estimated_depth, w: LossWeights = LossWeights(),
               depth_mask=None):
    """Weighted photometric + depth-correlation loss.

    Returns ``(value, grad_rendered, grad_depth, terms)``.
    """
    l1, g1 = l1_loss(target, rendered)
    s, gs = ssim_loss(target, rendered)
    value = w.l1 * l1 + w.ssim * s
    grad_img = w.l1 * g1 + w.ssim * gs
    terms = {"l1": l1, "ssim": s}
    if w.depth > 0 and rendered_depth is not None and estimated_depth is not None:
        d, gd = pearson_depth_loss(rendered_depth, estimated_depth, depth_mask)
        value += w.depth * d
        grad_depth = w.depth * gd
        terms["depth"] = d
    else:
        grad_depth = np.zeros(np.shape(rendered)[:2]) if rendered_depth is None else np.zeros_like(
            np.asarray(rendered_depth, dtype=np.float64))
        terms["depth"] = 0.0
    return float(value), grad_img, grad_depth, terms


def distill_loss(pseudo_gt, rendered, w: LossWeights = LossWeights()):
    """Photometric-only loss against a teacher-rendered view; returns ``(value, grad)``."""
    value, grad, _, _ = total_loss(pseudo_gt, rendered, None, None,
                                   LossWeights(w.l1, w.ssim, 0.0))
    return value, grad


def psnr(target, rendered) -> float:
    """PSNR in dB for unit-range images; ``inf`` when the images are identical."""
    target = np.asarray(target, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    _check_same(target, rendered)
    mse = float(np.mean((target - rendered) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
