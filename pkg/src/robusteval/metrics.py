"""Full-reference image quality metrics: MSE, PSNR, ERGAS, SSIM and SAM.

Every function takes images shaped ``(h, w, b)``, or stacks shaped
``(..., h, w, b)`` in which case one value per image is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0 or self.L <= 0 or self.gaussian_sigma <= 0:
            raise ValueError("SSIM constants must be positive")


@dataclass(frozen=True)
class QualityReport:
    """Metric bundle for one image pair, or averages over a set of pairs.

    For a set, ``psnr`` averages only the finite values and
    ``psnr_infinite`` counts the identical pairs left out of that average
    (``psnr`` is ``inf`` when every pair is identical).
    """

    ergas: float
    psnr: float
    ssim_mean: float
    ssim_cs: float
    sam: float
    mse: float
    psnr_infinite: int = 0
    count: int = 1


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 3:
        raise ValueError(f"expected (..., h, w, b) images, got {a.shape}")
    return a, b


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def mse(a, b):
    """Mean squared difference over all pixels and bands."""
    a, b = _pair(a, b)
    return _out(((a - b) ** 2).mean(axis=(-3, -2, -1)))


def psnr(a, b, L=1.0):
    """``20 log10(L) - 10 log10(MSE)`` in dB; ``inf`` for identical images."""
    if L <= 0:
        raise ValueError("dynamic range L must be positive")
    err = np.asarray(mse(a, b))
    with np.errstate(divide="ignore"):
        value = np.where(err == 0, np.inf, 20.0 * np.log10(L) - 10.0 * np.log10(err))
    return _out(value)


def ergas(reference, processed, d=1.0):
    """Relative dimensionless global error in synthesis.

    ``100 * d * sqrt(mean_i (RMSE_i / mu_i)^2)`` over bands ``i``, where
    ``mu_i`` is the band mean of ``reference`` and ``d`` the resolution
    ratio (1 for same-size images).
    """
    reference, processed = _pair(reference, processed)
    mu = reference.mean(axis=(-3, -2))
    if np.any(mu == 0):
        raise DegenerateInputError("ERGAS undefined: a reference band has zero mean")
    rmse = np.sqrt(((reference - processed) ** 2).mean(axis=(-3, -2)))
    return _out(100.0 * d * np.sqrt(((rmse / mu) ** 2).mean(axis=-1)))


def gaussian_window(size, sigma):
    """Normalized ``size x size`` Gaussian weights."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, params=SSIMParams()):
    """Mean SSIM and mean contrast-structure term over all valid windows and bands.

    Windows are Gaussian-weighted and slide with stride 1 without padding,
    so an image must be at least ``params.window`` pixels on each side.
    """
    a, b = _pair(a, b)
    size = params.window
    if a.shape[-3] < size or a.shape[-2] < size:
        raise ValueError(f"image {a.shape[-3:-1]} smaller than the {size}x{size} SSIM window")
    k = gaussian_window(size, params.gaussian_sigma)
    c1 = (params.k1 * params.L) ** 2
    c2 = (params.k2 * params.L) ** 2

    def wmean(img):
        # windows over (h, w): (..., oh, ow, b, size, size)
        win = sliding_window_view(img, (size, size), axis=(-3, -2))
        return np.einsum("...ij,ij->...", win, k)

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a ** 2
    var_b = wmean(b * b) - mu_b ** 2
    cov = wmean(a * b) - mu_a * mu_b
    # |cs| <= 1 exactly; the moment form can overshoot by rounding on flat windows
    cs = np.clip((2.0 * cov + c2) / (var_a + var_b + c2), -1.0, 1.0)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    axes = (-3, -2, -1)
    return _out((lum * cs).mean(axis=axes)), _out(cs.mean(axis=axes))


def sam(a, b):
    """Spectral angle in radians.

    Multi-band images: angle between the band vectors of each pixel,
    averaged over pixels. Single-band images have no per-pixel spectrum, so
    the angle is taken between the two whole images as flat vectors.
    """
    a, b = _pair(a, b)
    if a.shape[-1] >= 2:
        dot = (a * b).sum(axis=-1)
        na = np.sqrt((a * a).sum(axis=-1))
        nb = np.sqrt((b * b).sum(axis=-1))
        if np.any(na == 0) or np.any(nb == 0):
            raise DegenerateInputError("SAM undefined: zero spectral vector at a pixel")
        angle = np.arccos(np.clip(dot / (na * nb), -1.0, 1.0))
        # rounding in the cosine would otherwise leave ~1e-8 rad for equal vectors
        angle = np.where(np.all(a == b, axis=-1), 0.0, angle)
        return _out(angle.mean(axis=(-2, -1)))
    fa = a.reshape(a.shape[:-3] + (-1,))
    fb = b.reshape(b.shape[:-3] + (-1,))
    na = np.sqrt((fa * fa).sum(axis=-1))
    nb = np.sqrt((fb * fb).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("SAM undefined: all-zero image")
    cos = (fa * fb).sum(axis=-1) / (na * nb)
    angle = np.arccos(np.clip(cos, -1.0, 1.0))
    return _out(np.where(np.all(fa == fb, axis=-1), 0.0, angle))


def quality_report(original, adversarial, L=1.0, d=1.0, ssim_params=None):
    """All metrics for one pair, or their averages over a stack of pairs."""
    original, adversarial = _pair(original, adversarial)
    params = ssim_params or SSIMParams(L=L)
    e = np.atleast_1d(ergas(original, adversarial, d))
    p = np.atleast_1d(psnr(original, adversarial, L))
    s_mean, s_cs = (np.atleast_1d(v) for v in ssim(original, adversarial, params))
    angle = np.atleast_1d(sam(original, adversarial))
    err = np.atleast_1d(mse(original, adversarial))
    finite = np.isfinite(p)
    return QualityReport(
        ergas=float(e.mean()),
        psnr=float(p[finite].mean()) if finite.any() else math.inf,
        ssim_mean=float(s_mean.mean()),
        ssim_cs=float(s_cs.mean()),
        sam=float(angle.mean()),
        mse=float(err.mean()),
        psnr_infinite=int((~finite).sum()),
        count=len(e),
    )
