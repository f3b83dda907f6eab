"""PSNR and SSIM in the mu-law tonemapped domain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ShapeError
from .hdr import MU, RadianceFrame, normalize_for_tonemap, tonemap_mu

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricReport:
    psnr_t: float
    ssim_t: float
    per_frame: List[tuple] = field(default_factory=list)


def _tonemapped_pair(pred, gt, mu):
    p = pred.image if isinstance(pred, RadianceFrame) else pred
    g = gt.image if isinstance(gt, RadianceFrame) else gt
    wp = gt.white_point if isinstance(gt, RadianceFrame) else 1.0
    if p.shape != g.shape:
        raise ShapeError(f"metric inputs differ in shape: {p.shape} vs {g.shape}")
    tp = tonemap_mu(normalize_for_tonemap(p, wp), mu).data.astype(np.float64)
    tg = tonemap_mu(normalize_for_tonemap(g, wp), mu).data.astype(np.float64)
    return tp, tg


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * np.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over 'valid' 11x11 Gaussian windows, averaged over channels."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def psnr_t(pred, gt, mu: float = MU) -> float:
    tp, tg = _tonemapped_pair(pred, gt, mu)
    return psnr(tp, tg)


def ssim_t(pred, gt, mu: float = MU) -> float:
    tp, tg = _tonemapped_pair(pred, gt, mu)
    return ssim(tp, tg)


def evaluate(preds, gts, names=None, mu: float = MU) -> MetricReport:
    rows = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        rows.append((names[i] if names else str(i), psnr_t(p, g, mu), ssim_t(p, g, mu)))
    if not rows:
        raise ShapeError("no frames to evaluate")
    return MetricReport(
        psnr_t=float(np.mean([r[1] for r in rows])),
        ssim_t=float(np.mean([r[2] for r in rows])),
        per_frame=rows,
    )
