"""PSNR, SAM, ERGAS, SSIM on (rows, cols, bands) cubes, plus error maps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d


class MetricError(ValueError):
    pass


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise MetricError(f"shape mismatch: {ref.shape} vs {est.shape}")
    if ref.ndim == 2:
        ref, est = ref[..., None], est[..., None]
    return ref, est


def per_band_psnr(ref, est, data_range: float = 1.0) -> np.ndarray:
    ref, est = _pair(ref, est)
    mse = np.mean((ref - est) ** 2, axis=(0, 1))
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(data_range**2 / mse)


def psnr(ref, est, data_range: float = 1.0) -> float:
    """Band-averaged PSNR in dB; +inf when the cubes are identical."""
    return float(np.mean(per_band_psnr(ref, est, data_range)))


def sam(ref, est) -> float:
    """Mean spectral angle in degrees over pixels where both spectra are nonzero."""
    ref, est = _pair(ref, est)
    z = ref.reshape(-1, ref.shape[-1])
    zh = est.reshape(-1, est.shape[-1])
    nz = np.linalg.norm(z, axis=1)
    nzh = np.linalg.norm(zh, axis=1)
    keep = (nz > 0) & (nzh > 0)
    if not np.any(keep):
        raise MetricError("SAM undefined: every pixel spectrum is zero")
    u = z[keep] / nz[keep, None]
    v = zh[keep] / nzh[keep, None]
    # half-angle form; arccos of the cosine loses precision near zero angle
    angle = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    return float(np.degrees(np.mean(angle)))


def ergas(ref, est, scale: float = 4) -> float:
    ref, est = _pair(ref, est)
    mu = np.mean(ref, axis=(0, 1))
    if np.any(mu == 0):
        raise MetricError("ERGAS undefined: a reference band has zero mean")
    rmse2 = np.mean((ref - est) ** 2, axis=(0, 1))
    return float(100.0 / scale * math.sqrt(np.mean(rmse2 / mu**2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = g.size // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_band(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    g = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(ref, est, data_range: float = 1.0) -> float:
    """Per-band Gaussian-window SSIM (11x11, sigma 1.5, valid region), averaged over bands."""
    ref, est = _pair(ref, est)
    if ref.shape[0] < 11 or ref.shape[1] < 11:
        raise MetricError(f"SSIM needs at least 11x11 pixels, got {ref.shape[:2]}")
    if np.array_equal(ref, est):
        return 1.0
    return float(np.mean([ssim_band(ref[..., b], est[..., b], data_range) for b in range(ref.shape[2])]))


def rmse_map(ref, est) -> np.ndarray:
    ref, est = _pair(ref, est)
    return np.sqrt(np.mean((ref - est) ** 2, axis=2))


def error_map(ref, est) -> np.ndarray:
    """Per-pixel RMSE across bands, min-max scaled to uint8 (all zero if flat)."""
    m = rmse_map(ref, est)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)


@dataclass
class MetricReport:
    psnr_db: float
    sam_deg: float
    ergas: float
    ssim: float
    per_band_psnr: np.ndarray

    def row(self, method: str, seconds: float) -> dict:
        d = asdict(self)
        return {
            "method": method,
            "psnr": d["psnr_db"],
            "sam": d["sam_deg"],
            "ergas": d["ergas"],
            "ssim": d["ssim"],
            "seconds": seconds,
        }


CSV_HEADER = ("method", "psnr", "sam", "ergas", "ssim", "seconds")


def evaluate(ref, est, scale: float = 4) -> MetricReport:
    return MetricReport(
        psnr_db=psnr(ref, est),
        sam_deg=sam(ref, est),
        ergas=ergas(ref, est, scale),
        ssim=ssim(ref, est),
        per_band_psnr=per_band_psnr(ref, est),
    )
