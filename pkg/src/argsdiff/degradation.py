"""Observation operators: bicubic spatial decimation, SRF band mixing, SNR noise.

Cubes are numpy arrays laid out (rows, cols, bands).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn


class DegradationError(ValueError):
    pass


def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out x n_in) bicubic resampling weights with clamped edges.

    Output sample j sits at input coordinate (j + 0.5) * n_in / n_out - 0.5.
    When shrinking, the kernel is stretched by the scale (antialiasing) and
    each row renormalised to sum to one.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    half = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) * ratio - 0.5
        lo, hi = math.floor(center - half), math.ceil(center + half)
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((center - taps) / stretch)
        w /= w.sum()
        np.add.at(m[j], np.clip(taps, 0, n_in - 1), w)
    m.setflags(write=False)
    return m


def _resample(cube, rows: int, cols: int):
    h, w = cube.shape[:2]
    mh, mw = resample_matrix(h, rows), resample_matrix(w, cols)
    if isinstance(cube, tn.Tensor):
        return tn.mode_product(tn.mode_product(cube, mh, axis=0), mw, axis=1)
    out = np.tensordot(mh, cube, axes=([1], [0]))
    return np.moveaxis(np.tensordot(mw, out, axes=([1], [1])), 0, 1)


def bicubic_downsample(cube, s: int):
    """Shrink rows and cols by integer factor ``s``; works on arrays and Tensors."""
    h, w = cube.shape[:2]
    if s < 1 or h % s or w % s:
        raise DegradationError(f"{h}x{w} is not divisible by scale {s}")
    if s == 1:
        return cube if isinstance(cube, tn.Tensor) else np.array(cube, dtype=np.float64)
    return _resample(cube, h // s, w // s)


def bicubic_upsample(cube: np.ndarray, s: int) -> np.ndarray:
    """Plain bicubic interpolation by integer factor ``s`` (the interpolation baseline)."""
    h, w = cube.shape[:2]
    return _resample(np.asarray(cube, dtype=np.float64), h * s, w * s)


def mode3_multiply(cube, m):
    """Per-pixel spectrum transform: out[i, j] = m @ cube[i, j]."""
    if isinstance(cube, tn.Tensor) or isinstance(m, tn.Tensor):
        return tn.mode_product(tn.as_tensor(cube), m, axis=2)
    cube = np.asarray(cube, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if cube.ndim != 3 or m.ndim != 2 or m.shape[1] != cube.shape[2]:
        raise DegradationError(f"cannot apply {m.shape} along bands of {cube.shape}")
    return cube @ m.T


def make_partition_srf(C: int, c: int) -> np.ndarray:
    """c x C averaging matrix over contiguous, nearly equal band groups."""
    if not 1 <= c <= C:
        raise DegradationError(f"need 1 <= c <= C, got c={c}, C={C}")
    srf = np.zeros((c, C))
    for i, group in enumerate(np.array_split(np.arange(C), c)):
        srf[i, group] = 1.0 / group.size
    return srf


def add_noise_snr(cube: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise at the requested SNR; ``inf`` returns a copy."""
    cube = np.asarray(cube, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return cube.copy()
    power = float(np.mean(cube * cube))
    if power == 0.0:
        raise DegradationError("SNR is undefined for an all-zero cube")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return cube + sigma * rng.standard_normal(cube.shape)


@dataclass
class DegradationModel:
    srf: np.ndarray
    scale: int = 4
    snr_db: float = 35.0

    def __post_init__(self):
        self.srf = np.asarray(self.srf, dtype=np.float64)
        if self.scale < 1:
            raise DegradationError(f"scale must be >= 1, got {self.scale}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise DegradationError(f"invalid snr_db {self.snr_db}")
        if self.srf.ndim != 2 or np.any(self.srf < 0):
            raise DegradationError("SRF must be a nonnegative matrix")

    @property
    def bands(self) -> tuple[int, int]:
        """(C, c): hyperspectral and multispectral band counts."""
        return self.srf.shape[1], self.srf.shape[0]

    def spatial(self, cube):
        return bicubic_downsample(cube, self.scale)

    def spatial_norm(self, shape: tuple[int, int]) -> float:
        """Operator 2-norm of the spatial downsampling on an (H, W) band."""
        h, w = shape
        if self.scale == 1:
            return 1.0
        mh = resample_matrix(h, h // self.scale)
        mw = resample_matrix(w, w // self.scale)
        return float(np.linalg.norm(mh, 2) * np.linalg.norm(mw, 2))

    def spectral(self, cube):
        return mode3_multiply(cube, self.srf)


def simulate_pair(ref: np.ndarray, model: DegradationModel, rng: np.random.Generator):
    """Return (LR-HSI, HR-MSI) observations of a reference cube."""
    lr = add_noise_snr(model.spatial(ref), model.snr_db, rng)
    msi = add_noise_snr(model.spectral(ref), model.snr_db, rng)
    return lr, msi
