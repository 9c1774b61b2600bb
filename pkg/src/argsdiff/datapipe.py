"""Training-sample construction from the observed pair, and synthetic scenes."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    pass


def spectral_batch(lr_hsi: np.ndarray, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``dim`` pixel spectra drawn uniformly (with replacement), stacked as a (dim, bands) sample."""
    lr_hsi = np.asarray(lr_hsi)
    if lr_hsi.ndim != 3 or lr_hsi.shape[0] * lr_hsi.shape[1] == 0 or lr_hsi.shape[2] == 0:
        raise InputError(f"need a nonempty (h, w, C) cube, got shape {lr_hsi.shape}")
    pixels = lr_hsi.reshape(-1, lr_hsi.shape[2])
    return pixels[rng.integers(0, pixels.shape[0], size=dim)].astype(np.float64)


def spatial_batch(hr_msi: np.ndarray, dim: int, patch: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """One random patch window, ``dim`` bands drawn from it with replacement -> (dim, h_p, w_p)."""
    hr_msi = np.asarray(hr_msi)
    if hr_msi.ndim != 3 or hr_msi.shape[2] == 0:
        raise InputError(f"need an (H, W, c) cube, got shape {hr_msi.shape}")
    H, W, c = hr_msi.shape
    hp, wp = patch
    if hp > H or wp > W or hp < 1 or wp < 1:
        raise InputError(f"patch {hp}x{wp} does not fit a {H}x{W} image")
    i = rng.integers(0, H - hp + 1)
    j = rng.integers(0, W - wp + 1)
    bands = rng.integers(0, c, size=dim)
    window = hr_msi[i:i + hp, j:j + wp, :]
    return np.ascontiguousarray(window[:, :, bands].transpose(2, 0, 1), dtype=np.float64)


def spectral_sampler(lr_hsi: np.ndarray, dim: int, batch: int = 1):
    """Callable for the trainer: ``batch`` samples stacked to (batch * dim, bands)."""

    def draw(rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([spectral_batch(lr_hsi, dim, rng) for _ in range(batch)], axis=0)

    return draw


def spatial_sampler(hr_msi: np.ndarray, dim: int, patch: tuple[int, int], batch: int = 1):
    """Callable for the trainer: ``batch`` samples stacked to (batch, dim, h_p, w_p)."""

    def draw(rng: np.random.Generator) -> np.ndarray:
        return np.stack([spatial_batch(hr_msi, dim, patch, rng) for _ in range(batch)])

    return draw


def _bump_maps(H: int, W: int, count: int, n_bumps: int, width: tuple[float, float], rng) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    maps = np.zeros((H, W, count))
    for k in range(count):
        for _ in range(n_bumps):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            sy, sx = rng.uniform(*width, size=2)
            amp = rng.uniform(0.2, 1.0)
            maps[:, :, k] += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    return maps


def _smooth_spectra(count: int, C: int, rng) -> np.ndarray:
    """Nonnegative spectra built from a few broad Gaussian peaks along the band axis."""
    bands = np.arange(C, dtype=np.float64)
    spectra = np.zeros((count, C))
    for k in range(count):
        spectra[k] += rng.uniform(0.05, 0.2)
        for _ in range(3):
            center = rng.uniform(-0.1 * C, 1.1 * C)
            width = rng.uniform(0.1 * C, 0.35 * C)
            spectra[k] += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((bands - center) / width) ** 2)
    return spectra


def synth_scene(
    H: int,
    W: int,
    C: int,
    rank: int,
    seed: int,
    n_bumps: int = 12,
    bump_width: tuple[float, float] = (1.5, 6.0),
) -> np.ndarray:
    """Smooth low-rank reference cube Z = A x_3 E scaled into [0, 1].

    A holds ``rank`` maps, each a sum of random anisotropic Gaussian bumps;
    E holds ``rank`` nonnegative spectra with broad peaks. Dividing by the
    maximum (rather than min-max) keeps the mode-3 rank at most ``rank``.
    """
    if rank > min(C, H * W):
        raise InputError(f"rank {rank} exceeds min(C, H*W) = {min(C, H * W)}")
    rng = np.random.default_rng(seed)
    A = _bump_maps(H, W, rank, n_bumps, bump_width, rng)
    E = _smooth_spectra(rank, C, rng)
    Z = A @ E
    return Z / Z.max()
