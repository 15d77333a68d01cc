"""Synthetic CT phantoms and a pixel-domain low-dose noise surrogate.

Phantoms are elliptical anatomies on an air background, in Hounsfield
units. The dose simulation draws attenuation-dependent Poisson counts per
pixel (fewer photons behind denser tissue, scaled by the dose fraction),
maps the relative count deficit back to HU, adds a small electronic noise
floor, and smooths the noise field with a 3x3 binomial kernel to mimic the
spatial correlation a reconstruction kernel introduces. The clean image is
never blurred; only the noise is.

Noise calibration, at soft tissue (40 HU) and full dose: lambda =
PHOTON_BUDGET * exp(-2 * 1040/1000) ~ 5e4 counts, so the HU-mapped deficit
NOISE_GAIN/sqrt(lambda) ~ 1.8 HU before smoothing, ~0.7 HU after. Halving
the dose scales Poisson noise by sqrt(2); photon starvation behind very
dense material saturates at NOISE_GAIN when counts reach zero.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from .io import PhantomPair, save_pair

__all__ = [
    "HU_MIN",
    "HU_MAX",
    "HU_AIR",
    "TRAIN_WINDOW",
    "METRIC_WINDOW",
    "gen_phantom",
    "simulate_low_dose",
    "hu_window",
    "hu_unwindow",
    "make_pair",
    "generate_dataset",
]

HU_MIN = -1024.0
HU_MAX = 3071.0
HU_AIR = -1000.0

TRAIN_WINDOW = (-1000.0, 2000.0)
METRIC_WINDOW = (-160.0, 240.0)

PHOTON_BUDGET = 5.0e5
NOISE_GAIN = 400.0
ATTENUATION_SCALE = 2.0
ELECTRONIC_SIGMA = 0.5

_BINOMIAL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0

# Noise correlation kernel: deliberately close to a delta. A heavier kernel
# would push the noise power into the same low frequencies the anatomy lives
# in, and past that overlap no estimator can separate the two.
_MILD = np.outer([1.0, 6.0, 1.0], [1.0, 6.0, 1.0]) / 64.0


def _kernel3(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation with edge-replicated borders."""
    padded = np.pad(field, 1, mode="edge")
    out = np.zeros_like(field)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di : di + field.shape[0], dj : dj + field.shape[1]]
    return out


def _binomial3(field: np.ndarray) -> np.ndarray:
    """3x3 binomial smoothing with edge-replicated borders."""
    return _kernel3(field, _BINOMIAL)


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float,
                  angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y = yy - cy
    x = xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * x + sa * y
    v = -sa * x + ca * y
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def gen_phantom(seed: int, size: int = 256) -> np.ndarray:
    """Deterministic anatomy in HU; see :func:`make_pair` for the descriptor."""
    grid, _ = _compose_phantom(seed, size)
    return grid


def _compose_phantom(seed: int, size: int) -> Tuple[np.ndarray, Tuple]:
    if not 64 <= size <= 512:
        raise ValueError(f"phantom size must lie in [64, 512], got {size}")
    rng = np.random.default_rng(seed)
    grid = np.full((size, size), HU_AIR, dtype=np.float64)
    parts = []

    # body: soft-tissue ellipse roughly centered
    cy = size * (0.5 + rng.uniform(-0.02, 0.02))
    cx = size * (0.5 + rng.uniform(-0.02, 0.02))
    ry = size * rng.uniform(0.30, 0.36)
    rx = size * rng.uniform(0.36, 0.44)
    tilt = rng.uniform(-0.15, 0.15)
    body = _ellipse_mask(size, cy, cx, ry, rx, tilt)
    grid[body] = 40.0
    parts.append(("body", cy, cx, ry, rx, 40.0))

    # smooth soft-tissue texture, confined to the body
    coarse = rng.normal(0.0, 8.0, (size // 16, size // 16))
    texture = coarse.repeat(16, axis=0).repeat(16, axis=1)
    texture = _binomial3(_binomial3(texture))
    grid[body] += texture[body]

    # organs: brighter ellipses well inside the body
    for _ in range(rng.integers(2, 7)):
        oy = cy + rng.uniform(-0.5, 0.5) * ry
        ox = cx + rng.uniform(-0.5, 0.5) * rx
        ory = size * rng.uniform(0.04, 0.12)
        orx = size * rng.uniform(0.04, 0.12)
        hu = rng.uniform(20.0, 90.0)
        mask = _ellipse_mask(size, oy, ox, ory, orx, rng.uniform(0, math.pi)) & body
        grid[mask] = hu
        parts.append(("organ", oy, ox, ory, orx, hu))

    # low-contrast lesions: small +-15 HU offsets on whatever they overlap
    for _ in range(rng.integers(1, 4)):
        ly = cy + rng.uniform(-0.55, 0.55) * ry
        lx = cx + rng.uniform(-0.55, 0.55) * rx
        lr = size * rng.uniform(0.02, 0.05)
        delta = rng.choice([-15.0, 15.0])
        mask = _ellipse_mask(size, ly, lx, lr, lr, 0.0) & body
        grid[mask] += delta
        parts.append(("lesion", ly, lx, lr, lr, delta))

    # rib-like arcs: a dense band near the body boundary, broken into segments
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ca, sa = math.cos(tilt), math.sin(tilt)
    u = ca * (xx - cx) + sa * (yy - cy)
    v = -sa * (xx - cx) + ca * (yy - cy)
    r = np.sqrt((u / (rx * 0.92)) ** 2 + (v / (ry * 0.92)) ** 2)
    band = (r > 0.96) & (r < 1.04) & body
    theta = np.arctan2(v, u)
    n_ribs = int(rng.integers(8, 13))
    phase = rng.uniform(0, 2 * math.pi)
    segments = np.floor((theta + math.pi + phase) / (2 * math.pi) * n_ribs).astype(int)
    ribs = band & (segments % 2 == 0)
    grid[ribs] = 300.0
    parts.append(("ribs", cy, cx, ry * 0.92, rx * 0.92, 300.0))

    # Reconstruction point-spread: real scanners band-limit every edge, and
    # razor-sharp masks would make any smoothing-based denoiser lose more at
    # the boundaries than it gains in the flats. Two binomial passes leave
    # flat regions (and the far background) bit-exact.
    grid = _binomial3(_binomial3(grid))

    np.clip(grid, HU_MIN, HU_MAX, out=grid)
    return grid.astype(np.float32), tuple(parts)


def simulate_low_dose(
    ndct: np.ndarray,
    dose_fraction: float,
    seed: int = 0,
    *,
    photon_budget: float = PHOTON_BUDGET,
    noise_gain: float = NOISE_GAIN,
    attenuation: float = ATTENUATION_SCALE,
    electronic_sigma: float = ELECTRONIC_SIGMA,
) -> np.ndarray:
    """Add seeded dose-dependent noise to a clean HU image."""
    if not 0.0 < dose_fraction <= 1.0:
        raise ValueError(f"dose fraction must lie in (0, 1], got {dose_fraction}")
    nd = np.asarray(ndct, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lam = photon_budget * dose_fraction * np.exp(-attenuation * (nd - HU_AIR) / 1000.0)
    counts = rng.poisson(lam).astype(np.float64)
    noise = noise_gain * (lam - counts) / lam
    if electronic_sigma > 0.0:
        noise += rng.normal(0.0, electronic_sigma, nd.shape)
    noise = _kernel3(noise, _MILD)
    return np.clip(nd + noise, HU_MIN, HU_MAX).astype(np.float32)


def hu_window(grid: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clamp to [lo, hi] and map affinely onto [0, 1]."""
    if lo >= hi:
        raise ValueError(f"window bounds must satisfy lo < hi, got [{lo}, {hi}]")
    g = np.asarray(grid, dtype=np.float64)
    return ((np.clip(g, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def hu_unwindow(normalized: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Inverse of :func:`hu_window` on its [0, 1] range."""
    if lo >= hi:
        raise ValueError(f"window bounds must satisfy lo < hi, got [{lo}, {hi}]")
    g = np.asarray(normalized, dtype=np.float64)
    return (g * (hi - lo) + lo).astype(np.float32)


def make_pair(seed: int, size: int = 256, dose: float = 0.25) -> PhantomPair:
    """Clean phantom plus its seeded low-dose counterpart."""
    ndct, parts = _compose_phantom(seed, size)
    ldct = simulate_low_dose(ndct, dose, seed=seed + 1)
    return PhantomPair(ndct=ndct, ldct=ldct, dose=float(dose), seed=int(seed), anatomy=parts)


def generate_dataset(
    count: int,
    size: int = 256,
    dose: float = 0.25,
    seed: int = 0,
    out_dir: Optional[str] = None,
) -> List[PhantomPair]:
    """Independent pairs; sample i uses derived seed ``seed * 1_000_003 + i``."""
    if count < 1:
        raise ValueError("need at least one pair")
    pairs = []
    for i in range(count):
        pair = make_pair(seed * 1_000_003 + i, size=size, dose=dose)
        if out_dir is not None:
            save_pair(f"{out_dir}/pair_{i:05d}.lmpd", pair)
        pairs.append(pair)
    return pairs
