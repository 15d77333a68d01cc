"""Image quality metrics, dataset evaluation, and scan benchmarking.

PSNR and SSIM are computed on display-windowed images normalized to [0, 1],
so ``data_range`` defaults to 1. Windowing to [-160, 240] HU and using range
1 is identical, decibel for decibel, to clamping in HU and using range 400;
the normalized convention is used throughout.
"""

from __future__ import annotations

import csv
import io as _stdio
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .io import PhantomPair
from .phantom import METRIC_WINDOW, TRAIN_WINDOW, hu_window
from .scan2d import ScanAccounting, es2d
from .ssm import init_selective_projections
from .tensor import Tensor

__all__ = [
    "psnr",
    "ssim",
    "MetricReport",
    "evaluate",
    "bench_scan",
    "bench_to_csv",
]


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE) in dB; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr needs matching shapes, got {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering: rows then columns."""
    size = kernel.size
    rows = np.lib.stride_tricks.sliding_window_view(img, size, axis=1) @ kernel
    return np.lib.stride_tricks.sliding_window_view(rows, size, axis=0) @ kernel


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
    window_size: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity over valid Gaussian-weighted windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim needs matching shapes, got {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window_size:
        raise ValueError(f"ssim needs 2-D images of at least {window_size}x{window_size}")
    kernel = _gaussian1d(window_size, sigma)
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a * mu_a
    var_b = _windowed_mean(b * b, kernel) - mu_b * mu_b
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image rows plus aggregates; FSIM is reserved but not computed."""

    per_image: List[Dict[str, object]]
    mean_psnr: float
    std_psnr: float
    mean_ssim: float
    std_ssim: float
    window: Tuple[float, float]

    def to_jsonl(self) -> str:
        """One JSON line per image, then an aggregate line; inf -> "inf"."""
        lines = []
        for row in self.per_image:
            out = dict(row)
            if out["psnr"] == math.inf:
                out["psnr"] = "inf"
            lines.append(json.dumps(out))
        lines.append(
            json.dumps(
                {
                    "aggregate": True,
                    "mean_psnr": self.mean_psnr if self.mean_psnr != math.inf else "inf",
                    "std_psnr": self.std_psnr,
                    "mean_ssim": self.mean_ssim,
                    "std_ssim": self.std_ssim,
                    "window": list(self.window),
                }
            )
        )
        return "\n".join(lines) + "\n"


def evaluate(
    pairs: Sequence[PhantomPair],
    denoise: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    window: Tuple[float, float] = METRIC_WINDOW,
) -> MetricReport:
    """Score a denoiser (HU in, HU out) over pairs; None scores the inputs.

    Metrics compare against the clean image inside the display window,
    normalized to [0, 1] with data range 1.
    """
    if not pairs:
        raise ValueError("evaluate needs at least one pair")
    lo, hi = window
    rows: List[Dict[str, object]] = []
    psnrs: List[float] = []
    ssims: List[float] = []
    for i, pair in enumerate(pairs):
        out_hu = pair.ldct if denoise is None else denoise(pair.ldct)
        ref = hu_window(pair.ndct, lo, hi)
        got = hu_window(out_hu, lo, hi)
        p = psnr(got, ref, 1.0)
        s = ssim(got, ref, 1.0)
        rows.append({"index": i, "seed": pair.seed, "psnr": p, "ssim": s, "fsim": None})
        psnrs.append(p)
        ssims.append(s)
    pa = np.asarray(psnrs, dtype=np.float64)
    sa = np.asarray(ssims, dtype=np.float64)
    finite = pa[np.isfinite(pa)]  # identical images give +inf; keep std finite
    return MetricReport(
        per_image=rows,
        mean_psnr=float(pa.mean()),
        std_psnr=float(finite.std()) if finite.size else 0.0,
        mean_ssim=float(sa.mean()),
        std_ssim=float(sa.std()),
        window=(float(lo), float(hi)),
    )


def bench_scan(
    sizes: Sequence[int],
    step: int = 2,
    channels: int = 8,
    state_size: int = 8,
    trials: int = 3,
    seed: int = 0,
) -> List[Dict[str, float]]:
    """Wall-time the four-direction scan per grid size; min-of-k timing.

    ``sizes`` are total pixel counts N; each must be a square number whose
    side the skip step divides.
    """
    rng = np.random.default_rng(seed)
    projections = [
        init_selective_projections(rng, channels, state_size) for _ in range(4)
    ]
    rows: List[Dict[str, float]] = []
    for n in sizes:
        side = int(round(math.sqrt(n)))
        if side * side != n:
            raise ValueError(f"benchmark sizes must be squares, got {n}")
        x = Tensor(rng.normal(0.0, 1.0, (1, channels, side, side)))
        best = math.inf
        accounting = None
        for _ in range(trials):
            with ScanAccounting() as acc:
                t0 = time.perf_counter()
                es2d(x, projections, step=step)
                best = min(best, time.perf_counter() - t0)
            accounting = acc
        rows.append(
            {
                "n": int(n),
                "step": int(step),
                "seq_len": int(accounting.max_seq_len),
                "total_steps": int(accounting.total_steps),
                "wall_time_s": best,
            }
        )
    return rows


def bench_to_csv(rows: Sequence[Dict[str, float]]) -> str:
    buf = _stdio.StringIO()
    writer = csv.DictWriter(
        buf,
        fieldnames=["n", "step", "seq_len", "total_steps", "wall_time_s"],
        lineterminator="\n",
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
