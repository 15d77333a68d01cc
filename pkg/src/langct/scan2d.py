"""Four-direction 2-D selective scans with optional skip-sampling.

A feature map is unrolled along four scan orders (row-major and column-major,
each forward and reverse), run through per-direction selective scans, and the
four outputs are summed back on the grid. Skip-sampling with step s first
splits the grid into s*s interleaved sub-grids (one per (row offset, col
offset) residue), scans each sub-grid as its own shorter sequence, and
reassembles. Every grid position is still visited by all four directions, so
the per-image step count stays 4*H*W while individual sequences shrink to
H*W/s^2; the s=1 case reduces to the plain four-direction scan bit-for-bit.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from langct.nn import Module
from langct.ssm import SelectiveProjections, init_selective_projections, selective_scan_core
from langct.tensor import (
    Tensor,
    broadcast0,
    concat,
    exp as t_exp,
    flip,
    matmul,
    mul,
    neg,
    reshape,
    softplus,
    transpose,
)

__all__ = [
    "ROW_FORWARD",
    "ROW_REVERSE",
    "COL_FORWARD",
    "COL_REVERSE",
    "DIRECTIONS",
    "direction_order",
    "flatten_direction",
    "unflatten_direction",
    "SubGridPartition",
    "ScanAccounting",
    "es2d",
    "ss2d",
    "DirectionalScan2d",
]

ROW_FORWARD, ROW_REVERSE, COL_FORWARD, COL_REVERSE = range(4)
DIRECTIONS = (ROW_FORWARD, ROW_REVERSE, COL_FORWARD, COL_REVERSE)


def direction_order(direction: int, height: int, width: int) -> np.ndarray:
    """Flat (row-major) grid index visited at each sequence position.

    A permutation of range(height*width); its argsort is the inverse map.
    """
    flat = np.arange(height * width)
    if direction == ROW_FORWARD:
        return flat
    if direction == ROW_REVERSE:
        return flat[::-1].copy()
    if direction == COL_FORWARD:
        return flat.reshape(height, width).T.ravel().copy()
    if direction == COL_REVERSE:
        return flat.reshape(height, width).T.ravel()[::-1].copy()
    raise ValueError(f"unknown scan direction {direction}")


def flatten_direction(x: Tensor, direction: int) -> Tensor:
    """(G, C, H, W) -> (G, L, C) sequence in the given scan order."""
    if x.ndim != 4:
        raise ValueError(f"expected (G, C, H, W), got {x.shape}")
    g, c, h, w = x.shape
    if direction in (COL_FORWARD, COL_REVERSE):
        x = transpose(x, (0, 1, 3, 2))
    seq = reshape(x, (g, c, h * w))
    if direction in (ROW_REVERSE, COL_REVERSE):
        seq = flip(seq, 2)
    return transpose(seq, (0, 2, 1))


def unflatten_direction(y: Tensor, direction: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`flatten_direction`."""
    g = y.shape[0]
    seq = transpose(y, (0, 2, 1))
    if direction in (ROW_REVERSE, COL_REVERSE):
        seq = flip(seq, 2)
    if direction in (COL_FORWARD, COL_REVERSE):
        grid = reshape(seq, (g, seq.shape[1], width, height))
        return transpose(grid, (0, 1, 3, 2))
    return reshape(seq, (g, seq.shape[1], height, width))


class SubGridPartition:
    """Interleaved s*s sub-grid split of an (B, C, H, W) map.

    Position (i, j) lands in sub-grid (i mod s, j mod s); sub-grids are
    disjoint and cover the grid.
    """

    def __init__(self, step: int):
        if step < 1:
            raise ValueError(f"step must be >= 1, got {step}")
        self.step = int(step)

    def check(self, height: int, width: int) -> None:
        s = self.step
        if height % s or width % s:
            raise ValueError(f"grid {height}x{width} not divisible by step {s}")

    def split(self, x: Tensor) -> Tensor:
        """(B, C, H, W) -> (B*s*s, C, H/s, W/s), sub-grids batch-major."""
        b, c, hh, ww = x.shape
        self.check(hh, ww)
        s = self.step
        h, w = hh // s, ww // s
        x = reshape(x, (b, c, h, s, w, s))
        x = transpose(x, (0, 3, 5, 1, 2, 4))
        return reshape(x, (b * s * s, c, h, w))

    def merge(self, y: Tensor, batch: int) -> Tensor:
        """Inverse of :meth:`split`."""
        s = self.step
        g, c, h, w = y.shape
        if g != batch * s * s:
            raise ValueError(f"expected {batch * s * s} sub-grids, got {g}")
        y = reshape(y, (batch, s, s, c, h, w))
        y = transpose(y, (0, 3, 4, 1, 5, 2))
        return reshape(y, (batch, c, h * s, w * s))

    def flat_indices(self, height: int, width: int) -> list[np.ndarray]:
        """Row-major flat indices owned by each sub-grid, batch-major order."""
        self.check(height, width)
        s = self.step
        out = []
        for br in range(s):
            for bc in range(s):
                rows = np.arange(height // s) * s + br
                cols = np.arange(width // s) * s + bc
                out.append((rows[:, None] * width + cols[None, :]).ravel())
        return out


# -- instrumentation ---------------------------------------------------------

_ACCOUNTING: list["ScanAccounting"] = []


class ScanAccounting:
    """Collects per-call scan statistics from every es2d/ss2d forward that
    runs inside the context."""

    def __init__(self):
        self.records: list[dict] = []

    def __enter__(self) -> "ScanAccounting":
        _ACCOUNTING.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACCOUNTING.remove(self)

    @property
    def total_steps(self) -> int:
        return sum(r["steps"] for r in self.records)

    @property
    def max_seq_len(self) -> int:
        return max((r["seq_len"] for r in self.records), default=0)


def _record_scan(**rec) -> None:
    if _ACCOUNTING:
        _ACCOUNTING[-1].records.append(rec)


# -- the scans ----------------------------------------------------------------


def es2d(
    x: Tensor,
    projections: Sequence[SelectiveProjections],
    step: int = 1,
    chunk: int = 32,
) -> Tensor:
    """Skip-sampled four-direction selective scan of a (B, C, H, W) map.

    Each direction owns one projection set, shared by all sub-grids of that
    direction. All 4*s*s*B sequences run as one fused scan call.
    """
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W), got {x.shape}")
    if len(projections) != len(DIRECTIONS):
        raise ValueError(f"need {len(DIRECTIONS)} projection sets, got {len(projections)}")
    batch, _, height, width = x.shape
    part = SubGridPartition(step)
    xs = part.split(x)
    groups, channels, h, w = xs.shape
    seq_len = h * w

    seqs, deltas, bs, cs, a_mats = [], [], [], [], []
    for d, proj in enumerate(projections):
        seq = flatten_direction(xs, d)
        seqs.append(seq)
        deltas.append(softplus(matmul(seq, proj.w_delta) + proj.b_delta))
        bs.append(matmul(seq, proj.w_b) + proj.b_b)
        cs.append(matmul(seq, proj.w_c) + proj.b_c)
        a_mats.append(broadcast0(neg(t_exp(proj.a_log)), groups))

    y_all = selective_scan_core(
        concat(seqs, 0), concat(deltas, 0), concat(a_mats, 0),
        concat(bs, 0), concat(cs, 0), chunk=chunk,
    )

    acc = None
    for d, proj in enumerate(projections):
        y_d = y_all[d * groups : (d + 1) * groups] + mul(seqs[d], proj.d)
        grid = unflatten_direction(y_d, d, h, w)
        acc = grid if acc is None else acc + grid
    out = part.merge(acc, batch)

    _record_scan(
        batch=batch, height=height, width=width, step=step,
        seq_len=seq_len, sequences=len(DIRECTIONS) * groups,
        steps=len(DIRECTIONS) * groups * seq_len,
    )
    return out


def ss2d(x: Tensor, projections: Sequence[SelectiveProjections], chunk: int = 32) -> Tensor:
    """Plain four-direction scan: es2d with step 1 (same code path)."""
    return es2d(x, projections, step=1, chunk=chunk)


class DirectionalScan2d(Module):
    """Learnable four-direction scan layer with skip-sampling step s."""

    def __init__(self, rng: np.random.Generator, channels: int, state_size: int,
                 step: int = 1, chunk: int = 32):
        self.directions = [
            init_selective_projections(rng, channels, state_size)
            for _ in DIRECTIONS
        ]
        self.step = step
        self.chunk = chunk

    def forward(self, x: Tensor) -> Tensor:
        return es2d(x, self.directions, step=self.step, chunk=self.chunk)
